"""Sparse variational GP with inducing points and a conditional inducing distribution.

For each ``theta*`` the inducing values ``u = f(Z_u)`` get a Gaussian
``q(u | theta*)``, either the closed-form optimum or a parametric model
``N(m_lambda(theta*), S_lambda(theta*))``.  The evidence lower bound splits
into a sum over data points plus a KL term, so it can be estimated on
mini-batches.  This is an offline extension; the adaptive loop uses the
exact GP.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
import torch
from scipy.cluster.vq import kmeans2
from torch import nn

from .conditional import CondGaussianModel
from .core import DTYPE, LOG_2PI, CalibrationDataset, as_tensor
from .gp import CovarianceError, KernelSpec, PredictiveMoments, cross_kernel, mean_function, training_inputs

DEFAULT_M = 64
DEFAULT_BATCH = 128
JITTER = 1e-12
PIVOT_FLOOR = 1e-13
MAX_JITTER = 1e-4


def jittered_cholesky(K: torch.Tensor, jitter: float = JITTER):
    """Cholesky of ``K + j I``; returns ``(L, j)``.

    ``j = 0`` is accepted when every pivot stays above ``PIVOT_FLOOR`` times the
    mean diagonal; otherwise ``j`` starts at ``jitter`` and grows tenfold.
    """
    eye = torch.eye(K.shape[-1], dtype=K.dtype)
    L, info = torch.linalg.cholesky_ex(K)
    floor = PIVOT_FLOOR * torch.diagonal(K, dim1=-2, dim2=-1).mean()
    if not torch.any(info > 0) and torch.diagonal(L, dim1=-2, dim2=-1).square().min() > floor:
        return L, 0.0
    j = jitter
    while j <= MAX_JITTER:
        L, info = torch.linalg.cholesky_ex(K + j * eye)
        if not torch.any(info > 0):
            return L, j
        j *= 10.0
    raise CovarianceError("inducing covariance is not positive definite")


@dataclass(frozen=True)
class InducingSet:
    """Pseudo-inputs ``(x, theta, s)`` in the joint space and their jittered Gram matrix."""

    x: torch.Tensor
    theta: torch.Tensor
    s: torch.Tensor
    K_uu: torch.Tensor
    L_uu: torch.Tensor
    jitter: float
    n_data: int = 0  # dataset size at placement

    @classmethod
    def from_points(cls, x, theta, s, spec: KernelSpec, jitter: float = JITTER, n_data: int = 0) -> "InducingSet":
        x, theta, s = as_tensor(x), as_tensor(theta), as_tensor(s).reshape(-1)
        if x.shape[0] < 1:
            raise ValueError("need at least one inducing point")
        K = cross_kernel(x, theta, s, x, theta, s, spec)
        L, j = jittered_cholesky(K, jitter)
        eye = torch.eye(K.shape[-1], dtype=DTYPE)
        return cls(x, theta, s, K + j * eye, L, j, n_data)

    @property
    def size(self) -> int:
        return self.x.shape[0]

    def needs_refresh(self, n_data: int) -> bool:
        """Placement is redone once the dataset has doubled."""
        return n_data >= 2 * max(self.n_data, 1)


def kmeans_inducing(data: CalibrationDataset, theta_star, spec: KernelSpec, rng: np.random.Generator,
                    M: int = DEFAULT_M) -> InducingSet:
    """k-means centroids of the training inputs (real rows at ``theta_star``).

    Fidelity flags of the centroids are rounded to 0/1.  With at most ``M``
    inputs the inputs themselves are used.
    """
    inp = training_inputs(data, as_tensor(theta_star).reshape(-1))
    pts = torch.cat([inp.x, inp.theta, inp.s[:, None]], dim=-1).numpy()
    if pts.shape[0] <= M:
        cent = pts
    else:
        cent, _ = kmeans2(pts, M, minit="++", seed=rng)
    dx = data.dim_x
    return InducingSet.from_points(cent[:, :dx], cent[:, dx:-1], np.round(np.clip(cent[:, -1], 0, 1)), spec,
                                   n_data=len(data))


class SparseConditionalPosterior(NamedTuple):
    """``q(u | theta*) = N(mean, cov)`` for a stack of ``theta*``: (S, M) and (S, M, M)."""

    theta_star: torch.Tensor
    mean: torch.Tensor
    cov: torch.Tensor


class _Terms(NamedTuple):
    K_fu: torch.Tensor       # (S, N, M)
    k_ff: torch.Tensor       # (S, N) prior variances
    noise: torch.Tensor      # (N,) Sigma_y diagonal
    r: torch.Tensor          # (S, N) residual against the mean function


def _terms(theta_star, data: CalibrationDataset, inducing: InducingSet, spec: KernelSpec) -> _Terms:
    if len(data) == 0:
        raise ValueError("dataset is empty")
    ts = as_tensor(theta_star).reshape(-1, data.dim_theta)
    inp = training_inputs(data, ts)
    K_fu = cross_kernel(inp.x, inp.theta, inp.s, inducing.x, inducing.theta, inducing.s, spec)
    xi, ti = inp.x.unsqueeze(-2), inp.theta.unsqueeze(-2)
    k_ff = cross_kernel(xi, ti, inp.s.unsqueeze(-1), xi, ti, inp.s.unsqueeze(-1), spec)[..., 0, 0]
    noise = spec.nugget + spec.noise_var * inp.s[0]
    r = inp.y - mean_function(inp.theta, inp.s, spec)
    return _Terms(K_fu, k_ff, noise, r)


def psi_matrices(theta_star, data: CalibrationDataset, inducing: InducingSet, spec: KernelSpec):
    """``Psi1 = Sigma_y^{-1} K_fu`` (S, N, M) and ``Psi2 = K_uf Sigma_y^{-1} K_fu`` (S, M, M)."""
    t = _terms(theta_star, data, inducing, spec)
    psi1 = t.K_fu / t.noise[:, None]
    psi2 = t.K_fu.transpose(-1, -2) @ psi1
    return psi1, 0.5 * (psi2 + psi2.transpose(-1, -2))


def optimal_inducing_posterior(theta_star, data: CalibrationDataset, inducing: InducingSet,
                               spec: KernelSpec) -> SparseConditionalPosterior:
    """Closed-form optimum: ``mean = K_uu A^{-1} Psi1^T r``, ``cov = K_uu A^{-1} K_uu``, ``A = K_uu + Psi2``.

    An empty dataset returns the prior ``N(0, K_uu)``.
    """
    ts = as_tensor(theta_star).reshape(-1, data.dim_theta)
    S, M = ts.shape[0], inducing.size
    if len(data) == 0:
        return SparseConditionalPosterior(ts, torch.zeros(S, M, dtype=DTYPE), inducing.K_uu.expand(S, M, M).clone())
    t = _terms(ts, data, inducing, spec)
    # whitened form: A = L B L^T with B = I + P P^T, P = L^{-1} K_uf Sigma_y^{-1/2}
    L = inducing.L_uu.expand(S, M, M)
    root = t.noise.sqrt()
    P = torch.linalg.solve_triangular(L, t.K_fu.transpose(-1, -2), upper=False) / root
    B = torch.eye(M, dtype=DTYPE) + P @ P.transpose(-1, -2)
    LB = torch.linalg.cholesky(0.5 * (B + B.transpose(-1, -2)))
    c = torch.cholesky_solve(P @ (t.r / root).unsqueeze(-1), LB)
    mean = (L @ c).squeeze(-1)
    # cov = L B^{-1} L^T = W^T W with W = L_B^{-1} L^T
    W = torch.linalg.solve_triangular(LB, L.transpose(-1, -2), upper=False)
    return SparseConditionalPosterior(ts, mean, W.transpose(-1, -2) @ W)


def _project(inducing: InducingSet, K_uq: torch.Tensor) -> torch.Tensor:
    """``K_uu^{-1} K_uq``."""
    return torch.cholesky_solve(K_uq, inducing.L_uu)


def sparse_predict(query_x, query_theta, post: SparseConditionalPosterior, inducing: InducingSet,
                   spec: KernelSpec, fidelity: int = 0) -> PredictiveMoments:
    """Predictive moments of ``f(x, t, fidelity)`` under ``q(u | theta*)``; same shapes as the exact GP."""
    qx, qt = as_tensor(query_x), as_tensor(query_theta)
    S = post.mean.shape[0]
    qx = qx.expand(S, *qx.shape[-2:])
    qt = qt.expand(S, *qt.shape[-2:])
    fq = float(fidelity)
    K_qq = cross_kernel(qx, qt, fq, qx, qt, fq, spec)
    K_uq = cross_kernel(inducing.x, inducing.theta, inducing.s, qx, qt, fq, spec)
    A = _project(inducing, K_uq)
    mean = mean_function(qt, fq, spec) + (A.transpose(-1, -2) @ post.mean.unsqueeze(-1)).squeeze(-1)
    cov = K_qq - K_uq.transpose(-1, -2) @ A + A.transpose(-1, -2) @ post.cov @ A
    return PredictiveMoments(mean, cov)


def inducing_kl(post: SparseConditionalPosterior, inducing: InducingSet) -> torch.Tensor:
    """``KL(q(u | theta*) || N(0, K_uu))`` per ``theta*``."""
    M = inducing.size
    L = inducing.L_uu
    Lq = torch.linalg.cholesky(post.cov)
    trace = (torch.linalg.solve_triangular(L.expand_as(Lq), Lq, upper=False) ** 2).sum((-1, -2))
    a = torch.cholesky_solve(post.mean.unsqueeze(-1), L).squeeze(-1)
    maha = (post.mean * a).sum(-1)
    logdet_p = 2 * torch.log(torch.diagonal(L)).sum()
    logdet_q = 2 * torch.log(torch.diagonal(Lq, dim1=-2, dim2=-1)).sum(-1)
    return 0.5 * (trace + maha - M + logdet_p - logdet_q)


def expected_log_lik(post: SparseConditionalPosterior, data: CalibrationDataset, inducing: InducingSet,
                     spec: KernelSpec, idx=None) -> torch.Tensor:
    """Per-point ``E_{q(u)} E_{p(f|u)} log N(y_i; f_i, sigma_i^2)`` for rows ``idx`` (all by default): (S, n)."""
    t = _terms(post.theta_star, data, inducing, spec)
    K_fu, k_ff, noise, r = t
    if idx is not None:
        idx = torch.as_tensor(np.asarray(idx, dtype=np.int64))
        K_fu, k_ff, noise, r = K_fu[:, idx], k_ff[:, idx], noise[idx], r[:, idx]
    A = _project(inducing, K_fu.transpose(-1, -2))                       # (S, M, n)
    mu = (A.transpose(-1, -2) @ post.mean.unsqueeze(-1)).squeeze(-1)
    cond_var = k_ff - (K_fu * A.transpose(-1, -2)).sum(-1)
    q_var = (A * (post.cov @ A)).sum(-2)
    return (-0.5 * LOG_2PI - 0.5 * torch.log(noise) - 0.5 * (r - mu) ** 2 / noise
            - 0.5 * (cond_var + q_var) / noise)


def sparse_elbo(theta_samples, data: CalibrationDataset, inducing: InducingSet, spec: KernelSpec,
                minibatch=None, q: Optional["ParametricInducingPosterior"] = None) -> torch.Tensor:
    """ELBO averaged over ``theta_samples``.

    The data term uses rows ``minibatch`` scaled by ``N / |minibatch|`` (all
    rows by default).  ``q`` defaults to the closed-form optimum.
    """
    ts = as_tensor(theta_samples).reshape(-1, data.dim_theta)
    post = optimal_inducing_posterior(ts, data, inducing, spec) if q is None else q(ts)
    N = len(data)
    scale = 1.0
    if minibatch is not None:
        minibatch = np.asarray(minibatch, dtype=int)
        if minibatch.size == 0 or minibatch.min() < 0 or minibatch.max() >= N:
            raise ValueError("minibatch must index the dataset")
        scale = N / minibatch.size
    data_term = scale * expected_log_lik(post, data, inducing, spec, minibatch).sum(-1)
    return (data_term - inducing_kl(post, inducing)).mean()


def random_minibatch(n: int, size: int, rng: np.random.Generator) -> np.ndarray:
    return np.sort(rng.choice(n, size=min(size, n), replace=False))


class ParametricInducingPosterior(nn.Module):
    """``q(u | theta*) = N(m(theta*), L(theta*) L(theta*)^T)`` with the conditional-Gaussian network.

    Starts at ``N(0, I)`` scaled by the prior Cholesky, i.e. at the prior.
    """

    def __init__(self, inducing: InducingSet, dim_theta: int, hidden: int = 32, depth: int = 2):
        super().__init__()
        self.net = CondGaussianModel(inducing.size, dim_theta, hidden, depth).to(DTYPE)
        self.register_buffer("L_uu", inducing.L_uu.clone())

    def forward(self, theta_star) -> SparseConditionalPosterior:
        ts = as_tensor(theta_star)
        m, L = self.net.params(ts)
        # whitened parametrisation: u = L_uu v, v ~ N(m, L L^T)
        mean = (self.L_uu @ m.unsqueeze(-1)).squeeze(-1)
        C = self.L_uu @ L
        return SparseConditionalPosterior(ts, mean, C @ C.transpose(-1, -2))


def fit_parametric(q: ParametricInducingPosterior, theta_samples, data: CalibrationDataset, inducing: InducingSet,
                   spec: KernelSpec, rng: np.random.Generator, steps: int = 200, lr: float = 1e-2,
                   batch: int = DEFAULT_BATCH):
    """Maximise the mini-batched ELBO over the network weights; returns the ELBO trace."""
    opt = torch.optim.Adam(q.parameters(), lr=lr)
    trace = []
    for _ in range(steps):
        opt.zero_grad()
        loss = -sparse_elbo(theta_samples, data, inducing, spec, random_minibatch(len(data), batch, rng), q)
        loss.backward()
        opt.step()
        trace.append(-loss.item())
    return trace


# ---------------------------------------------------------------------------
# joint versus mean-field inducing distributions


def sample_outcomes(theta_samples, designs, params, data: CalibrationDataset, inducing: InducingSet,
                    spec: KernelSpec, gen: torch.Generator, mean_field: bool = False) -> torch.Tensor:
    """Draw simulator outcomes at ``(designs, params)`` for each ``theta*`` sample: (S, B).

    With ``mean_field`` the inducing values come from one ``q(u)`` shared by
    all samples (the posterior at the sample mean), so outcomes no longer
    depend on ``theta*``.
    """
    ts = as_tensor(theta_samples).reshape(-1, data.dim_theta)
    S = ts.shape[0]
    anchor = ts.mean(0, keepdim=True) if mean_field else ts
    post = optimal_inducing_posterior(anchor, data, inducing, spec)
    Lq = torch.linalg.cholesky(post.cov + inducing.jitter * torch.eye(inducing.size, dtype=DTYPE))
    z = torch.randn(S, inducing.size, 1, generator=gen, dtype=DTYPE)
    u = post.mean.unsqueeze(-1) + Lq @ z
    qx, qt = as_tensor(designs), as_tensor(params)
    K_uq = cross_kernel(inducing.x, inducing.theta, inducing.s, qx, qt, 0.0, spec)
    A = _project(inducing, K_uq)
    f = (A.T @ u).squeeze(-1) + mean_function(qt, 0.0, spec)
    return f


def gaussian_mutual_information(a, b) -> float:
    """Mutual information (nats) of a Gaussian fitted to paired samples ``a`` (n, p) and ``b`` (n, q)."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    a, b = a.reshape(a.shape[0], -1), b.reshape(b.shape[0], -1)
    C = np.cov(np.hstack([a, b]), rowvar=False)
    p = a.shape[1]
    _, la = np.linalg.slogdet(C[:p, :p])
    _, lb = np.linalg.slogdet(C[p:, p:])
    _, lj = np.linalg.slogdet(C)
    return 0.5 * (la + lb - lj)
