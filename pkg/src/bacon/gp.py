"""Bi-fidelity Gaussian-process emulator.

Simulations live at fidelity ``s=0`` with their own calibration inputs; real
observations live at ``s=1`` with the unknown ``theta_star`` plugged in.  The
combined covariance is

    k(z, z') = k_rho(s, s') * k_sim((x, t), (x', t')) + s * s' * k_err(x, x')

with ``k_rho(s, s') = (1 + s(rho - 1)) (1 + s'(rho - 1))``.

All functions broadcast over leading batch axes, so a stack of ``theta_star``
samples of shape ``(S, d_theta)`` yields stacked matrices ``(S, n, n)``.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Literal, NamedTuple, Optional, Sequence

import numpy as np
import torch

from .core import DTYPE, LOG_2PI, CalibrationDataset, as_tensor

log = logging.getLogger(__name__)

SQRT5 = math.sqrt(5.0)


class CovarianceError(RuntimeError):
    """Cholesky factorisation failed even after inflating the nugget."""


@dataclass(frozen=True)
class KernelSpec:
    """Hyperparameters of the combined GP.

    Lengthscales may be ``inf`` to make a kernel ignore a dimension.  Fields
    may hold tensors (e.g. while fitting) so that gradients flow through them.
    ``mean_coeffs`` optionally gives the simulator a mean linear in theta,
    ``m(x, t, s) = (1 + s(rho - 1)) * mean_coeffs @ t``; ``None`` means zero mean.
    """

    sim_lengthscales: Sequence[float]
    sim_kernel: Literal["squared-exponential", "matern-2.5"] = "squared-exponential"
    sim_variance: float = 1.0
    err_kernel: Literal["matern-2.5", "zero"] = "zero"
    err_variance: float = 0.0
    err_lengthscales: Optional[Sequence[float]] = None
    rho: float = 1.0
    noise_var: float = 0.25
    nugget: Optional[float] = None
    mean_coeffs: Optional[Sequence[float]] = None

    def __post_init__(self):
        if self.sim_kernel not in ("squared-exponential", "matern-2.5"):
            raise ValueError(f"unknown simulation kernel {self.sim_kernel!r}")
        if self.err_kernel not in ("matern-2.5", "zero"):
            raise ValueError(f"unknown error kernel {self.err_kernel!r}")
        if self.nugget is None:
            object.__setattr__(self, "nugget", 1e-6 * float(self.sim_variance))
        if not _is_tensor_spec(self):
            ls = np.asarray(self.sim_lengthscales, dtype=float)
            if np.any(ls <= 0):
                raise ValueError("lengthscales must be positive")
            if self.err_lengthscales is not None and np.any(np.asarray(self.err_lengthscales) <= 0):
                raise ValueError("lengthscales must be positive")
            if self.sim_variance < 0 or self.err_variance < 0 or self.noise_var < 0:
                raise ValueError("variances must be non-negative")
            if not self.nugget > 0:
                raise ValueError("nugget must be positive")
            if self.err_kernel != "zero" and self.err_lengthscales is None:
                raise ValueError("error kernel needs lengthscales")

    @property
    def has_error_term(self) -> bool:
        return self.err_kernel != "zero"

    def to_dict(self) -> dict:
        def plain(v):
            if isinstance(v, torch.Tensor):
                v = v.detach().numpy()
            if isinstance(v, np.ndarray):
                return float(v) if v.ndim == 0 else [float(a) for a in v.reshape(-1)]
            if isinstance(v, (list, tuple)):
                return [float(a) for a in v]
            return v if v is None or isinstance(v, str) else float(v)
        return {f.name: plain(getattr(self, f.name)) for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        return cls(**d)

    def detached(self) -> "KernelSpec":
        """Plain-float copy of a spec whose fields may be tensors."""
        d = self.to_dict()
        return KernelSpec(**d)


def _is_tensor_spec(spec: KernelSpec) -> bool:
    return any(isinstance(getattr(spec, f.name), torch.Tensor) for f in dataclasses.fields(spec))


class PredictiveMoments(NamedTuple):
    mean: torch.Tensor
    cov: torch.Tensor

    @property
    def var(self) -> torch.Tensor:
        return torch.diagonal(self.cov, dim1=-2, dim2=-1)


# ---------------------------------------------------------------------------
# kernels


def fidelity_kernel(s, s_prime, rho):
    """``(1 + s(rho - 1)) * (1 + s'(rho - 1))``."""
    return (1 + s * (rho - 1)) * (1 + s_prime * (rho - 1))


def _sqdist(a: torch.Tensor, b: torch.Tensor, lengthscales) -> torch.Tensor:
    ls = as_tensor(lengthscales)
    inv = torch.where(torch.isinf(ls), torch.zeros_like(ls), 1.0 / ls)
    diff = (a.unsqueeze(-2) - b.unsqueeze(-3)) * inv
    return (diff * diff).sum(-1)


def stationary_kernel(kind: str, a: torch.Tensor, b: torch.Tensor, variance, lengthscales) -> torch.Tensor:
    d2 = _sqdist(a, b, lengthscales)
    if kind == "squared-exponential":
        return variance * torch.exp(-0.5 * d2)
    if kind == "matern-2.5":
        r = torch.sqrt(d2.clamp_min(1e-30))
        return variance * (1 + SQRT5 * r + (5.0 / 3.0) * d2) * torch.exp(-SQRT5 * r)
    raise ValueError(f"unknown kernel {kind!r}")


def _concat(x, t):
    lead = torch.broadcast_shapes(x.shape[:-1], t.shape[:-1])
    return torch.cat([x.expand(*lead, x.shape[-1]), t.expand(*lead, t.shape[-1])], dim=-1)


def sim_kernel(x1, t1, x2, t2, spec: KernelSpec) -> torch.Tensor:
    a = _concat(x1, t1)
    b = _concat(x2, t2)
    return stationary_kernel(spec.sim_kernel, a, b, spec.sim_variance, spec.sim_lengthscales)


def cross_kernel(x1, t1, s1, x2, t2, s2, spec: KernelSpec) -> torch.Tensor:
    """Combined kernel matrix between two input sets.

    ``x*``: (..., n, d_x), ``t*``: (..., n, d_theta), ``s*``: (..., n) or a
    python scalar flag.  Returns (..., n1, n2).
    """
    x1, t1, x2, t2 = (as_tensor(v) for v in (x1, t1, x2, t2))
    s1 = as_tensor(s1)
    s2 = as_tensor(s2)
    k = sim_kernel(x1, t1, x2, t2, spec)
    rho = spec.rho
    s1 = s1.unsqueeze(-1) if s1.ndim else s1
    s2 = s2.unsqueeze(-2) if s2.ndim else s2
    k = (1 + s1 * (rho - 1)) * k * (1 + s2 * (rho - 1))
    if spec.has_error_term:
        both = s1 * s2
        if torch.any(both != 0):
            k = k + both * stationary_kernel(spec.err_kernel, x1, x2, spec.err_variance,
                                             spec.err_lengthscales)
    return k


def combined_kernel(z, z_prime, spec: KernelSpec) -> float:
    """Scalar kernel value between two :class:`~bacon.core.JointInput` points."""
    k = cross_kernel(z.x[None], z.theta[None], float(z.s), z_prime.x[None], z_prime.theta[None],
                     float(z_prime.s), spec)
    return float(k[0, 0])


def mean_function(t, s, spec: KernelSpec) -> torch.Tensor:
    t = as_tensor(t)
    if spec.mean_coeffs is None:
        return torch.zeros(t.shape[:-1], dtype=DTYPE)
    m = t @ as_tensor(spec.mean_coeffs)
    return (1 + as_tensor(s) * (spec.rho - 1)) * m


# ---------------------------------------------------------------------------
# training inputs


class Inputs(NamedTuple):
    x: torch.Tensor
    theta: torch.Tensor
    s: torch.Tensor
    y: torch.Tensor


def training_inputs(data: CalibrationDataset, theta_star) -> Inputs:
    """Stack ``Z(theta*)``: real rows ``(x_i, theta*, 1)`` then simulation rows.

    ``theta_star`` may be (d_theta,) or batched (S, d_theta); outputs carry
    the matching leading axis.
    """
    ts = as_tensor(theta_star)
    batch = ts.shape[:-1]
    xr = as_tensor(data.real_designs)
    xs = as_tensor(data.sim_designs)
    dx = data.dim_x
    tr = ts.unsqueeze(-2).expand(*batch, data.n_real, ts.shape[-1])
    tsim = as_tensor(data.sim_params).reshape(data.n_sims, ts.shape[-1]).expand(*batch, data.n_sims, ts.shape[-1])
    x = torch.cat([xr, xs], dim=0).expand(*batch, data.n_real + data.n_sims, dx)
    theta = torch.cat([tr, tsim], dim=-2)
    s = torch.cat([torch.ones(data.n_real, dtype=DTYPE), torch.zeros(data.n_sims, dtype=DTYPE)])
    y = torch.cat([as_tensor(data.real_outcomes), as_tensor(data.sim_outcomes)])
    return Inputs(x, theta, s.expand(*batch, s.shape[0]), y)


def prior_cov_matrix(inputs: Inputs | Sequence, theta_star, spec: KernelSpec) -> torch.Tensor:
    """Prior covariance of observations: ``K(theta*) + Sigma_y + nugget I``.

    ``inputs`` is either an :class:`Inputs` tuple or a list of
    :class:`~bacon.core.JointInput`; real-fidelity points (``s=1``) take
    ``theta_star`` as their calibration input and carry the noise variance.
    """
    if not isinstance(inputs, Inputs):
        pts = list(inputs)
        if not pts:
            raise ValueError("inputs must be nonempty")
        ts = as_tensor(theta_star) if theta_star is not None else None
        x = as_tensor(np.stack([p.x for p in pts]))
        th = as_tensor(np.stack([p.theta for p in pts]))
        s = as_tensor([float(p.s) for p in pts])
        if ts is not None:
            th = torch.where(s[:, None] == 1, ts.expand_as(th), th)
        inputs = Inputs(x, th, s, torch.zeros(len(pts), dtype=DTYPE))
    K = cross_kernel(inputs.x, inputs.theta, inputs.s, inputs.x, inputs.theta, inputs.s, spec)
    diag = spec.nugget + spec.noise_var * inputs.s
    return K + torch.diag_embed(diag.expand(K.shape[:-1]))


def safe_cholesky(K: torch.Tensor, nugget) -> torch.Tensor:
    """Cholesky with one retry at ten times the nugget."""
    L, info = torch.linalg.cholesky_ex(K)
    if torch.any(info > 0):
        eye = torch.eye(K.shape[-1], dtype=K.dtype)
        L, info = torch.linalg.cholesky_ex(K + 9.0 * nugget * eye)
        if torch.any(info > 0):
            raise CovarianceError("covariance matrix is not positive definite; check hyperparameters")
    return L


def _gauss_logpdf_chol(r: torch.Tensor, L: torch.Tensor) -> torch.Tensor:
    alpha = torch.linalg.solve_triangular(L, r.unsqueeze(-1), upper=False).squeeze(-1)
    n = r.shape[-1]
    return (-0.5 * (alpha * alpha).sum(-1)
            - torch.log(torch.diagonal(L, dim1=-2, dim2=-1)).sum(-1)
            - 0.5 * n * LOG_2PI)


def marginal_log_likelihood(data: CalibrationDataset, theta_star, spec: KernelSpec) -> torch.Tensor:
    """``log N([y_R; y_sim]; m, K(theta*) + Sigma_y)``; batched over theta_star."""
    if len(data) == 0:
        raise ValueError("dataset is empty")
    inp = training_inputs(data, theta_star)
    K = prior_cov_matrix(inp, theta_star, spec)
    L = safe_cholesky(K, spec.nugget)
    r = inp.y - mean_function(inp.theta, inp.s, spec)
    return _gauss_logpdf_chol(r, L)


def gp_predict(query_x, query_theta, theta_star, data: CalibrationDataset, spec: KernelSpec,
               fidelity: int = 0) -> PredictiveMoments:
    """Exact predictive moments of the latent ``f(x, t, fidelity)`` at the queries.

    Reference implementation: one Cholesky of the full training covariance.
    ``query_x``: (B, d_x); ``query_theta``: (B, d_theta) or broadcastable to
    the ``theta_star`` batch.  Query covariance excludes noise and nugget.
    """
    qx, qt = as_tensor(query_x), as_tensor(query_theta)
    if qx.shape[-2] == 0:
        raise ValueError("query is empty")
    ts = as_tensor(theta_star)
    batch = ts.shape[:-1]
    qx = qx.expand(*batch, *qx.shape[-2:])
    qt = qt.expand(*batch, *qt.shape[-2:])
    fq = float(fidelity)
    Kqq = cross_kernel(qx, qt, fq, qx, qt, fq, spec)
    mq = mean_function(qt, fq, spec)
    if len(data) == 0:
        return PredictiveMoments(mq, Kqq)
    inp = training_inputs(data, ts)
    K = prior_cov_matrix(inp, ts, spec)
    L = safe_cholesky(K, spec.nugget)
    Kdq = cross_kernel(inp.x, inp.theta, inp.s, qx, qt, fq, spec)
    V = torch.linalg.solve_triangular(L, Kdq, upper=False)
    r = inp.y - mean_function(inp.theta, inp.s, spec)
    a = torch.linalg.solve_triangular(L, r.unsqueeze(-1), upper=False)
    mean = mq + (V.transpose(-1, -2) @ a).squeeze(-1)
    cov = Kqq - V.transpose(-1, -2) @ V
    return PredictiveMoments(mean, cov)


# ---------------------------------------------------------------------------
# cached conditioning


class RealBlock(NamedTuple):
    """Real-data quantities for a stack of theta* samples, conditioned on the simulations."""

    theta_star: torch.Tensor   # (S, d_theta)
    V: torch.Tensor            # L_sim^{-1} K_sim,real  (S, N_sim, R)
    L: torch.Tensor            # chol of real-block covariance given sims (S, R, R)
    b: torch.Tensor            # L^{-1} (y_R - mean given sims)  (S, R)
    logdet_half: torch.Tensor  # sum log diag L  (S,)


class Emulator:
    """GP conditioned on a dataset, with the simulation block factorised once.

    The simulation inputs carry their own calibration values, so their
    covariance does not depend on ``theta*``.  Conditioning proceeds in two
    exact stages: first on the simulations (shared), then on the ``R`` real
    observations for each ``theta*`` sample.  Results agree with
    :func:`gp_predict` up to round-off.
    """

    def __init__(self, data: CalibrationDataset, spec: KernelSpec):
        self.data = data
        self.spec = spec
        self.xr = as_tensor(data.real_designs)
        self.yr = as_tensor(data.real_outcomes)
        self.n_sims = data.n_sims
        if self.n_sims:
            self.xs = as_tensor(data.sim_designs)
            self.ts = as_tensor(data.sim_params)
            K = cross_kernel(self.xs, self.ts, 0.0, self.xs, self.ts, 0.0, spec)
            K = K + spec.nugget * torch.eye(self.n_sims, dtype=DTYPE)
            self.Ls = safe_cholesky(K, spec.nugget)
            r = as_tensor(data.sim_outcomes) - mean_function(self.ts, 0.0, spec)
            self.a = torch.linalg.solve_triangular(self.Ls, r.unsqueeze(-1), upper=False).squeeze(-1)

    def _sim_solve(self, Ksq: torch.Tensor) -> torch.Tensor:
        Ls = self.Ls.expand(*Ksq.shape[:-2], *self.Ls.shape)
        return torch.linalg.solve_triangular(Ls, Ksq, upper=False)

    def condition(self, theta_star) -> RealBlock:
        ts = as_tensor(theta_star)
        if ts.ndim == 1:
            ts = ts.unsqueeze(0)
        S, R = ts.shape[0], self.data.n_real
        spec = self.spec
        tr = ts.unsqueeze(-2).expand(S, R, ts.shape[-1])
        xr = self.xr.expand(S, R, self.xr.shape[-1])
        Krr = cross_kernel(xr, tr, 1.0, xr, tr, 1.0, spec)
        mr = mean_function(tr, 1.0, spec)
        if self.n_sims:
            Ksr = cross_kernel(self.xs, self.ts, 0.0, xr, tr, 1.0, spec)
            V = self._sim_solve(Ksr)
            mr = mr + (V.transpose(-1, -2) @ self.a.unsqueeze(-1)).squeeze(-1)
            Krr = Krr - V.transpose(-1, -2) @ V
        else:
            V = torch.zeros(S, 0, R, dtype=DTYPE)
        Krr = Krr + (spec.noise_var + spec.nugget) * torch.eye(R, dtype=DTYPE)
        L = safe_cholesky(Krr, spec.nugget)
        b = torch.linalg.solve_triangular(L, (self.yr - mr).unsqueeze(-1), upper=False).squeeze(-1)
        logdet_half = torch.log(torch.diagonal(L, dim1=-2, dim2=-1)).sum(-1)
        return RealBlock(ts, V, L, b, logdet_half)

    def real_log_likelihood(self, theta_star=None, block: Optional[RealBlock] = None) -> torch.Tensor:
        """``log N(y_R; mu(Z_R(theta*)), Sigma(Z_R(theta*)) + sigma^2 I)`` given the simulations."""
        if block is None:
            block = self.condition(theta_star)
        R = self.data.n_real
        return -0.5 * (block.b * block.b).sum(-1) - block.logdet_half - 0.5 * R * LOG_2PI

    def predict(self, query_x, query_theta, block: Optional[RealBlock] = None,
                fidelity: int = 0, theta_star=None) -> PredictiveMoments:
        """Joint predictive over the query points for each theta* in ``block``.

        ``query_x``/``query_theta`` are (B, d) or batched (S, B, d).  Returns
        mean (S, B) and covariance (S, B, B).
        """
        if block is None and self.data.n_real:
            block = self.condition(theta_star)
        spec = self.spec
        qx, qt = as_tensor(query_x), as_tensor(query_theta)
        fq = float(fidelity)
        Kqq = cross_kernel(qx, qt, fq, qx, qt, fq, spec)
        mq = mean_function(qt, fq, spec)
        if self.n_sims:
            Ksq = cross_kernel(self.xs, self.ts, 0.0, qx, qt, fq, spec)
            Vq = self._sim_solve(Ksq)
            mq = mq + (Vq.transpose(-1, -2) @ self.a.unsqueeze(-1)).squeeze(-1)
            Kqq = Kqq - Vq.transpose(-1, -2) @ Vq
        if block is None:
            return PredictiveMoments(mq, Kqq)
        S, R = block.theta_star.shape[0], self.data.n_real
        tr = block.theta_star.unsqueeze(-2).expand(S, R, block.theta_star.shape[-1])
        xr = self.xr.expand(S, R, self.xr.shape[-1])
        Krq = cross_kernel(xr, tr, 1.0, qx, qt, fq, spec)
        if self.n_sims:
            Krq = Krq - block.V.transpose(-1, -2) @ Vq
        W = torch.linalg.solve_triangular(block.L, Krq, upper=False)
        mean = mq + (W.transpose(-1, -2) @ block.b.unsqueeze(-1)).squeeze(-1)
        cov = Kqq - W.transpose(-1, -2) @ W
        return PredictiveMoments(mean, cov)


# ---------------------------------------------------------------------------
# hyperparameter fitting


@dataclass(frozen=True)
class HyperPrior:
    """Log-normal on lengthscales and variances, normal on rho."""

    log_mean: float = 0.0
    log_std: float = 1.0
    rho_mean: float = 1.0
    rho_std: float = 0.5

    def log_density(self, params: dict) -> torch.Tensor:
        total = torch.zeros((), dtype=DTYPE)
        for name, value in params.items():
            if name == "rho":
                total = total - 0.5 * ((value - self.rho_mean) / self.rho_std) ** 2
            else:
                total = total - 0.5 * (((value - self.log_mean) / self.log_std) ** 2).sum()
        return total


class FitResult(NamedTuple):
    spec: KernelSpec
    objective: float
    converged: bool


FITTABLE = ("sim_variance", "sim_lengthscales", "err_variance", "err_lengthscales", "rho", "noise_var")


def _unpack(init: KernelSpec, fixed: Sequence[str]):
    params = {}
    finite_masks = {}
    for name in FITTABLE:
        if name in fixed:
            continue
        if name.startswith("err") and not init.has_error_term:
            continue
        value = getattr(init, name)
        if name == "rho":
            params[name] = torch.tensor(float(value), dtype=DTYPE)
        elif name.endswith("lengthscales"):
            v = np.asarray(value, dtype=float)
            mask = np.isfinite(v)
            if not mask.any():
                continue
            finite_masks[name] = (mask, v)
            params[name] = torch.log(as_tensor(v[mask]))
        else:
            if float(value) <= 0:
                continue
            params[name] = torch.log(torch.tensor(float(value), dtype=DTYPE))
    return params, finite_masks


def _pack(init: KernelSpec, params: dict, finite_masks: dict) -> KernelSpec:
    updates = {}
    for name, value in params.items():
        if name == "rho":
            updates[name] = value
        elif name in finite_masks:
            mask, full = finite_masks[name]
            out = as_tensor(full).clone()
            out = out.masked_scatter(torch.as_tensor(mask), torch.exp(value))
            updates[name] = out
        else:
            updates[name] = torch.exp(value)
    return dataclasses.replace(init, nugget=init.nugget, **updates)


def fit_objective(data: CalibrationDataset, spec: KernelSpec, theta_samples,
                  hyperprior: Optional[HyperPrior] = None, params: Optional[dict] = None) -> torch.Tensor:
    """Marginal log likelihood averaged over theta samples plus log hyperprior."""
    mll = marginal_log_likelihood(data, theta_samples, spec)
    obj = mll.mean() if mll.ndim else mll
    if hyperprior is not None and params is not None:
        obj = obj + hyperprior.log_density(params)
    return obj


def fit_hyperparameters(data: CalibrationDataset, init: KernelSpec, theta_samples,
                        hyperprior: Optional[HyperPrior] = HyperPrior(),
                        fixed: Sequence[str] = (), max_iter: int = 60) -> FitResult:
    """MAP estimate of the kernel hyperparameters in log coordinates.

    ``theta_samples`` (S, d_theta) marginalises the unknown calibration
    parameters by averaging the objective.  The returned spec never scores
    below ``init``; on optimiser failure ``init`` comes back with
    ``converged=False``.
    """
    if len(data) == 0:
        raise ValueError("dataset is empty")
    ts = as_tensor(theta_samples)
    params, masks = _unpack(init, fixed)
    if not params:
        return FitResult(init, float("nan"), True)
    p0 = {k: v.clone() for k, v in params.items()}

    def objective(p):
        return fit_objective(data, _pack(init, p, masks), ts, hyperprior, p)

    with torch.no_grad():
        f0 = float(objective(p0))
    leaves = [v.requires_grad_(True) for v in params.values()]
    opt = torch.optim.LBFGS(leaves, lr=1.0, max_iter=max_iter, line_search_fn="strong_wolfe")

    def closure():
        opt.zero_grad()
        loss = -objective(params)
        if not torch.isfinite(loss):
            raise FloatingPointError("non-finite fitting objective")
        loss.backward()
        return loss

    try:
        opt.step(closure)
        with torch.no_grad():
            f1 = float(objective(params))
    except (CovarianceError, FloatingPointError, RuntimeError) as exc:
        log.warning("hyperparameter fit failed (%s); keeping initial values", exc)
        return FitResult(init, f0, False)
    if not math.isfinite(f1) or f1 < f0:
        return FitResult(init, f0, math.isfinite(f1))
    with torch.no_grad():
        fitted = _pack(init, {k: v.detach() for k, v in params.items()}, masks).detached()
    return FitResult(fitted, f1, True)
