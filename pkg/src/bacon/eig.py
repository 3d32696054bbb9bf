"""Variational EIG lower bound and its optimisation.

The optimised quantity is ``E[log q(theta* | batch, y_hat)]`` under the
joint ``p(theta* | D) p(y_hat | theta*, batch, D)``.  Outcomes are drawn by
reparameterisation, ``y_hat = mu + chol(Sigma) eps``, so gradients reach the
batch inputs through the GP predictive.

Coordinates: designs are optimised as logits of the box, batch calibration
inputs and ``theta*`` enter ``q`` in the prior's latent coordinates.  Reported
log-densities are converted back to calibration coordinates.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional

import numpy as np
import torch

from .conditional import ConditionalPosterior, QModelConfig, make_elements
from .core import DTYPE, Box, CalibrationDataset, Prior, as_tensor, prior_sample, smooth_uniform_transform
from .gp import Emulator, KernelSpec, RealBlock, safe_cholesky

log = logging.getLogger(__name__)


class EIGError(RuntimeError):
    """The EIG objective became non-finite during optimisation."""


@dataclass(frozen=True)
class EIGConfig:
    mode: str = "joint"
    batch_size: int = 4
    n_mc: int = 256
    steps: int = 200
    flow_steps: int = 200
    design_steps: int = 100
    lr_model: float = 1e-3
    lr_design: float = 0.05
    restart_period: int = 50
    epsilon: float = 0.1
    crn: bool = True
    q: QModelConfig = field(default_factory=QModelConfig)

    def __post_init__(self):
        if self.mode not in ("joint", "split"):
            raise ValueError(f"unknown optimisation mode {self.mode!r}")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.n_mc < 2:
            raise ValueError("n_mc must be at least 2")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")


@dataclass(frozen=True)
class DesignBatch:
    """``B`` design/calibration-input pairs in natural coordinates."""

    designs: np.ndarray
    params: np.ndarray

    def __post_init__(self):
        x = np.array(self.designs, dtype=float, ndmin=2)
        t = np.array(self.params, dtype=float, ndmin=2)
        if x.shape[0] < 1 or x.shape[0] != t.shape[0]:
            raise ValueError("batch needs B >= 1 matching designs and params")
        object.__setattr__(self, "designs", x)
        object.__setattr__(self, "params", t)

    @property
    def size(self) -> int:
        return self.designs.shape[0]

    def latent_params(self, prior: Prior) -> np.ndarray:
        return np.asarray(prior.to_latent(self.params))


class EIGEstimate(NamedTuple):
    value: float
    std_error: float
    n_mc: int


class OptimResult(NamedTuple):
    batch: DesignBatch
    model: ConditionalPosterior
    trace: List[float]


def _latent_log_jacobian(prior: Prior, latent: torch.Tensor) -> torch.Tensor:
    """``log |d latent / d theta|`` evaluated at ``latent``."""
    if not prior.bounded:
        return torch.zeros(latent.shape[:-1], dtype=DTYPE)
    return -smooth_uniform_transform(latent, prior.bounds)[1]


class EIGContext:
    """Everything the objective needs at one iteration.

    ``theta_pool`` are samples of ``theta*`` (calibration coordinates) from the
    current posterior or its amortised stand-in; their real-data blocks are
    conditioned once and indexed afterwards.
    """

    def __init__(self, data: CalibrationDataset, spec: KernelSpec, prior: Prior, box: Box, theta_pool,
                 emulator: Optional[Emulator] = None):
        self.data, self.spec, self.prior, self.box = data, spec, prior, box
        self.em = emulator if emulator is not None else Emulator(data, spec)
        with torch.no_grad():
            self.pool = as_tensor(theta_pool).reshape(-1, prior.dim)
            if self.pool.shape[0] < 1:
                raise ValueError("posterior samples must be nonempty")
            self.pool_latent = as_tensor(prior.to_latent(self.pool))
            self.pool_jac = _latent_log_jacobian(prior, self.pool_latent)
            self.block = self.em.condition(self.pool) if data.n_real else None

    @property
    def pool_size(self) -> int:
        return self.pool.shape[0]

    def sub_block(self, idx) -> Optional[RealBlock]:
        if self.block is None:
            return None
        return RealBlock(*(f[idx] for f in self.block))

    def predictive(self, x, t, idx):
        """Mean (S, B) and covariance (S, B, B) of simulator outputs at the batch."""
        block = self.sub_block(idx)
        if block is None:
            return self.em.predict(x, t, None)
        return self.em.predict(x, t, block)

    def outcomes(self, x, t, idx, eps):
        mean, cov = self.predictive(x, t, idx)
        B = cov.shape[-1]
        L = safe_cholesky(cov + self.spec.nugget * torch.eye(B, dtype=DTYPE), self.spec.nugget)
        mean = mean.expand(eps.shape)
        return mean + (L @ eps.unsqueeze(-1)).squeeze(-1)

    def log_q(self, q: ConditionalPosterior, x, t_latent, y, idx):
        """``log q(theta*_idx | batch)`` in calibration coordinates, shape (S,)."""
        el = make_elements(x, t_latent, y)
        return q.log_prob(self.pool_latent[idx], el) + self.pool_jac[idx]

    def element_normalization(self):
        """Whitening constants for encoder inputs from the box, prior and data."""
        half = as_tensor((self.box.upper - self.box.lower) / 2)
        ys = np.concatenate([self.data.sim_outcomes, self.data.real_outcomes])
        y_loc = float(ys.mean()) if ys.size else 0.0
        y_scale = float(ys.std()) if ys.size > 1 and ys.std() > 0 else 1.0
        loc = torch.cat([as_tensor(self.box.center), torch.zeros(self.prior.dim, dtype=DTYPE),
                         torch.tensor([y_loc], dtype=DTYPE)])
        scale = torch.cat([half, torch.ones(self.prior.dim, dtype=DTYPE), torch.tensor([y_scale], dtype=DTYPE)])
        return loc, scale

    def draw(self, n: int, B: int, rng: np.random.Generator):
        idx = torch.as_tensor(rng.integers(0, self.pool_size, n))
        eps = torch.as_tensor(rng.standard_normal((n, B)), dtype=DTYPE)
        return idx, eps


def init_model(ctx: EIGContext, config: QModelConfig) -> ConditionalPosterior:
    q = ConditionalPosterior(ctx.data.dim_x, ctx.prior.dim, config)
    prepare_model(q, ctx)
    return q


def prepare_model(q: ConditionalPosterior, ctx: EIGContext) -> None:
    """Reset the fixed standardisation layers to the current posterior pool."""
    loc = ctx.pool_latent.mean(0)
    scale = ctx.pool_latent.std(0) if ctx.pool_size > 1 else torch.ones(ctx.prior.dim, dtype=DTYPE)
    q.set_standardization(loc, scale.clamp_min(1e-3))
    q.set_element_normalization(*ctx.element_normalization())


def sample_mixture_params(ctx: EIGContext, n: int, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    """``n`` calibration inputs from ``(1 - epsilon) p_hat + epsilon p``."""
    from_prior = rng.random(n) < epsilon
    out = ctx.pool.numpy()[rng.integers(0, ctx.pool_size, n)].copy()
    k = int(from_prior.sum())
    if k:
        out[from_prior] = prior_sample(ctx.prior, k, rng)
    return out


def random_batch(ctx: EIGContext, B: int, epsilon: float, rng: np.random.Generator) -> DesignBatch:
    """Uniform designs with mixture calibration inputs."""
    params = sample_mixture_params(ctx, B, epsilon, rng)
    return DesignBatch(ctx.box.sample(B, rng), params)


def sample_joint_outcomes(batch: DesignBatch, posterior_samples, data: CalibrationDataset, spec: KernelSpec,
                          rng: np.random.Generator, n: Optional[int] = None, eps=None):
    """Draw ``(theta*_i, y_hat_i)`` pairs; each ``y_hat_i`` is a joint draw over the batch.

    ``eps`` (n, B) overrides the standard-normal draws, e.g. for antithetic pairs.
    """
    prior = Prior.standard_normal(batch.params.shape[1])
    ctx = EIGContext(data, spec, prior, Box.unit(data.dim_x), posterior_samples)
    n = n or ctx.pool_size
    idx, e = ctx.draw(n, batch.size, rng)
    eps = e if eps is None else as_tensor(eps).reshape(n, batch.size)
    with torch.no_grad():
        y = ctx.outcomes(as_tensor(batch.designs), as_tensor(batch.params), idx, eps)
    return ctx.pool[idx].numpy(), y.numpy()


def _objective_terms(ctx, q, x, t_latent, idx, eps):
    t = as_tensor(ctx.prior.to_theta(t_latent))
    y = ctx.outcomes(x, t, idx, eps)
    return ctx.log_q(q, x, t_latent, y, idx)


def _estimate(terms: torch.Tensor) -> EIGEstimate:
    v = terms.detach()
    n = v.shape[0]
    return EIGEstimate(float(v.mean()), float(v.std(unbiased=True) / math.sqrt(n)) if n > 1 else 0.0, n)


def eig_objective(batch: DesignBatch, q_model: ConditionalPosterior, ctx: EIGContext, n_mc: int,
                  rng: np.random.Generator) -> EIGEstimate:
    """Monte Carlo estimate of ``E[log q(theta* | batch, y_hat)]``."""
    if n_mc < 2:
        raise ValueError("n_mc must be at least 2")
    idx, eps = ctx.draw(n_mc, batch.size, rng)
    with torch.no_grad():
        terms = _objective_terms(ctx, q_model, as_tensor(batch.designs), as_tensor(batch.latent_params(ctx.prior)),
                                 idx, eps)
    return _estimate(terms)


def amortised_context(q_prev: ConditionalPosterior, prev_elements: torch.Tensor, data: CalibrationDataset,
                      spec: KernelSpec, prior: Prior, box: Box, n: int,
                      gen: Optional[torch.Generator] = None) -> EIGContext:
    """Context whose ``theta*`` pool is drawn from ``q_prev`` given the last observed batch."""
    with torch.no_grad():
        latent = q_prev.sample(as_tensor(prev_elements), n, gen).reshape(n, prior.dim)
        theta = as_tensor(prior.to_theta(latent))
    return EIGContext(data, spec, prior, box, theta)


def amortised_objective(batch: DesignBatch, q_model: ConditionalPosterior, q_prev: ConditionalPosterior,
                        prev_elements, data: CalibrationDataset, spec: KernelSpec, prior: Prior, box: Box,
                        n_mc: int, rng: np.random.Generator) -> EIGEstimate:
    """:func:`eig_objective` with ``theta*`` drawn from the previous conditional model."""
    gen = torch.Generator().manual_seed(int(rng.integers(2 ** 62)))
    ctx = amortised_context(q_prev, prev_elements, data, spec, prior, box, n_mc, gen)
    return eig_objective(batch, q_model, ctx, n_mc, rng)


# ---------------------------------------------------------------------------
# optimisation


def _design_leaves(ctx: EIGContext, batch: DesignBatch):
    x_raw = ctx.box.unsquash(batch.designs).clone().requires_grad_(True)
    t_lat = as_tensor(batch.latent_params(ctx.prior)).clone().requires_grad_(True)
    return x_raw, t_lat


def _to_batch(ctx: EIGContext, x_raw, t_lat) -> DesignBatch:
    with torch.no_grad():
        return DesignBatch(ctx.box.squash(x_raw).numpy(), np.asarray(ctx.prior.to_theta(t_lat.detach())))


def _check_finite(value: torch.Tensor, step: int, what: str):
    if not torch.isfinite(value):
        raise EIGError(f"non-finite {what} objective at step {step}")


def optimize_joint(ctx: EIGContext, config: EIGConfig, rng: np.random.Generator,
                   q_model: Optional[ConditionalPosterior] = None,
                   init: Optional[DesignBatch] = None) -> OptimResult:
    """Gradient ascent on the objective over batch inputs and ``q`` together."""
    q = q_model if q_model is not None else init_model(ctx, config.q)
    batch = init if init is not None else random_batch(ctx, config.batch_size, config.epsilon, rng)
    if config.steps == 0:
        return OptimResult(batch, q, [])
    x_raw, t_lat = _design_leaves(ctx, batch)
    opt = torch.optim.Adam([{"params": list(q.parameters()), "lr": config.lr_model},
                            {"params": [x_raw, t_lat], "lr": config.lr_design}])
    sched = torch.optim.lr_scheduler.CosineAnnealingWarmRestarts(opt, T_0=config.restart_period)
    trace = []
    idx = eps = None
    for step in range(config.steps):
        if idx is None or not config.crn or step % config.restart_period == 0:
            idx, eps = ctx.draw(config.n_mc, batch.size, rng)
        x = ctx.box.squash(x_raw)
        terms = _objective_terms(ctx, q, x, t_lat, idx, eps)
        obj = terms.mean()
        _check_finite(obj, step, "joint")
        opt.zero_grad()
        (-obj).backward()
        opt.step()
        sched.step()
        trace.append(float(obj.detach()))
    return OptimResult(_to_batch(ctx, x_raw, t_lat), q, trace)


def train_flow_phase(ctx: EIGContext, config: EIGConfig, rng: np.random.Generator,
                     q_model: Optional[ConditionalPosterior] = None):
    """Fit ``q`` on random candidate batches; only the model parameters move.

    Returns the model and the per-step objective trace.
    """
    q = q_model if q_model is not None else init_model(ctx, config.q)
    opt = torch.optim.Adam(q.parameters(), lr=config.lr_model)
    sched = torch.optim.lr_scheduler.CosineAnnealingWarmRestarts(opt, T_0=config.restart_period)
    B = config.batch_size
    trace = []
    for step in range(config.flow_steps):
        cand = random_batch(ctx, B, config.epsilon, rng)
        idx, eps = ctx.draw(config.n_mc, B, rng)
        x = as_tensor(cand.designs)
        t = as_tensor(cand.params)
        with torch.no_grad():
            y = ctx.outcomes(x, t, idx, eps)
        obj = ctx.log_q(q, x, as_tensor(ctx.prior.to_latent(t)), y, idx).mean()
        _check_finite(obj, step, "flow-training")
        opt.zero_grad()
        (-obj).backward()
        opt.step()
        sched.step()
        trace.append(float(obj.detach()))
    return q, trace


def optimize_designs_phase(q_model: ConditionalPosterior, ctx: EIGContext, config: EIGConfig,
                           rng: np.random.Generator, init: Optional[DesignBatch] = None):
    """Ascend the objective over the batch inputs with ``q`` frozen.

    Returns the final batch and the per-step objective trace.
    """
    batch = init if init is not None else random_batch(ctx, config.batch_size, config.epsilon, rng)
    if config.design_steps == 0:
        return batch, []
    x_raw, t_lat = _design_leaves(ctx, batch)
    flags = [p.requires_grad for p in q_model.parameters()]
    for p in q_model.parameters():
        p.requires_grad_(False)
    opt = torch.optim.Adam([x_raw, t_lat], lr=config.lr_design)
    sched = torch.optim.lr_scheduler.CosineAnnealingWarmRestarts(opt, T_0=config.restart_period)
    trace = []
    idx = eps = None
    try:
        for step in range(config.design_steps):
            if idx is None or not config.crn or step % config.restart_period == 0:
                idx, eps = ctx.draw(config.n_mc, batch.size, rng)
            obj = _objective_terms(ctx, q_model, ctx.box.squash(x_raw), t_lat, idx, eps).mean()
            _check_finite(obj, step, "design")
            opt.zero_grad()
            (-obj).backward()
            opt.step()
            sched.step()
            trace.append(float(obj.detach()))
    finally:
        for p, f in zip(q_model.parameters(), flags):
            p.requires_grad_(f)
    return _to_batch(ctx, x_raw, t_lat), trace


def optimize(ctx: EIGContext, config: EIGConfig, rng: np.random.Generator,
             q_model: Optional[ConditionalPosterior] = None) -> OptimResult:
    """Dispatch on ``config.mode``; ``q_model`` is copied, never mutated."""
    q = copy.deepcopy(q_model) if q_model is not None else init_model(ctx, config.q)
    prepare_model(q, ctx)
    if config.mode == "joint":
        return optimize_joint(ctx, config, rng, q)
    q, trace = train_flow_phase(ctx, config, rng, q)
    batch, trace2 = optimize_designs_phase(q, ctx, config, rng)
    return OptimResult(batch, q, trace + trace2)


def design_objective(ctx: EIGContext, q: ConditionalPosterior, x_raw, t_lat, idx, eps) -> torch.Tensor:
    """Differentiable objective for fixed draws; exposed for gradient checks."""
    return _objective_terms(ctx, q, ctx.box.squash(x_raw), t_lat, idx, eps).mean()
