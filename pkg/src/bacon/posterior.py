"""Posterior over the true calibration parameters.

The target is ``log p(theta*) + log p(y_R | simulations, theta*)`` where the
second term comes from the GP conditioned on the simulation block.  Sampling
uses adaptive random-walk Metropolis; for bounded priors the chain moves in
the unbounded latent coordinates.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from .core import DTYPE, CalibrationDataset, Prior, as_tensor, prior_logpdf
from .gp import Emulator, KernelSpec

log = logging.getLogger(__name__)

TARGET_ACCEPT = 0.234


class SamplingError(RuntimeError):
    """The chain failed its post-adaptation diagnostics."""


@dataclass(frozen=True)
class PosteriorEstimate:
    samples: np.ndarray
    map_point: np.ndarray
    acceptance_rate: float
    ess: np.ndarray
    log_density: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        s = np.array(self.samples, dtype=float, ndmin=2)
        if s.shape[0] == 0:
            raise ValueError("posterior needs at least one sample")
        mp = np.asarray(self.map_point, dtype=float).reshape(-1)
        if mp.shape[0] != s.shape[1]:
            raise ValueError("map point dimension does not match samples")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "map_point", mp)
        object.__setattr__(self, "ess", np.asarray(self.ess, dtype=float).reshape(-1))
        if self.log_density is not None:
            object.__setattr__(self, "log_density", np.asarray(self.log_density, dtype=float).reshape(-1))

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def subsample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """``n`` samples drawn without replacement (all of them if fewer)."""
        if n >= self.n_samples:
            return self.samples.copy()
        idx = np.sort(rng.choice(self.n_samples, size=n, replace=False))
        return self.samples[idx]

    @classmethod
    def from_samples(cls, samples) -> "PosteriorEstimate":
        """Wrap raw draws (e.g. prior samples) without sampler diagnostics."""
        s = np.array(samples, dtype=float, ndmin=2)
        return cls(s, s.mean(0), float("nan"), np.full(s.shape[1], float(s.shape[0])))


def unnormalized_log_posterior(theta_star, data: CalibrationDataset, spec: KernelSpec, prior: Prior,
                               emulator: Optional[Emulator] = None):
    """Prior log-density plus the real-data log-likelihood given the simulations.

    ``theta_star`` is (d,) or (S, d).  With no real data the likelihood term
    is empty.  Numpy input gives numpy/float output.
    """
    is_torch = isinstance(theta_star, torch.Tensor)
    th = theta_star if is_torch else as_tensor(theta_star)
    lp = prior_logpdf(prior, th)
    if data.n_real:
        em = emulator if emulator is not None else Emulator(data, spec)
        finite = torch.isfinite(lp)
        ll = torch.full_like(lp, -math.inf)
        if finite.any():
            flat = th.reshape(-1, th.shape[-1])[finite.reshape(-1)]
            ll_f = em.real_log_likelihood(flat)
            ll = ll.reshape(-1).masked_scatter(finite.reshape(-1), ll_f).reshape(lp.shape)
        lp = lp + ll
    if is_torch:
        return lp
    return float(lp) if lp.ndim == 0 else lp.numpy()


def effective_sample_size(chains: np.ndarray) -> np.ndarray:
    """Per-dimension ESS from (C, n, d) chains via Geyer's initial positive sequence."""
    chains = np.asarray(chains, dtype=float)
    if chains.ndim == 2:
        chains = chains[None]
    C, n, d = chains.shape
    out = np.zeros(d)
    for j in range(d):
        total = 0.0
        for c in range(C):
            x = chains[c, :, j] - chains[c, :, j].mean()
            var = x @ x / n
            if var <= 0 or n < 4:
                total += n
                continue
            f = np.fft.rfft(x, 2 * n)
            acf = np.fft.irfft(f * np.conj(f))[:n] / (n * var)
            tau = -1.0
            for k in range(0, n - 1, 2):
                pair = acf[k] + acf[k + 1]
                if pair <= 0:
                    break
                tau += 2 * pair
            total += n / max(tau, 1e-12)
        out[j] = total
    return out


def adaptive_metropolis(log_target: Callable[[np.ndarray], np.ndarray], init: np.ndarray, n_samples: int,
                        rng: np.random.Generator, burn_in: int = 1000,
                        target_accept: float = TARGET_ACCEPT):
    """Random-walk Metropolis over a batch of independent chains.

    ``log_target`` maps (C, d) to (C,).  During burn-in each chain adapts a
    global step factor towards ``target_accept`` (Robbins-Monro on its log)
    and per-dimension scales from the running chain variance.  Returns
    retained draws (C, n, d), their log densities (C, n) and the retained
    acceptance rate.
    """
    z = np.array(init, dtype=float, ndmin=2)
    C, d = z.shape
    lp = np.asarray(log_target(z), dtype=float).reshape(C)
    if not np.all(np.isfinite(lp)):
        raise SamplingError("initial state has zero posterior density")
    log_lam = np.full(C, math.log(2.38 / math.sqrt(d)))
    mean = z.copy()
    m2 = np.zeros((C, d))
    scale = np.ones((C, d))
    draws = np.empty((C, n_samples, d))
    dens = np.empty((C, n_samples))
    accepted = 0
    for t in range(burn_in + n_samples):
        prop = z + np.exp(log_lam)[:, None] * scale * rng.standard_normal((C, d))
        lp_prop = np.asarray(log_target(prop), dtype=float).reshape(C)
        log_u = np.log(rng.random(C))
        acc = log_u < lp_prop - lp
        z = np.where(acc[:, None], prop, z)
        lp = np.where(acc, lp_prop, lp)
        if t < burn_in:
            log_lam += (t + 1) ** -0.6 * (acc.astype(float) - target_accept)
            k = t + 2
            delta = z - mean
            mean += delta / k
            m2 += delta * (z - mean)
            if t >= min(100, burn_in // 2):
                scale = np.sqrt(m2 / (k - 1) + 1e-12)
        else:
            i = t - burn_in
            draws[:, i] = z
            dens[:, i] = lp
            accepted += int(acc.sum())
    return draws, dens, accepted / (C * n_samples)


def mcmc_sample(data: CalibrationDataset, spec: KernelSpec, prior: Prior, n_samples: int,
                rng: np.random.Generator, burn_in: int = 1000, n_chains: int = 1,
                init: Optional[np.ndarray] = None, min_accept: float = 0.01) -> PosteriorEstimate:
    """Draw ``n_samples`` retained samples of theta* after ``burn_in`` steps per chain.

    With ``n_chains > 1`` the chains run as one vectorised batch and the
    retained samples are split evenly between them.
    """
    if n_samples < 100:
        raise ValueError("n_samples must be at least 100")
    if n_chains < 1 or n_samples % n_chains:
        raise ValueError("n_chains must divide n_samples")
    em = Emulator(data, spec) if data.n_real else None

    def target(z):
        zt = as_tensor(z)
        lpl = prior_logpdf(prior, zt, latent=True)
        if em is not None:
            lpl = lpl + em.real_log_likelihood(as_tensor(prior.to_theta(zt)))
        return lpl.numpy()

    if init is None:
        z0 = rng.standard_normal((n_chains, prior.dim)) * 0.1
    else:
        z0 = np.broadcast_to(np.asarray(prior.to_latent(np.asarray(init, float)), float),
                              (n_chains, prior.dim)).copy()
    with torch.no_grad():
        draws, dens, rate = adaptive_metropolis(target, z0, n_samples // n_chains, rng, burn_in)
    if rate < min_accept:
        raise SamplingError(f"acceptance rate {rate:.4f} below {min_accept} after adaptation")
    ess = effective_sample_size(draws)
    latent = draws.reshape(-1, prior.dim)
    samples = np.asarray(prior.to_theta(latent))
    with torch.no_grad():
        logd = unnormalized_log_posterior(samples, data, spec, prior, em)
    best = int(np.argmax(logd))
    return PosteriorEstimate(samples, samples[best], rate, ess, logd)


def coordinate_search(f: Callable[[np.ndarray], float], x0: np.ndarray, step, tol: float = 1e-7,
                      max_evals: int = 20_000) -> np.ndarray:
    """Maximise ``f`` by compass search: try +-step on each axis, halve on failure."""
    x = np.array(x0, dtype=float)
    fx = f(x)
    h = np.broadcast_to(np.asarray(step, float), x.shape).copy()
    evals = 1
    while np.max(h) > tol and evals < max_evals:
        improved = False
        for j in range(x.size):
            for sign in (1.0, -1.0):
                y = x.copy()
                y[j] += sign * h[j]
                fy = f(y)
                evals += 1
                if fy > fx:
                    x, fx, improved = y, fy, True
                    break
        if not improved:
            h *= 0.5
    return x


def map_estimate(posterior: PosteriorEstimate, data: Optional[CalibrationDataset] = None,
                 spec: Optional[KernelSpec] = None, prior: Optional[Prior] = None,
                 log_target: Optional[Callable[[np.ndarray], float]] = None, tol: float = 1e-7) -> np.ndarray:
    """Refine the best posterior sample into a local mode.

    Uses ``log_target`` when given, otherwise the unnormalised posterior of
    ``(data, spec, prior)``.  Ties between samples go to the lowest index.
    """
    cached = log_target is None and posterior.log_density is not None
    if log_target is None:
        em = Emulator(data, spec) if data.n_real else None

        def log_target(t):
            with torch.no_grad():
                return float(unnormalized_log_posterior(np.asarray(t), data, spec, prior, em))
    samples = posterior.samples
    if cached:
        vals = posterior.log_density
    else:
        vals = np.array([log_target(s) for s in samples])
    start = samples[int(np.argmax(vals))]
    spread = samples.std(0) if samples.shape[0] > 1 else np.zeros(samples.shape[1])
    step = np.where(spread > 0, spread, 0.1)
    return coordinate_search(log_target, start, step, tol=tol)
