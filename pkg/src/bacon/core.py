"""Domain types, calibration priors and the bounded-prior latent transform."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np
import torch

DTYPE = torch.float64

# sigmoid(36) == 1 - 2e-16; beyond this the density is numerically zero
LATENT_CLAMP = 36.0

LOG_2PI = math.log(2.0 * math.pi)


def as_tensor(a, dtype=DTYPE) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a if a.dtype == dtype else a.to(dtype)
    return torch.tensor(np.asarray(a, dtype=np.float64), dtype=dtype)


@dataclass(frozen=True)
class JointInput:
    """A point ``(x, theta, s)`` of the joint design/parameter/fidelity space."""

    x: np.ndarray
    theta: np.ndarray
    s: int = 0

    def __post_init__(self):
        if self.s not in (0, 1):
            raise ValueError(f"fidelity flag must be 0 or 1, got {self.s!r}")
        object.__setattr__(self, "x", np.atleast_1d(np.asarray(self.x, dtype=float)))
        object.__setattr__(self, "theta", np.atleast_1d(np.asarray(self.theta, dtype=float)))


def _as_rows(a, dim: Optional[int] = None) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        return np.zeros((0, dim or 0))
    if a.ndim == 1:
        a = a[:, None] if dim == 1 or dim is None else a[None, :]
    return a


@dataclass(frozen=True)
class CalibrationDataset:
    """Real observations plus the simulations gathered so far.

    Arrays are copied and made read-only; use :meth:`append` to grow the
    simulation block (it returns a new dataset).
    """

    real_designs: np.ndarray
    real_outcomes: np.ndarray
    sim_designs: np.ndarray = field(default=None)
    sim_params: np.ndarray = field(default=None)
    sim_outcomes: np.ndarray = field(default=None)
    dim_theta: Optional[int] = None

    def __post_init__(self):
        xr = _as_rows(self.real_designs)
        yr = np.asarray(self.real_outcomes, dtype=float).reshape(-1)
        dx = xr.shape[1] if xr.shape[0] else None
        if self.sim_designs is None or np.asarray(self.sim_designs).size == 0:
            dth = self.dim_theta
            if dth is None and self.sim_params is not None:
                dth = np.asarray(self.sim_params).shape[-1] if np.asarray(self.sim_params).ndim == 2 else None
            xs = np.zeros((0, dx or 0))
            ts = np.zeros((0, dth or 0))
            ys = np.zeros(0)
        else:
            xs = _as_rows(self.sim_designs, dx)
            ts = _as_rows(self.sim_params, self.dim_theta)
            ys = np.asarray(self.sim_outcomes, dtype=float).reshape(-1)
            dth = ts.shape[1]
            if dx is None:
                dx = xs.shape[1]
            if xr.shape[0] == 0:
                xr = np.zeros((0, dx))
        if self.dim_theta is not None and dth is not None and dth != self.dim_theta:
            raise ValueError("sim_params dimension disagrees with dim_theta")
        if xr.shape[0] != yr.shape[0]:
            raise ValueError("real_designs and real_outcomes differ in length")
        if not (xs.shape[0] == ts.shape[0] == ys.shape[0]):
            raise ValueError("simulation designs, params and outcomes differ in length")
        if xs.shape[0] and xr.shape[0] and xs.shape[1] != xr.shape[1]:
            raise ValueError("simulation and real designs differ in dimension")
        for name, arr in [("real_designs", xr), ("real_outcomes", yr), ("sim_designs", xs),
                          ("sim_params", ts), ("sim_outcomes", ys)]:
            arr = np.array(arr, dtype=float, copy=True)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "dim_theta", dth)

    @property
    def n_real(self) -> int:
        return self.real_outcomes.shape[0]

    @property
    def n_sims(self) -> int:
        return self.sim_outcomes.shape[0]

    def __len__(self) -> int:
        return self.n_real + self.n_sims

    @property
    def dim_x(self) -> int:
        return self.real_designs.shape[1] if self.n_real else self.sim_designs.shape[1]

    def append(self, designs, params, outcomes) -> "CalibrationDataset":
        designs = _as_rows(designs, self.dim_x)
        params = _as_rows(params, self.dim_theta)
        outcomes = np.asarray(outcomes, dtype=float).reshape(-1)
        if self.n_sims:
            designs = np.vstack([self.sim_designs, designs])
            params = np.vstack([self.sim_params, params])
            outcomes = np.concatenate([self.sim_outcomes, outcomes])
        return CalibrationDataset(self.real_designs, self.real_outcomes, designs, params,
                                  outcomes, dim_theta=params.shape[1])

    def head(self, n_sims: int) -> "CalibrationDataset":
        """Dataset truncated to its first ``n_sims`` simulations."""
        return CalibrationDataset(self.real_designs, self.real_outcomes,
                                  self.sim_designs[:n_sims], self.sim_params[:n_sims],
                                  self.sim_outcomes[:n_sims], dim_theta=self.dim_theta)


# ---------------------------------------------------------------------------
# priors


@dataclass(frozen=True)
class Prior:
    kind: Literal["standard-normal", "smooth-uniform"]
    dim: int
    bounds: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("standard-normal", "smooth-uniform"):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if self.dim < 1:
            raise ValueError("prior dimension must be positive")
        if self.kind == "smooth-uniform":
            if self.bounds is None:
                raise ValueError("smooth-uniform prior needs bounds")
            b = np.array(self.bounds, dtype=float).reshape(self.dim, 2)
            if np.any(b[:, 0] >= b[:, 1]):
                raise ValueError("prior bounds need lo < hi in every dimension")
            b.setflags(write=False)
            object.__setattr__(self, "bounds", b)

    @classmethod
    def standard_normal(cls, dim: int) -> "Prior":
        return cls("standard-normal", dim)

    @classmethod
    def smooth_uniform(cls, bounds: Sequence[Sequence[float]]) -> "Prior":
        b = np.asarray(bounds, dtype=float).reshape(-1, 2)
        return cls("smooth-uniform", b.shape[0], b)

    @property
    def bounded(self) -> bool:
        return self.kind == "smooth-uniform"

    def to_theta(self, latent):
        """Map latent coordinates to calibration coordinates (identity when unbounded)."""
        if not self.bounded:
            return latent
        theta, _ = smooth_uniform_transform(latent, self.bounds)
        return theta

    def to_latent(self, theta):
        if not self.bounded:
            return theta
        return smooth_uniform_inverse(theta, self.bounds)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "dim": self.dim}
        if self.bounded:
            d["bounds"] = self.bounds.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Prior":
        return cls(d["kind"], int(d["dim"]), d.get("bounds"))


def prior_sample(prior: Prior, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` i.i.d. calibration vectors, shape ``(n, dim)``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    latent = rng.standard_normal((n, prior.dim))
    if prior.bounded:
        return smooth_uniform_transform(latent, prior.bounds)[0]
    return latent


def _std_normal_logpdf(z):
    return -0.5 * (z * z).sum(-1) - 0.5 * z.shape[-1] * LOG_2PI


def prior_logpdf(prior: Prior, theta, latent: bool = False):
    """Log-density of ``theta`` (batched over leading axes).

    For the smooth-uniform prior, ``latent=True`` interprets ``theta`` as the
    unbounded coordinate and returns the density there (standard normal).
    Points on or outside the bounds get ``-inf``.
    """
    is_torch = isinstance(theta, torch.Tensor)
    th = theta if is_torch else as_tensor(theta)
    if th.shape[-1] != prior.dim:
        raise ValueError(f"expected dimension {prior.dim}, got {th.shape[-1]}")
    if not prior.bounded or latent:
        out = _std_normal_logpdf(th)
    else:
        lo, hi = as_tensor(prior.bounds[:, 0]), as_tensor(prior.bounds[:, 1])
        inside = ((th > lo) & (th < hi)).all(-1)
        u = ((th - lo) / (hi - lo)).clamp(1e-300, 1 - 1e-16)
        zeta = torch.log(u) - torch.log1p(-u)
        log_det = (torch.log(hi - lo) + torch.log(u) + torch.log1p(-u)).sum(-1)
        out = _std_normal_logpdf(zeta) - log_det
        out = torch.where(inside, out, torch.full_like(out, -math.inf))
    if is_torch:
        return out
    return float(out) if out.ndim == 0 else out.numpy()


def smooth_uniform_transform(zeta, bounds):
    """``theta = lo + (hi - lo) * sigmoid(zeta)`` and its log-Jacobian determinant.

    Works on numpy arrays or torch tensors (differentiable), batched over
    leading axes; the log-determinant sums over the last axis.
    """
    b = np.asarray(bounds, dtype=float).reshape(-1, 2)
    if isinstance(zeta, torch.Tensor):
        lo, width = as_tensor(b[:, 0]), as_tensor(b[:, 1] - b[:, 0])
        z = zeta.clamp(-LATENT_CLAMP, LATENT_CLAMP)
        theta = lo + width * torch.sigmoid(z)
        log_det = (torch.log(width) + torch.nn.functional.logsigmoid(z)
                   + torch.nn.functional.logsigmoid(-z)).sum(-1)
        return theta, log_det
    z = np.clip(np.asarray(zeta, dtype=float), -LATENT_CLAMP, LATENT_CLAMP)
    lo, width = b[:, 0], b[:, 1] - b[:, 0]
    sig = 1.0 / (1.0 + np.exp(-z))
    theta = lo + width * sig
    log_det = (np.log(width) - np.logaddexp(0.0, -z) - np.logaddexp(0.0, z)).sum(-1)
    return theta, log_det


def smooth_uniform_inverse(theta, bounds):
    b = np.asarray(bounds, dtype=float).reshape(-1, 2)
    if isinstance(theta, torch.Tensor):
        lo, width = as_tensor(b[:, 0]), as_tensor(b[:, 1] - b[:, 0])
        u = (theta - lo) / width
        return torch.log(u) - torch.log1p(-u)
    u = (np.asarray(theta, dtype=float) - b[:, 0]) / (b[:, 1] - b[:, 0])
    return np.log(u) - np.log1p(-u)


@dataclass(frozen=True)
class Box:
    """Axis-aligned design space ``X`` as a product of intervals."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or np.any(lo >= hi):
            raise ValueError("box needs lower < upper, same shapes")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def unit(cls, dim: int) -> "Box":
        return cls(np.zeros(dim), np.ones(dim))

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.lower + (self.upper - self.lower) * rng.random((n, self.dim))

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lower) & (x <= self.upper), axis=-1)

    def grid(self, per_dim: int) -> np.ndarray:
        """Uniform lattice with ``per_dim`` points per axis (cell centres)."""
        axes = [lo + (hi - lo) * (np.arange(per_dim) + 0.5) / per_dim
                for lo, hi in zip(self.lower, self.upper)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=-1)

    def squash(self, raw: torch.Tensor) -> torch.Tensor:
        """Sigmoid map from unconstrained coordinates onto the box."""
        lo, hi = as_tensor(self.lower), as_tensor(self.upper)
        return lo + (hi - lo) * torch.sigmoid(raw.clamp(-LATENT_CLAMP, LATENT_CLAMP))

    def unsquash(self, x) -> torch.Tensor:
        lo, hi = as_tensor(self.lower), as_tensor(self.upper)
        u = ((as_tensor(x) - lo) / (hi - lo)).clamp(1e-9, 1 - 1e-9)
        return torch.log(u) - torch.log1p(-u)
