"""Competing acquisition strategies: random, IMSPE and D-optimal.

IMSPE and D-optimal work on a finite candidate set of simulation inputs
``(x, theta)`` that doubles as the integration grid.  Batches are built
greedily; each pick is added to the data as a fantasy point before the next,
which only changes variances (GP variances ignore outcomes).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .core import DTYPE, Box, CalibrationDataset, Prior, as_tensor, prior_sample
from .eig import DesignBatch
from .gp import KernelSpec, cross_kernel, prior_cov_matrix, safe_cholesky, training_inputs

CHUNK = 512


@dataclass(frozen=True)
class CandidateGrid:
    """Candidate simulation inputs: rows of ``designs`` paired with rows of ``params``.

    Built as the product of a design lattice and a prior pool, subsampled
    to ``max_points`` when the product is larger.
    """

    designs: np.ndarray
    params: np.ndarray

    def __post_init__(self):
        x = np.array(self.designs, dtype=float, ndmin=2)
        t = np.array(self.params, dtype=float, ndmin=2)
        if x.shape[0] == 0 or x.shape[0] != t.shape[0]:
            raise ValueError("candidate grid must be nonempty with aligned rows")
        object.__setattr__(self, "designs", x)
        object.__setattr__(self, "params", t)

    @classmethod
    def build(cls, box: Box, prior: Prior, rng: np.random.Generator, per_dim: Optional[int] = None,
              n_params: int = 256, max_points: int = 2048) -> "CandidateGrid":
        per_dim = per_dim or (16 if box.dim <= 2 else 4)
        xs = box.grid(per_dim)
        ts = prior_sample(prior, n_params, rng)
        gi, pi = np.meshgrid(np.arange(len(xs)), np.arange(len(ts)), indexing="ij")
        gi, pi = gi.reshape(-1), pi.reshape(-1)
        if gi.size > max_points:
            keep = np.sort(rng.choice(gi.size, max_points, replace=False))
            gi, pi = gi[keep], pi[keep]
        return cls(xs[gi], ts[pi])

    def __len__(self) -> int:
        return self.designs.shape[0]

    def batch(self, idx) -> DesignBatch:
        idx = np.asarray(idx, dtype=int)
        return DesignBatch(self.designs[idx], self.params[idx])


def random_select(B: int, box: Box, prior: Prior, rng: np.random.Generator) -> DesignBatch:
    """Uniform designs over the box and calibration inputs from the prior."""
    if B < 1:
        raise ValueError("B must be at least 1")
    return DesignBatch(box.sample(B, rng), prior_sample(prior, B, rng))


class _FixedPosterior:
    """Simulator-fidelity posterior covariance with ``theta*`` held fixed."""

    def __init__(self, data: CalibrationDataset, spec: KernelSpec, theta_star):
        self.spec = spec
        self.ts = as_tensor(theta_star).reshape(-1)
        self.n = len(data)
        if self.n:
            self.inp = training_inputs(data, self.ts)
            K = prior_cov_matrix(self.inp, self.ts, spec)
            self.L = safe_cholesky(K, spec.nugget)

    def _V(self, x, t):
        K = cross_kernel(self.inp.x, self.inp.theta, self.inp.s, x, t, 0.0, self.spec)
        return torch.linalg.solve_triangular(self.L, K, upper=False)

    def variance(self, x, t) -> torch.Tensor:
        x, t = as_tensor(x), as_tensor(t)
        out = torch.diagonal(cross_kernel(x[:, None], t[:, None], 0.0, x[:, None], t[:, None], 0.0,
                                          self.spec), dim1=-2, dim2=-1)[:, 0]
        if self.n:
            out = out - torch.cat([(self._V(x[i:i + CHUNK], t[i:i + CHUNK]) ** 2).sum(0)
                                   for i in range(0, x.shape[0], CHUNK)])
        return out.clamp_min(0.0)

    def cross(self, xa, ta, xb, tb) -> torch.Tensor:
        K = cross_kernel(xa, ta, 0.0, xb, tb, 0.0, self.spec)
        if self.n:
            K = K - self._V(xa, ta).T @ self._V(xb, tb)
        return K


def _argmin_first(values: np.ndarray, rtol: float = 1e-10) -> int:
    """Lowest index whose value is within round-off of the minimum."""
    best = values.min()
    return int(np.flatnonzero(values <= best + rtol * max(1.0, abs(best)))[0])


def _fantasy(data: CalibrationDataset, x, t) -> CalibrationDataset:
    return data.append(np.atleast_2d(x), np.atleast_2d(t), np.zeros(1))


def integrated_variance(theta_map, data: CalibrationDataset, spec: KernelSpec, grid: CandidateGrid) -> float:
    """Grid sum of the current simulator-fidelity predictive variance."""
    with torch.no_grad():
        return float(_FixedPosterior(data, spec, theta_map).variance(grid.designs, grid.params).sum())


def _imspe_all(post: _FixedPosterior, grid: CandidateGrid, cand_x, cand_t) -> np.ndarray:
    zx, zt = as_tensor(grid.designs), as_tensor(grid.params)
    cx, ct = as_tensor(cand_x), as_tensor(cand_t)
    total = post.variance(zx, zt).sum()
    var_c = post.variance(cx, ct) + post.spec.nugget
    reduction = torch.zeros(cx.shape[0], dtype=DTYPE)
    for i in range(0, zx.shape[0], CHUNK):
        k = post.cross(zx[i:i + CHUNK], zt[i:i + CHUNK], cx, ct)
        reduction = reduction + (k * k).sum(0)
    return (total - reduction / var_c).numpy()


def imspe_value(candidate, theta_map, data: CalibrationDataset, spec: KernelSpec, grid: CandidateGrid) -> float:
    """Grid sum of predictive variance after adding ``candidate = (x, theta)`` as a simulation."""
    x, t = candidate
    with torch.no_grad():
        post = _FixedPosterior(data, spec, theta_map)
        return float(_imspe_all(post, grid, np.atleast_2d(x), np.atleast_2d(t))[0])


def imspe_pick(theta_map, data: CalibrationDataset, spec: KernelSpec, grid: CandidateGrid) -> int:
    with torch.no_grad():
        post = _FixedPosterior(data, spec, theta_map)
        return _argmin_first(_imspe_all(post, grid, grid.designs, grid.params))


def d_optimal_pick(theta_map, data: CalibrationDataset, spec: KernelSpec, grid: CandidateGrid) -> int:
    with torch.no_grad():
        var = _FixedPosterior(data, spec, theta_map).variance(grid.designs, grid.params).numpy()
    return _argmin_first(-var)


def _greedy(pick, B: int, theta_map, data: CalibrationDataset, spec: KernelSpec, grid: CandidateGrid) -> DesignBatch:
    if B < 1:
        raise ValueError("B must be at least 1")
    chosen = []
    for _ in range(B):
        i = pick(theta_map, data, spec, grid)
        chosen.append(i)
        data = _fantasy(data, grid.designs[i], grid.params[i])
    return grid.batch(chosen)


def imspe_select(B: int, theta_map, data: CalibrationDataset, spec: KernelSpec, grid: CandidateGrid) -> DesignBatch:
    """Greedy IMSPE minimisers over the grid with fantasy updates between picks."""
    if len(grid) <= B:
        raise ValueError("grid must be larger than the batch")
    return _greedy(imspe_pick, B, theta_map, data, spec, grid)


def d_optimal_select(B: int, theta_map, data: CalibrationDataset, spec: KernelSpec,
                     grid: CandidateGrid) -> DesignBatch:
    """Greedy maximisers of predictive variance (equivalently entropy) over the grid."""
    return _greedy(d_optimal_pick, B, theta_map, data, spec, grid)

