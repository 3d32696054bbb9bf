"""MAP error, predictive RMSE and nearest-neighbour divergence estimates."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional

import numpy as np
import torch
from scipy.spatial import cKDTree
from scipy.special import digamma, gammaln

from .core import CalibrationDataset, as_tensor
from .gp import Emulator, KernelSpec

HEADER = ("iteration", "map_error", "rmse", "kl_pt_p0", "kl_pt_pstar", "wall_time")
MIN_DIST = 1e-12


@dataclass(frozen=True)
class MetricRecord:
    iteration: int
    map_error: float
    rmse: float
    kl_pt_p0: Optional[float] = None
    kl_pt_pstar: Optional[float] = None
    wall_time: float = 0.0

    def __post_init__(self):
        if self.iteration < 0:
            raise ValueError("iteration must be non-negative")
        if not self.rmse >= 0:
            raise ValueError("rmse must be non-negative")

    def row(self) -> List[str]:
        return ["" if v is None else repr(v) for v in (getattr(self, f) for f in HEADER)]

    @classmethod
    def from_row(cls, row: dict) -> "MetricRecord":
        def opt(v):
            return None if v == "" else float(v)
        return cls(int(row["iteration"]), float(row["map_error"]), float(row["rmse"]), opt(row["kl_pt_p0"]),
                   opt(row["kl_pt_pstar"]), float(row["wall_time"]))


def write_table(records: Iterable[MetricRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HEADER)
        for r in records:
            w.writerow(r.row())


def read_table(path) -> List[MetricRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != HEADER:
            raise ValueError(f"unexpected metric header {reader.fieldnames}")
        return [MetricRecord.from_row(r) for r in reader]


def map_error(theta_map, theta_true) -> float:
    a, b = np.asarray(theta_map, float), np.asarray(theta_true, float)
    if a.shape != b.shape:
        raise ValueError("dimension mismatch")
    return float(np.linalg.norm(a - b))


def expected_prediction(posterior_samples, data: CalibrationDataset, spec: KernelSpec, test_designs,
                        emulator: Optional[Emulator] = None) -> np.ndarray:
    """Real-process predictive mean at ``test_designs`` averaged over ``theta*`` samples."""
    ts = as_tensor(posterior_samples).reshape(-1, data.dim_theta)
    if ts.shape[0] == 0:
        raise ValueError("posterior samples must be nonempty")
    em = emulator or Emulator(data, spec)
    xq = as_tensor(test_designs)
    S, N = ts.shape[0], xq.shape[0]
    with torch.no_grad():
        block = em.condition(ts) if data.n_real else None
        tq = ts.unsqueeze(-2).expand(S, N, ts.shape[-1])
        mean = em.predict(xq.expand(S, N, xq.shape[-1]), tq, block, fidelity=1).mean
    return mean.reshape(S, N).mean(0).numpy()


def rmse(posterior_samples, data: CalibrationDataset, spec: KernelSpec, test_designs, test_outcomes,
         emulator: Optional[Emulator] = None) -> float:
    """Root mean square error of the posterior-averaged real-process prediction."""
    y = np.asarray(test_outcomes, float).reshape(-1)
    pred = expected_prediction(posterior_samples, data, spec, test_designs, emulator)
    if pred.shape != y.shape:
        raise ValueError("test designs and outcomes are misaligned")
    return float(np.sqrt(np.mean((pred - y) ** 2)))


def _as_samples(a) -> np.ndarray:
    a = np.asarray(a, float)
    return a[:, None] if a.ndim == 1 else a


def _kth_distance(tree: cKDTree, pts: np.ndarray, k: int) -> np.ndarray:
    d, _ = tree.query(pts, k=[k])
    return np.maximum(d[:, 0], MIN_DIST)


def knn_kl_estimate(samples_p, samples_q, k: int = 1) -> float:
    """Nearest-neighbour estimate of ``KL(p || q)`` from samples of each.

    ``(d / n) sum_i log(nu_k(i) / rho_k(i)) + log(m / (n - 1))`` where
    ``rho_k`` is the k-th neighbour distance within ``p`` (excluding the
    point itself) and ``nu_k`` the k-th neighbour distance into ``q``.
    """
    p, q = _as_samples(samples_p), _as_samples(samples_q)
    n, d = p.shape
    m = q.shape[0]
    if q.shape[1] != d:
        raise ValueError("sample dimensions differ")
    if n < k + 1 or m < k + 1:
        raise ValueError("need at least k + 1 samples in each set")
    rho = _kth_distance(cKDTree(p), p, k + 1)
    nu = _kth_distance(cKDTree(q), p, k)
    return float(d * np.mean(np.log(nu / rho)) + math.log(m / (n - 1)))


def knn_entropy(samples, k: int = 1) -> float:
    """Nearest-neighbour differential entropy estimate (nats)."""
    x = _as_samples(samples)
    n, d = x.shape
    if n < k + 1:
        raise ValueError("need at least k + 1 samples")
    rho = _kth_distance(cKDTree(x), x, k + 1)
    log_ball = 0.5 * d * math.log(math.pi) - gammaln(0.5 * d + 1)
    return float(digamma(n) - digamma(k) + log_ball + d * np.mean(np.log(rho)))
