"""Benchmark simulators and a client for external black-box simulators.

Every simulator offers ``simulate(designs, params)`` for the simulator
``h(x, theta)`` and ``observe_real(designs, rng)`` for noisy draws of the
real process at its true calibration parameters ``theta_true``.
"""
from __future__ import annotations

import json
import queue
import subprocess
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np
import torch

from .core import DTYPE, Box, Prior, as_tensor, prior_sample
from .eig import DesignBatch
from .gp import KernelSpec, cross_kernel, safe_cholesky


class SimulatorError(RuntimeError):
    """A simulator could not produce an outcome."""


class ProtocolError(SimulatorError):
    """A child process answered with a malformed record."""


def _rows(a, dim: int) -> np.ndarray:
    return np.asarray(a, dtype=float).reshape(-1, dim)


@dataclass(frozen=True)
class SyntheticGPSimulator:
    """Frozen approximate GP draw ``f(z) = k(z, Z) w`` over ``z = (x, theta, s)``."""

    pseudo_x: np.ndarray
    pseudo_theta: np.ndarray
    pseudo_s: np.ndarray
    weights: np.ndarray
    spec: KernelSpec
    theta_true: np.ndarray
    noise_sd: float = 0.5

    @property
    def dim_x(self) -> int:
        return self.pseudo_x.shape[1]

    @property
    def dim_theta(self) -> int:
        return self.pseudo_theta.shape[1]

    def latent(self, designs, params, fidelity) -> np.ndarray:
        x, t = _rows(designs, self.dim_x), _rows(params, self.dim_theta)
        s = as_tensor(np.broadcast_to(np.asarray(fidelity, float), (x.shape[0],)))
        with torch.no_grad():
            K = cross_kernel(as_tensor(x), as_tensor(t), s, as_tensor(self.pseudo_x), as_tensor(self.pseudo_theta),
                             as_tensor(self.pseudo_s), self.spec)
            return (K @ as_tensor(self.weights)).numpy()

    def simulate(self, designs, params) -> np.ndarray:
        return self.latent(designs, params, 0.0)

    def observe_real(self, designs, rng: np.random.Generator) -> np.ndarray:
        x = _rows(designs, self.dim_x)
        t = np.broadcast_to(self.theta_true, (x.shape[0], self.dim_theta))
        return self.latent(x, t, 1.0) + self.noise_sd * rng.standard_normal(x.shape[0])


def sample_gp_simulator(M: int, box: Box, prior: Prior, spec: KernelSpec, rng: np.random.Generator,
                        noise_sd: float = 0.5, theta_true=None) -> SyntheticGPSimulator:
    """Draw pseudo-inputs (uniform designs, prior parameters, fair-coin fidelities) and frozen weights.

    ``theta_true`` defaults to a prior draw.
    """
    if M < 1:
        raise ValueError("M must be at least 1")
    zx = box.sample(M, rng)
    zt = prior_sample(prior, M, rng)
    zs = (rng.random(M) < 0.5).astype(float)
    with torch.no_grad():
        x, t, s = as_tensor(zx), as_tensor(zt), as_tensor(zs)
        K = cross_kernel(x, t, s, x, t, s, spec) + spec.nugget * torch.eye(M, dtype=DTYPE)
        L = safe_cholesky(K, spec.nugget)
        u = L @ as_tensor(rng.standard_normal(M))
        w = torch.cholesky_solve(u[:, None], L)[:, 0]
    if theta_true is None:
        theta_true = prior_sample(prior, 1, rng)[0]
    return SyntheticGPSimulator(zx, zt, zs, w.numpy(), spec, np.asarray(theta_true, float), noise_sd)


def pseudo_values(sim: SyntheticGPSimulator) -> np.ndarray:
    """Function values at the pseudo-inputs."""
    return np.concatenate([sim.latent(sim.pseudo_x[i:i + 1], sim.pseudo_theta[i:i + 1], sim.pseudo_s[i])
                           for i in range(sim.pseudo_x.shape[0])])


@dataclass(frozen=True)
class LocationFindingSimulator:
    """Two hidden point sources in the plane observed through log total intensity.

    ``theta`` stacks both source positions, ``(a_1, a_2, b_1, b_2)``.
    """

    sources: np.ndarray
    background: float = 0.1
    max_signal: float = 1e-4
    noise_sd: float = 0.5

    def __post_init__(self):
        src = np.asarray(self.sources, dtype=float).reshape(-1)
        if src.shape != (4,):
            raise ValueError("exactly two 2D sources are required")
        if not (self.background > 0 and self.max_signal > 0):
            raise ValueError("background and max_signal must be positive")
        object.__setattr__(self, "sources", src)

    dim_x = 2
    dim_theta = 4

    @property
    def theta_true(self) -> np.ndarray:
        return self.sources

    def simulate(self, designs, params) -> np.ndarray:
        x, t = _rows(designs, 2), _rows(params, 4)
        return log_intensity(x, t, self.background, self.max_signal)

    def observe_real(self, designs, rng: np.random.Generator) -> np.ndarray:
        x = _rows(designs, 2)
        return location_signal(self, x) + self.noise_sd * rng.standard_normal(x.shape[0])


def log_intensity(x: np.ndarray, theta: np.ndarray, background: float, max_signal: float) -> np.ndarray:
    a, b = (1.0 / (max_signal + ((x - theta[:, k:k + 2]) ** 2).sum(-1)) for k in (0, 2))
    # a + b is commutative in floating point, so relabelling sources is exact
    return np.log(background + (a + b))


def location_signal(sim: LocationFindingSimulator, x, theta=None) -> np.ndarray:
    """Noise-free log intensity at designs ``x`` for sources ``theta`` (default: the true ones)."""
    x = _rows(x, 2)
    t = np.broadcast_to(sim.sources if theta is None else np.asarray(theta, float).reshape(-1, 4), (x.shape[0], 4))
    return log_intensity(x, t, sim.background, sim.max_signal)


def evaluate_simulator(sim, designs, params) -> np.ndarray:
    return np.asarray(sim.simulate(designs, params), dtype=float)


# ---------------------------------------------------------------------------
# external processes


@dataclass(frozen=True)
class ExternalSimulatorSpec:
    command: Sequence[str]
    timeout: float = 60.0
    max_concurrent: int = 1

    def __post_init__(self):
        if not self.timeout > 0:
            raise ValueError("timeout must be positive")
        if self.max_concurrent < 1:
            raise ValueError("max_concurrent must be at least 1")


class ExternalResult(NamedTuple):
    outcomes: np.ndarray          # nan where the point failed
    errors: Dict[int, str]        # batch index -> message

    @property
    def ok(self) -> bool:
        return not self.errors


def _reader(stream, out: "queue.Queue"):
    for line in stream:
        out.put(line)
    out.put(None)


def _run_child(spec: ExternalSimulatorSpec, requests: List[dict]) -> Dict[int, object]:
    """Send ``requests`` to one child; return id -> outcome (float) or error message (str)."""
    proc = subprocess.Popen(list(spec.command), stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True,
                            encoding="utf-8")
    lines: "queue.Queue" = queue.Queue()
    threading.Thread(target=_reader, args=(proc.stdout, lines), daemon=True).start()
    wanted = {r["id"] for r in requests}
    got: Dict[int, object] = {}
    try:
        try:
            for r in requests:
                proc.stdin.write(json.dumps(r) + "\n")
            proc.stdin.close()
        except BrokenPipeError:
            pass
        deadline = time.monotonic() + spec.timeout
        while wanted - got.keys():
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                break
            try:
                line = lines.get(timeout=remaining)
            except queue.Empty:
                break
            if line is None:
                break
            got.update(_parse_response(line, wanted))
    finally:
        proc.kill()
        proc.wait()
    for i in wanted - got.keys():
        got[i] = f"no response within {spec.timeout}s"
    return got


def _parse_response(line: str, wanted) -> Dict[int, object]:
    try:
        rec = json.loads(line)
        rid = rec["id"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ProtocolError(f"malformed response line {line!r}") from exc
    if rid not in wanted:
        raise ProtocolError(f"response for unknown id {rid!r}")
    if "error" in rec:
        return {rid: str(rec["error"])}
    try:
        return {rid: float(rec["y"])}
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"response without a numeric y: {line!r}") from exc


def external_call(spec: ExternalSimulatorSpec, batch: DesignBatch) -> ExternalResult:
    """Evaluate a batch through child processes speaking one JSON record per line.

    Points are split round-robin over up to ``max_concurrent`` children.  A
    point without an answer before the timeout becomes an error entry; a
    malformed line raises :class:`ProtocolError`.
    """
    reqs = [{"id": i, "x": [float(v) for v in x], "theta": [float(v) for v in t]}
            for i, (x, t) in enumerate(zip(batch.designs, batch.params))]
    n_child = min(spec.max_concurrent, len(reqs))
    groups = [reqs[k::n_child] for k in range(n_child)]
    with ThreadPoolExecutor(n_child) as pool:
        answers = list(pool.map(lambda g: _run_child(spec, g), groups))
    outcomes = np.full(len(reqs), np.nan)
    errors: Dict[int, str] = {}
    for ans in answers:
        for i, v in ans.items():
            if isinstance(v, str):
                errors[i] = v
            else:
                outcomes[i] = v
    return ExternalResult(outcomes, errors)


@dataclass(frozen=True)
class ExternalSimulator:
    """Adapter exposing an external process through ``simulate``."""

    spec: ExternalSimulatorSpec
    dim_x: int
    dim_theta: int
    theta_true: Optional[np.ndarray] = None

    def simulate(self, designs, params) -> np.ndarray:
        res = external_call(self.spec, DesignBatch(_rows(designs, self.dim_x), _rows(params, self.dim_theta)))
        if not res.ok:
            raise SimulatorError(f"external simulator failed: {res.errors}")
        return res.outcomes

    def observe_real(self, designs, rng: np.random.Generator) -> np.ndarray:
        raise SimulatorError("external problems read real observations from the config")


def save_gp_simulator(sim: SyntheticGPSimulator, path) -> None:
    doc = {"format": "bacon-gp-simulator", "version": 1, "spec": sim.spec.to_dict(), "noise_sd": sim.noise_sd,
           "theta_true": sim.theta_true.tolist(), "pseudo_x": sim.pseudo_x.tolist(),
           "pseudo_theta": sim.pseudo_theta.tolist(), "pseudo_s": sim.pseudo_s.tolist(),
           "weights": sim.weights.tolist()}
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_gp_simulator(path) -> SyntheticGPSimulator:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "bacon-gp-simulator" or doc.get("version") != 1:
        raise ValueError("not a sampled GP simulator file")
    arr = {k: np.asarray(doc[k], float) for k in ("pseudo_x", "pseudo_theta", "pseudo_s", "weights", "theta_true")}
    return SyntheticGPSimulator(arr["pseudo_x"], arr["pseudo_theta"], arr["pseudo_s"], arr["weights"],
                                KernelSpec(**doc["spec"]), arr["theta_true"], float(doc["noise_sd"]))
