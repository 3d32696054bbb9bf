"""Experiment configuration, the adaptive calibration loop and method comparison.

Randomness comes from one master seed split into named per-iteration
streams, so every iteration is a pure function of ``(config, data so far)``.
That gives method isolation (the problem set-up is drawn before the method
is consulted) and exact resumption from any saved iteration.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np
import torch

from .baselines import CandidateGrid, d_optimal_select, imspe_select, random_select
from .conditional import QModelConfig, load_checkpoint, make_elements, save_checkpoint
from .core import Box, CalibrationDataset, Prior, as_tensor, prior_logpdf, prior_sample
from .eig import EIGConfig, EIGContext, optimize
from .gp import KernelSpec, fit_hyperparameters, safe_cholesky, stationary_kernel
from .metrics import MetricRecord, knn_kl_estimate, map_error, read_table, rmse, write_table
from .posterior import PosteriorEstimate, adaptive_metropolis, map_estimate, mcmc_sample
from .simulators import (ExternalSimulator, ExternalSimulatorSpec, LocationFindingSimulator, SimulatorError,
                         sample_gp_simulator)

log = logging.getLogger(__name__)

FORMAT = "bacon-run/1"
METHODS = ("bacon", "bacon-split", "bacon-amortised", "random", "imspe", "d-optimal")
PROBLEMS = ("synthetic-gp", "location", "external")
STREAMS = ("data", "mcmc", "select", "simulator", "fit", "reference", "amortise")


def stream(seed: int, name: str, t: int = 0) -> np.random.Generator:
    """Independent generator for ``(seed, stream name, iteration)``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(STREAMS.index(name), t)))


def torch_generator(rng: np.random.Generator) -> torch.Generator:
    return torch.Generator().manual_seed(int(rng.integers(2 ** 62)))


# ---------------------------------------------------------------------------
# configuration


def _default_kernel(problem: str) -> dict:
    if problem == "location":
        return {"sim_kernel": "matern-2.5", "sim_lengthscales": [0.3, 0.3, 1.0, 1.0, 1.0, 1.0], "sim_variance": 1.0,
                "err_kernel": "zero", "noise_var": 0.25}
    return {"sim_kernel": "squared-exponential", "sim_lengthscales": [0.3, 0.3, 0.7, 0.7], "sim_variance": 1.0,
            "err_kernel": "matern-2.5", "err_variance": 0.1, "err_lengthscales": [0.5, 0.5], "rho": 1.0,
            "noise_var": 0.25}


@dataclass(frozen=True)
class ExperimentConfig:
    problem: str = "synthetic-gp"
    method: str = "bacon-split"
    T: int = 20
    B: int = 4
    R: int = 5
    n_init_sims: int = 20
    seed: int = 0
    dim_x: int = 2
    dim_theta: int = 2
    box_lower: Sequence[float] = (0.0, 0.0)
    box_upper: Sequence[float] = (1.0, 1.0)
    prior: dict = field(default_factory=lambda: {"kind": "standard-normal"})
    kernel: Optional[dict] = None
    kernel_source: str = "config"
    refit: str = "every"
    refit_every: int = 1
    fit_samples: int = 64
    noise_sd: float = 0.5
    simulator_m: int = 512
    mcmc_samples: int = 1000
    mcmc_burn_in: int = 500
    mcmc_chains: int = 4
    final_samples: int = 4000
    pool_size: int = 256
    eig: dict = field(default_factory=dict)
    amortise_refresh: int = 5
    grid_per_dim: int = 16
    grid_params: int = 256
    grid_max_points: int = 2048
    test_per_dim: int = 10
    kl_k: int = 1
    map_tol: float = 1e-4
    external: Optional[dict] = None

    def __post_init__(self):
        if self.problem not in PROBLEMS:
            raise ValueError(f"unknown problem {self.problem!r}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.T < 0 or self.B < 1 or self.R < 1 or self.n_init_sims < 0:
            raise ValueError("need T >= 0, B >= 1, R >= 1 and n_init_sims >= 0")
        if self.kernel_source not in ("config", "generator", "pilot"):
            raise ValueError(f"unknown kernel source {self.kernel_source!r}")
        if self.refit not in ("every", "never"):
            raise ValueError(f"unknown refit schedule {self.refit!r}")
        if self.problem == "location":
            object.__setattr__(self, "dim_x", 2)
            object.__setattr__(self, "dim_theta", 4)
        if self.problem == "external" and not self.external:
            raise ValueError("external problems need an 'external' section")
        if len(self.box_lower) != self.dim_x or len(self.box_upper) != self.dim_x:
            raise ValueError("box bounds must match dim_x")
        self.eig_config()

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        d = dict(d)
        for k in ("box_lower", "box_upper"):
            if k in d:
                d[k] = tuple(float(v) for v in d[k])
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["box_lower"], d["box_upper"] = list(self.box_lower), list(self.box_upper)
        return d

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    @property
    def box(self) -> Box:
        return Box(np.asarray(self.box_lower, float), np.asarray(self.box_upper, float))

    def make_prior(self) -> Prior:
        kind = self.prior.get("kind", "standard-normal")
        if kind == "standard-normal":
            return Prior.standard_normal(self.dim_theta)
        if kind == "smooth-uniform":
            return Prior.smooth_uniform(self.prior["bounds"])
        raise ValueError(f"unknown prior kind {kind!r}")

    def kernel_spec(self) -> KernelSpec:
        return KernelSpec(**(self.kernel or _default_kernel(self.problem)))

    def eig_config(self) -> EIGConfig:
        d = dict(self.eig)
        q = QModelConfig(**d.pop("q", {}))
        mode = "split" if self.method == "bacon-split" else "joint"
        return EIGConfig(**{"batch_size": self.B, "mode": mode, **d, "q": q})


# ---------------------------------------------------------------------------
# problem set-up


class Problem(NamedTuple):
    simulator: object
    box: Box
    prior: Prior
    spec: KernelSpec
    initial: CalibrationDataset
    theta_true: Optional[np.ndarray]
    test_designs: np.ndarray
    test_outcomes: np.ndarray


def _make_simulator(config: ExperimentConfig, prior: Prior, rng: np.random.Generator):
    if config.problem == "synthetic-gp":
        return sample_gp_simulator(config.simulator_m, config.box, prior, config.kernel_spec(), rng,
                                   noise_sd=config.noise_sd)
    if config.problem == "location":
        return LocationFindingSimulator(prior_sample(prior, 1, rng)[0], noise_sd=config.noise_sd)
    ext = config.external
    spec = ExternalSimulatorSpec(ext["command"], float(ext.get("timeout", 60.0)), int(ext.get("max_concurrent", 1)))
    return ExternalSimulator(spec, config.dim_x, config.dim_theta)


def setup_problem(config: ExperimentConfig) -> Problem:
    """Simulator, real data, initial simulations and test set; independent of the method."""
    rng = stream(config.seed, "data")
    prior, box = config.make_prior(), config.box
    sim = _make_simulator(config, prior, rng)
    if config.problem == "external":
        xr = np.asarray(config.external["real_designs"], float).reshape(-1, config.dim_x)
        yr = np.asarray(config.external["real_outcomes"], float).reshape(-1)
        test_x = np.asarray(config.external.get("test_designs", xr), float).reshape(-1, config.dim_x)
        test_y = np.asarray(config.external.get("test_outcomes", yr), float).reshape(-1)
        theta_true = config.external.get("theta_true")
        theta_true = None if theta_true is None else np.asarray(theta_true, float)
    else:
        xr = box.sample(config.R, rng)
        yr = sim.observe_real(xr, rng)
        test_x = box.grid(config.test_per_dim)
        test_y = sim.observe_real(test_x, rng)
        theta_true = np.asarray(sim.theta_true, float)
    xs = box.sample(config.n_init_sims, rng)
    ts = prior_sample(prior, config.n_init_sims, rng) if config.n_init_sims else np.zeros((0, config.dim_theta))
    ys = sim.simulate(xs, ts) if config.n_init_sims else np.zeros(0)
    data = CalibrationDataset(xr, yr, xs, ts, ys, dim_theta=config.dim_theta)
    spec = config.kernel_spec()
    if config.kernel_source == "pilot":
        spec = pilot_spec(config, sim, prior, box, data, spec)
    return Problem(sim, box, prior, spec, data, theta_true, test_x, test_y)


def _fit(data, spec, theta_samples, config):
    res = fit_hyperparameters(data, spec, theta_samples)
    if not res.converged:
        log.warning("hyperparameter fit did not converge")
    return res.spec


def pilot_spec(config: ExperimentConfig, sim, prior: Prior, box: Box, data: CalibrationDataset,
               spec: KernelSpec) -> KernelSpec:
    """Hyperparameters learnt on the initial data plus a random-search run of the same length."""
    rng = stream(config.seed, "fit", 10 ** 6)
    n = config.T * config.B
    if n:
        xs, ts = box.sample(n, rng), prior_sample(prior, n, rng)
        data = data.append(xs, ts, sim.simulate(xs, ts))
    spec = _fit(data, spec, prior_sample(prior, config.fit_samples, rng), config)
    post = run_mcmc(data, spec, prior, config, rng, config.mcmc_samples)
    return _fit(data, spec, post.subsample(config.fit_samples, rng), config)


# ---------------------------------------------------------------------------
# posteriors


def run_mcmc(data: CalibrationDataset, spec: KernelSpec, prior: Prior, config: ExperimentConfig,
             rng: np.random.Generator, n: int) -> PosteriorEstimate:
    chains = config.mcmc_chains
    n = max(100, n - n % chains)
    init = prior_sample(prior, chains, rng)
    return mcmc_sample(data, spec, prior, n, rng, burn_in=config.mcmc_burn_in, n_chains=chains, init=init)


def reference_log_likelihood(sim, designs: np.ndarray, outcomes: np.ndarray, spec: KernelSpec):
    """``log N(y_R; rho h(X_R, theta), K_err(X_R) + (noise + nugget) I)`` for a batch of theta.

    The real process is ``rho`` times the known simulator plus the GP
    discrepancy, so this is the likelihood with full simulator knowledge.
    """
    x = as_tensor(designs)
    R = x.shape[0]
    if spec.has_error_term:
        K = stationary_kernel(spec.err_kernel, x, x, spec.err_variance, spec.err_lengthscales)
    else:
        K = torch.zeros(R, R, dtype=torch.float64)
    K = K + (spec.noise_var + spec.nugget) * torch.eye(R, dtype=torch.float64)
    L = safe_cholesky(K, spec.nugget).numpy()
    logdet = 2 * np.log(np.diag(L)).sum()
    y = np.asarray(outcomes, float)

    def loglik(theta: np.ndarray) -> np.ndarray:
        theta = np.atleast_2d(theta)
        S = theta.shape[0]
        h = sim.simulate(np.tile(designs, (S, 1)), np.repeat(theta, R, axis=0)).reshape(S, R)
        r = y - spec.rho * h
        a = np.linalg.solve(L, r.T)
        return -0.5 * (a * a).sum(0) - 0.5 * logdet - 0.5 * R * math.log(2 * math.pi)
    return loglik


def reference_posterior(problem: Problem, config: ExperimentConfig, n: int) -> np.ndarray:
    """Samples of the posterior with direct simulator access."""
    rng = stream(config.seed, "reference")
    prior = problem.prior
    ll = reference_log_likelihood(problem.simulator, problem.initial.real_designs, problem.initial.real_outcomes,
                                  problem.spec)

    def target(z):
        with torch.no_grad():
            lp = np.asarray(prior_logpdf(prior, as_tensor(z), latent=True))
        return lp + ll(np.asarray(prior.to_theta(z)))
    chains = config.mcmc_chains
    init = np.asarray(prior.to_latent(prior_sample(prior, chains, rng)))
    draws, _, _ = adaptive_metropolis(target, init, n // chains, rng, burn_in=config.mcmc_burn_in)
    return np.asarray(prior.to_theta(draws.reshape(-1, prior.dim)))


def distinct(samples: np.ndarray) -> np.ndarray:
    """Drop repeated MCMC states, which would give zero neighbour distances."""
    return np.unique(np.asarray(samples), axis=0)


# ---------------------------------------------------------------------------
# artifacts


def _row(x, theta, s, y, t) -> str:
    return json.dumps({"x": [float(v) for v in x], "theta": None if theta is None else [float(v) for v in theta],
                       "s": int(s), "y": float(y), "t": int(t)})


def write_samples(samples: np.ndarray, path) -> None:
    with open(path, "w") as fh:
        for s in np.atleast_2d(samples):
            fh.write(json.dumps([float(v) for v in s]) + "\n")


def read_samples(path) -> np.ndarray:
    with open(path) as fh:
        return np.array([json.loads(line) for line in fh if line.strip()], dtype=float)


def read_dataset(path, dim_theta: int, upto: Optional[int] = None) -> CalibrationDataset:
    """Dataset from a snapshot file, keeping simulation rows with ``t <= upto``."""
    real_x, real_y, sx, st, sy = [], [], [], [], []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            r = json.loads(line)
            if r["s"] == 1:
                real_x.append(r["x"])
                real_y.append(r["y"])
            elif upto is None or r["t"] <= upto:
                sx.append(r["x"])
                st.append(r["theta"])
                sy.append(r["y"])
    dx = len(real_x[0]) if real_x else len(sx[0])
    return CalibrationDataset(np.asarray(real_x, float).reshape(-1, dx), real_y, np.asarray(sx, float).reshape(-1, dx),
                              np.asarray(st, float).reshape(-1, dim_theta), sy, dim_theta=dim_theta)


@dataclass
class RunArtifact:
    config: ExperimentConfig
    data: CalibrationDataset
    metrics: List[MetricRecord]
    posterior: np.ndarray
    initial_posterior: np.ndarray
    reference: Optional[np.ndarray]
    specs: List[dict]
    summary: dict
    format: str = FORMAT

    @classmethod
    def load(cls, out) -> "RunArtifact":
        out = Path(out)
        state = json.loads((out / "state.json").read_text())
        if state.get("format") != FORMAT:
            raise ValueError(f"unsupported run format {state.get('format')!r}")
        config = ExperimentConfig.from_dict(json.loads((out / "config.json").read_text()))
        ref = out / "reference.jsonl"
        return cls(config, read_dataset(out / "data.jsonl", config.dim_theta), read_table(out / "metrics.csv"),
                   read_samples(out / "posterior.jsonl"), read_samples(out / "p0.jsonl"),
                   read_samples(ref) if ref.exists() else None, state["specs"],
                   json.loads((out / "summary.json").read_text()) if (out / "summary.json").exists() else {})


# ---------------------------------------------------------------------------
# the loop


class _Loop:
    """State of one run; ``out`` receives a snapshot after every iteration."""

    def __init__(self, config: ExperimentConfig, out: Optional[Path], problem: Optional[Problem] = None):
        self.config = config
        self.out = out
        self.problem = problem or setup_problem(config)
        self.prior, self.box = self.problem.prior, self.problem.box
        self.sim = self.problem.simulator
        self.grid = None
        if config.method in ("imspe", "d-optimal"):
            self.grid = CandidateGrid.build(self.box, self.prior, stream(config.seed, "select", 10 ** 6),
                                            config.grid_per_dim if config.dim_x <= 2 else None, config.grid_params,
                                            config.grid_max_points)
        self.map_calls = 0

    # -- persistence -------------------------------------------------------

    def _save_state(self, t, data, specs, metrics, posterior, q):
        if self.out is None:
            return
        write_table(metrics, self.out / "metrics.csv")
        write_samples(posterior.samples, self.out / "posterior.jsonl")
        if q is not None:
            save_checkpoint(q, self.out / "q.json")
        state = {"format": FORMAT, "iteration": t, "specs": specs, "n_sims": data.n_sims}
        tmp = self.out / "state.json.tmp"
        tmp.write_text(json.dumps(state))
        os.replace(tmp, self.out / "state.json")

    def _append_rows(self, designs, params, outcomes, t):
        if self.out is None:
            return
        with open(self.out / "data.jsonl", "a") as fh:
            for x, th, y in zip(designs, params, outcomes):
                fh.write(_row(x, th, 0, y, t) + "\n")

    def _truncate_rows(self, upto: int):
        """Drop simulation rows written by an iteration that never completed."""
        path = self.out / "data.jsonl"
        keep = [line for line in path.read_text().splitlines() if line.strip() and json.loads(line)["t"] <= upto]
        path.write_text("".join(line + "\n" for line in keep))

    def _start_files(self, data: CalibrationDataset, p0: np.ndarray, ref: Optional[np.ndarray]):
        if self.out is None:
            return
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.json").write_text(json.dumps(self.config.to_dict(), indent=1))
        with open(self.out / "data.jsonl", "w") as fh:
            for x, y in zip(data.real_designs, data.real_outcomes):
                fh.write(_row(x, None, 1, y, 0) + "\n")
        self._append_rows(data.sim_designs, data.sim_params, data.sim_outcomes, 0)
        write_samples(p0, self.out / "p0.jsonl")
        if ref is not None:
            write_samples(ref, self.out / "reference.jsonl")

    # -- pieces ------------------------------------------------------------

    def posterior(self, data, spec, t, final=False) -> PosteriorEstimate:
        n = self.config.final_samples if final else self.config.mcmc_samples
        return run_mcmc(data, spec, self.prior, self.config, stream(self.config.seed, "mcmc", t), n)

    def amortised_posterior(self, q, batch_elements, t) -> PosteriorEstimate:
        rng = stream(self.config.seed, "amortise", t)
        with torch.no_grad():
            z = q.sample(batch_elements, self.config.mcmc_samples, torch_generator(rng))
        return PosteriorEstimate.from_samples(np.asarray(self.prior.to_theta(z.reshape(-1, self.prior.dim))))

    def select(self, t, data, spec, post: PosteriorEstimate, q_prev):
        cfg, rng = self.config, stream(self.config.seed, "select", t)
        if cfg.method == "random":
            return random_select(cfg.B, self.box, self.prior, rng), None
        if cfg.method in ("imspe", "d-optimal"):
            theta_map = map_estimate(post, data, spec, self.prior, tol=cfg.map_tol)
            self.map_calls += 1
            pick = imspe_select if cfg.method == "imspe" else d_optimal_select
            return pick(cfg.B, theta_map, data, spec, self.grid), None
        pool = post.subsample(cfg.pool_size, rng)
        ctx = EIGContext(data, spec, self.prior, self.box, pool)
        ecfg = self.eig_config(t)
        res = optimize(ctx, ecfg, rng, q_prev if cfg.method == "bacon-amortised" else None)
        return res.batch, res.model

    def eig_config(self, t):
        ecfg = self.config.eig_config()
        return dataclasses.replace(ecfg, q=dataclasses.replace(ecfg.q, seed=ecfg.q.seed + 7919 * t))

    def record(self, t, data, spec, post: PosteriorEstimate, p0, ref, started) -> MetricRecord:
        cfg, pb = self.config, self.problem
        rng = stream(cfg.seed, "mcmc", 10 ** 6 + t)
        thetas = post.subsample(256, rng)
        err = map_error(post.map_point, pb.theta_true) if pb.theta_true is not None else float("nan")
        r = rmse(thetas, data, spec, pb.test_designs, pb.test_outcomes)
        s = distinct(post.samples)
        kl0 = knn_kl_estimate(s, p0, cfg.kl_k) if t > 0 else 0.0
        kls = knn_kl_estimate(s, ref, cfg.kl_k) if ref is not None else None
        return MetricRecord(t, err, r, kl0, kls, time.perf_counter() - started)

    # -- driver ------------------------------------------------------------

    def run(self, resume: bool = False) -> RunArtifact:
        cfg, pb = self.config, self.problem
        q = None
        if resume and self.out is not None and (self.out / "state.json").exists():
            state = json.loads((self.out / "state.json").read_text())
            start = state["iteration"]
            specs = state["specs"]
            spec = KernelSpec(**specs[-1])
            data = read_dataset(self.out / "data.jsonl", cfg.dim_theta, upto=start)
            self._truncate_rows(start)
            metrics = read_table(self.out / "metrics.csv")[:start]
            p0_raw = read_samples(self.out / "p0.jsonl")
            p0 = distinct(p0_raw)
            ref_path = self.out / "reference.jsonl"
            ref = distinct(read_samples(ref_path)) if ref_path.exists() else None
            if (self.out / "q.json").exists() and cfg.method == "bacon-amortised":
                q = load_checkpoint(self.out / "q.json")
            started = time.perf_counter()
            post = self._posterior_at(start, data, spec, q)
            # the saved row may come from a final-length chain, so it is recomputed
            metrics.append(self.record(start, data, spec, post, p0, ref, started))
        else:
            start = 0
            data, spec = pb.initial, pb.spec
            specs = [spec.to_dict()]
            started = time.perf_counter()
            p0_post = self.posterior(data, spec, 0, final=True)
            p0_raw = p0_post.samples
            p0 = distinct(p0_raw)
            ref = None
            if cfg.problem != "external":
                ref = distinct(reference_posterior(pb, cfg, cfg.final_samples))
            self._start_files(data, p0_post.samples, ref)
            post = p0_post
            metrics = [self.record(0, data, spec, post, p0, ref, started)]
            self._save_state(0, data, specs, metrics, post, None)
        for t in range(start + 1, cfg.T + 1):
            started = time.perf_counter()
            batch, model = self.select(t, data, spec, post, q)
            try:
                y = np.asarray(self.sim.simulate(batch.designs, batch.params), float)
            except SimulatorError:
                log.error("simulator failed at iteration %d; state saved up to %d", t, t - 1)
                raise
            data = data.append(batch.designs, batch.params, y)
            self._append_rows(batch.designs, batch.params, y, t)
            if cfg.refit == "every" and t % cfg.refit_every == 0:
                spec = _fit(data, spec, post.subsample(cfg.fit_samples, stream(cfg.seed, "fit", t)), cfg)
            specs.append(spec.to_dict())
            if cfg.method == "bacon-amortised":
                q = model
            post = self._posterior_at(t, data, spec, q, batch, y)
            metrics.append(self.record(t, data, spec, post, p0, ref, started))
            self._save_state(t, data, specs, metrics, post, q)
        summary = {"method": cfg.method, "seed": cfg.seed, "T": cfg.T, "kl_pt_p0": metrics[-1].kl_pt_p0,
                   "kl_pt_pstar": metrics[-1].kl_pt_pstar, "map_error": metrics[-1].map_error,
                   "rmse": metrics[-1].rmse, "kl_estimator": f"knn k={cfg.kl_k}",
                   "batch_fantasies": cfg.method in ("imspe", "d-optimal")}
        if self.out is not None:
            (self.out / "summary.json").write_text(json.dumps(summary, indent=1))
        return RunArtifact(cfg, data, metrics, post.samples, p0_raw, ref, specs, summary)

    def _refresh(self, t) -> bool:
        return t == self.config.T or t % self.config.amortise_refresh == 0

    def _posterior_at(self, t, data, spec, q, batch=None, y=None) -> PosteriorEstimate:
        """Posterior given ``D_t``: MCMC, or the amortised model between refreshes."""
        final = t in (0, self.config.T)
        if self.config.method != "bacon-amortised" or t == 0 or self._refresh(t):
            return self.posterior(data, spec, t, final=final)
        if batch is None:
            n = data.n_sims
            B = self.config.B
            batch_x, batch_t, y = data.sim_designs[n - B:], data.sim_params[n - B:], data.sim_outcomes[n - B:]
        else:
            batch_x, batch_t = batch.designs, batch.params
        el = make_elements(as_tensor(batch_x), as_tensor(self.prior.to_latent(batch_t)), as_tensor(y))
        return self.amortised_posterior(q, el, t)


def run_experiment(config: ExperimentConfig, out=None, resume: bool = False,
                   problem: Optional[Problem] = None) -> RunArtifact:
    """Run (or resume) one method on one seed; ``out`` is an optional run directory."""
    return _Loop(config, Path(out) if out is not None else None, problem).run(resume)


def run_bacon_loop(config: ExperimentConfig, out=None, resume: bool = False) -> RunArtifact:
    if not config.method.startswith("bacon"):
        raise ValueError("run_bacon_loop needs a bacon method")
    return run_experiment(config, out, resume)


def run_baseline_loop(config: ExperimentConfig, out=None, resume: bool = False) -> RunArtifact:
    if config.method.startswith("bacon"):
        raise ValueError("run_baseline_loop needs a baseline method")
    return run_experiment(config, out, resume)


# ---------------------------------------------------------------------------
# comparison

TABLE_COLUMNS = ("method", "KL(p_T||p_0)", "KL(p_T||p*)")


def mean_std(values) -> tuple:
    v = np.asarray([x for x in values if x is not None], float)
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else float("nan")


class Comparison(NamedTuple):
    rows: List[dict]
    runs: Dict[str, List[RunArtifact]]

    def table(self) -> str:
        lines = [" | ".join(TABLE_COLUMNS), " | ".join("---" for _ in TABLE_COLUMNS)]
        for r in self.rows:
            lines.append(f"{r['method']} | {r['kl_pt_p0_mean']:.3f} ± {r['kl_pt_p0_std']:.3f} | "
                         f"{r['kl_pt_pstar_mean']:.3f} ± {r['kl_pt_pstar_std']:.3f}")
        return "\n".join(lines)


def compare_methods(configs: Sequence[ExperimentConfig], n_repeats: int, out=None) -> Comparison:
    """Run each config for seeds ``seed, seed + 1, ...`` and summarise the final KLs."""
    if n_repeats < 2:
        raise ValueError("need at least 2 repeats")
    rows, runs = [], {}
    out = Path(out) if out is not None else None
    for cfg in configs:
        arts = []
        for r in range(n_repeats):
            c = cfg.replace(seed=cfg.seed + r)
            d = out / f"{cfg.method}-seed{c.seed}" if out is not None else None
            arts.append(run_experiment(c, d))
        runs[cfg.method] = arts
        m0, s0 = mean_std(a.metrics[-1].kl_pt_p0 for a in arts)
        ms, ss = mean_std(a.metrics[-1].kl_pt_pstar for a in arts)
        rows.append({"method": cfg.method, "kl_pt_p0_mean": m0, "kl_pt_p0_std": s0, "kl_pt_pstar_mean": ms,
                     "kl_pt_pstar_std": ss, "n": n_repeats})
    comp = Comparison(rows, runs)
    if out is not None:
        write_comparison(comp, out)
    return comp


def write_comparison(comp: Comparison, out: Path) -> None:
    import csv
    out.mkdir(parents=True, exist_ok=True)
    keys = ["method", "kl_pt_p0_mean", "kl_pt_p0_std", "kl_pt_pstar_mean", "kl_pt_pstar_std", "n"]
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, keys)
        w.writeheader()
        w.writerows(comp.rows)
    (out / "table.md").write_text(comp.table() + "\n")
    with open(out / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "iteration", "map_error", "rmse", "kl_pt_p0", "kl_pt_pstar"])
        for method, arts in comp.runs.items():
            for t in range(len(arts[0].metrics)):
                recs = [a.metrics[t] for a in arts]
                w.writerow([method, t] + [mean_std(getattr(r, k) for r in recs)[0]
                                          for k in ("map_error", "rmse", "kl_pt_p0", "kl_pt_pstar")])
