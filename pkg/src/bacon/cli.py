"""Command line entry point: ``bacon run | compare | sample-simulator | metrics``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from .metrics import HEADER
from .runner import ExperimentConfig, RunArtifact, compare_methods, run_experiment, stream
from .simulators import sample_gp_simulator, save_gp_simulator


def load_config(path, **overrides) -> ExperimentConfig:
    """Read a YAML (or JSON) mapping of ``ExperimentConfig`` fields."""
    with open(path) as fh:
        d = yaml.safe_load(fh) or {}
    if not isinstance(d, dict):
        raise ValueError(f"{path}: config must be a mapping")
    d.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(d)


def cmd_run(args) -> int:
    cfg = load_config(args.config, seed=args.seed, method=args.method)
    art = run_experiment(cfg, args.out, resume=args.resume)
    print(format_metrics(art.metrics))
    return 0


def cmd_compare(args) -> int:
    configs = [load_config(p) for p in args.configs]
    comp = compare_methods(configs, args.repeats, args.out)
    print(comp.table())
    return 0


def cmd_sample_simulator(args) -> int:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    rng = stream(args.seed, "data")
    sim = sample_gp_simulator(args.m, cfg.box, cfg.make_prior(), cfg.kernel_spec(), rng, noise_sd=cfg.noise_sd)
    save_gp_simulator(sim, args.out)
    print(f"wrote {args.m} pseudo-inputs to {args.out}; theta_true = {np.round(sim.theta_true, 4).tolist()}")
    return 0


def format_metrics(records) -> str:
    def cell(v):
        return "-" if v is None else f"{v:.4g}" if isinstance(v, float) else str(v)
    rows = [HEADER] + [tuple(cell(getattr(r, k)) for k in HEADER) for r in records]
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(HEADER))]
    return "\n".join("  ".join(str(c).rjust(w) for c, w in zip(r, widths)) for r in rows)


def cmd_metrics(args) -> int:
    art = RunArtifact.load(args.run)
    print(f"{art.config.method} on {art.config.problem}, seed {art.config.seed}, "
          f"{art.data.n_sims} simulations, {len(art.posterior)} posterior samples")
    print(format_metrics(art.metrics))
    if art.summary:
        print(json.dumps(art.summary, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bacon", description="Batch adaptive calibration experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one method on one seed")
    r.add_argument("--config", required=True, type=Path)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", required=True, type=Path)
    r.add_argument("--method", help="override the configured method")
    r.add_argument("--resume", action="store_true", help="continue from the last saved iteration in --out")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="run several configs over repeated seeds")
    c.add_argument("--configs", required=True, nargs="+", type=Path)
    c.add_argument("--repeats", type=int, default=10)
    c.add_argument("--out", required=True, type=Path)
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("sample-simulator", help="draw and save a synthetic GP simulator")
    s.add_argument("--m", type=int, default=512)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--config", type=Path, help="take box, prior and kernel from this config")
    s.set_defaults(func=cmd_sample_simulator)

    m = sub.add_parser("metrics", help="print the metric table of a finished run")
    m.add_argument("--run", required=True, type=Path)
    m.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"bacon: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
