import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))

from bacon.core import CalibrationDataset  # noqa: E402
from bacon.gp import KernelSpec  # noqa: E402


def random_spec(rng, dx, dth, kind=None, err=None, noise=None):
    kind = kind or rng.choice(["squared-exponential", "matern-2.5"])
    err = err or rng.choice(["matern-2.5", "zero"])
    return KernelSpec(
        sim_kernel=str(kind),
        sim_variance=float(rng.uniform(0.5, 2.0)),
        sim_lengthscales=rng.uniform(0.3, 1.5, dx + dth).tolist(),
        err_kernel=str(err),
        err_variance=float(rng.uniform(0.05, 0.5)) if err != "zero" else 0.0,
        err_lengthscales=rng.uniform(0.2, 1.0, dx).tolist() if err != "zero" else None,
        rho=float(rng.uniform(-2, 2)),
        noise_var=float(rng.uniform(0.01, 0.3)) if noise is None else noise,
    )


def random_dataset(rng, n_real, n_sims, dx, dth):
    xr = rng.random((n_real, dx))
    yr = rng.normal(size=n_real)
    xs = rng.random((n_sims, dx))
    ts = rng.normal(size=(n_sims, dth))
    ys = rng.normal(size=n_sims)
    return CalibrationDataset(xr, yr, xs, ts, ys, dim_theta=dth)


def randomize(module, seed, scale=0.5):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * scale)
    return module


def spec_params(spec):
    d = spec.to_dict()
    return d


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
