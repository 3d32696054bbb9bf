import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bacon.core import (Box, CalibrationDataset, JointInput, Prior, prior_logpdf, prior_sample,
                        smooth_uniform_inverse, smooth_uniform_transform)


def test_standard_normal_sample_mean_clt_bound():
    prior = Prior.standard_normal(2)
    x = prior_sample(prior, 100_000, np.random.default_rng(0))
    assert x.shape == (100_000, 2)
    assert np.all(np.abs(x.mean(0)) < 3 / math.sqrt(1e5))


def test_sampling_is_deterministic_given_seed():
    prior = Prior.smooth_uniform([[0, 1], [-2, 5]])
    a = prior_sample(prior, 50, np.random.default_rng(7))
    b = prior_sample(prior, 50, np.random.default_rng(7))
    assert np.array_equal(a, b)


def test_smooth_uniform_samples_strictly_inside():
    prior = Prior.smooth_uniform([[0, 1]])
    x = prior_sample(prior, 10_000, np.random.default_rng(1))
    assert np.all((x > 0) & (x < 1))


def test_sample_rejects_nonpositive_n():
    with pytest.raises(ValueError):
        prior_sample(Prior.standard_normal(1), 0, np.random.default_rng(0))


def test_standard_normal_logpdf_values():
    prior = Prior.standard_normal(2)
    assert prior_logpdf(prior, np.zeros(2)) == pytest.approx(-math.log(2 * math.pi), abs=1e-14)
    assert prior_logpdf(prior, np.array([1.0, 0.0])) == pytest.approx(-math.log(2 * math.pi) - 0.5, abs=1e-14)


def test_smooth_uniform_logpdf_outside_is_neg_inf():
    prior = Prior.smooth_uniform([[0, 1]])
    assert prior_logpdf(prior, np.array([0.0])) == -math.inf
    assert prior_logpdf(prior, np.array([1.5])) == -math.inf
    assert math.isfinite(prior_logpdf(prior, np.array([0.3])))


def test_smooth_uniform_latent_density_is_standard_normal():
    prior = Prior.smooth_uniform([[0, 1], [2, 3]])
    z = np.array([0.4, -1.2])
    assert prior_logpdf(prior, z, latent=True) == pytest.approx(
        prior_logpdf(Prior.standard_normal(2), z))
    # change of variables between latent and bounded coordinates
    theta, log_det = smooth_uniform_transform(z, prior.bounds)
    assert prior_logpdf(prior, theta) == pytest.approx(prior_logpdf(prior, z, latent=True) - log_det, rel=1e-12)


@pytest.mark.parametrize("prior,grid", [
    (Prior.standard_normal(1), np.linspace(-8, 8, 10_000)),
    (Prior.smooth_uniform([[0, 1]]), np.linspace(0, 1, 10_000)),
    (Prior.smooth_uniform([[-2, 5]]), np.linspace(-2, 5, 10_000)),
])
def test_density_integrates_to_one(prior, grid):
    dens = np.exp(prior_logpdf(prior, grid[:, None]))
    assert np.trapezoid(dens, grid) == pytest.approx(1.0, abs=1e-3)


def test_transform_basic_values():
    theta, _ = smooth_uniform_transform(np.array([0.0]), [[0, 1]])
    assert theta[0] == 0.5
    theta, _ = smooth_uniform_transform(np.array([100.0]), [[0, 1]])
    assert theta[0] == pytest.approx(1.0)


def test_transform_log_det_matches_finite_difference():
    zeta, h = 0.3, 1e-5
    bounds = [[-2, 5]]
    _, log_det = smooth_uniform_transform(np.array([zeta]), bounds)
    up, _ = smooth_uniform_transform(np.array([zeta + h]), bounds)
    dn, _ = smooth_uniform_transform(np.array([zeta - h]), bounds)
    fd = (up[0] - dn[0]) / (2 * h)
    assert log_det == pytest.approx(math.log(fd), abs=1e-6)


@settings(max_examples=200, deadline=None)
@given(st.floats(-10, 10), st.floats(-5, 5), st.floats(0.1, 10))
def test_transform_round_trip(zeta, lo, width):
    bounds = [[lo, lo + width]]
    theta, _ = smooth_uniform_transform(np.array([zeta]), bounds)
    back = smooth_uniform_inverse(theta, bounds)
    assert back[0] == pytest.approx(zeta, abs=1e-9 * max(1.0, math.exp(abs(zeta)) / 1e4))


@settings(max_examples=100, deadline=None)
@given(st.floats(-10, 10))
def test_transform_round_trip_unit_bounds(zeta):
    theta, _ = smooth_uniform_transform(np.array([zeta]), [[0, 1]])
    assert smooth_uniform_inverse(theta, [[0, 1]])[0] == pytest.approx(zeta, abs=1e-9 * math.exp(abs(zeta)) + 1e-12)


def test_transform_is_monotone():
    z = np.linspace(-30, 30, 1001)
    theta, _ = smooth_uniform_transform(z[:, None], [[0, 1]])
    assert np.all(np.diff(theta[:, 0]) >= 0)


def test_transform_saturation_guard():
    theta, log_det = smooth_uniform_transform(np.array([1e4]), [[0, 1]])
    assert np.isfinite(log_det)
    assert theta[0] <= 1.0


def test_prior_rejects_bad_bounds():
    with pytest.raises(ValueError):
        Prior.smooth_uniform([[1, 0]])


def test_joint_input_rejects_bad_fidelity():
    with pytest.raises(ValueError):
        JointInput([0.1], [0.2], s=2)


def test_dataset_append_is_only_mutation():
    d = CalibrationDataset([[0.1], [0.2]], [1.0, 2.0], dim_theta=2)
    assert d.n_real == 2 and d.n_sims == 0 and d.dim_theta == 2
    d2 = d.append([[0.5]], [[1.0, -1.0]], [3.0])
    assert d.n_sims == 0
    assert d2.n_sims == 1 and len(d2) == 3
    with pytest.raises(ValueError):
        d2.sim_outcomes[0] = 5.0
    d3 = d2.append([[0.6], [0.7]], [[0, 0], [1, 1]], [1, 2])
    assert d3.n_sims == 3
    assert d3.head(1).n_sims == 1


def test_dataset_validates_lengths():
    with pytest.raises(ValueError):
        CalibrationDataset([[0.1], [0.2]], [1.0])


def test_box_grid_and_squash():
    box = Box.unit(2)
    g = box.grid(4)
    assert g.shape == (16, 2)
    assert np.all(box.contains(g))
    import torch
    x = box.squash(torch.tensor([[-100.0, 100.0]], dtype=torch.float64))
    assert np.all(box.contains(x.numpy()))
