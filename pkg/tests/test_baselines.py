import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bacon.baselines import (CandidateGrid, _FixedPosterior, d_optimal_pick, d_optimal_select, imspe_select,
                             imspe_value, integrated_variance, random_select)
from bacon.core import Box, CalibrationDataset, Prior
from bacon.gp import KernelSpec

from conftest import random_dataset, random_spec
from oracles import schur_predict


def small_grid(rng, n=40, dx=1, dth=1):
    return CandidateGrid(rng.random((n, dx)), rng.normal(size=(n, dth)))


def brute_imspe(cand, theta_map, data, spec, grid):
    p = spec.to_dict()
    train = [(x, np.asarray(theta_map), 1) for x in data.real_designs]
    train += [(x, t, 0) for x, t in zip(data.sim_designs, data.sim_params)]
    train.append((np.asarray(cand[0]), np.asarray(cand[1]), 0))
    y = np.zeros(len(train))
    query = [(x, t, 0) for x, t in zip(grid.designs, grid.params)]
    _, cov = schur_predict(train, y, query, p)
    return float(np.trace(cov))


def test_random_select_uniform_moments():
    box = Box([0.0, -1.0], [1.0, 3.0])
    b = random_select(100_000, box, Prior.standard_normal(2), np.random.default_rng(0))
    se = (box.upper - box.lower) / np.sqrt(12 * 100_000)
    assert np.all(np.abs(b.designs.mean(0) - box.center) < 3 * se)
    assert np.all(box.contains(b.designs))


def test_random_select_seeded():
    box, prior = Box.unit(2), Prior.smooth_uniform([[0, 1]])
    a = random_select(4, box, prior, np.random.default_rng(3))
    b = random_select(4, box, prior, np.random.default_rng(3))
    assert np.array_equal(a.designs, b.designs) and np.array_equal(a.params, b.params)
    with pytest.raises(ValueError):
        random_select(0, box, prior, np.random.default_rng(3))


def test_imspe_matches_rebuild_oracle():
    rng = np.random.default_rng(0)
    for trial in range(5):
        spec = random_spec(rng, 1, 1)
        data = random_dataset(rng, 2, 3, 1, 1)
        grid = small_grid(rng, n=12)
        theta_map = rng.normal(size=1)
        cand = (rng.random(1), rng.normal(size=1))
        ours = imspe_value(cand, theta_map, data, spec, grid)
        assert ours == pytest.approx(brute_imspe(cand, theta_map, data, spec, grid), rel=1e-8)


def test_imspe_no_new_information_at_training_point():
    rng = np.random.default_rng(1)
    spec = KernelSpec(sim_lengthscales=[0.3, 0.8], noise_var=0.0)
    data = random_dataset(rng, 1, 4, 1, 1)
    grid = small_grid(rng, n=30)
    before = integrated_variance(np.zeros(1), data, spec, grid)
    after = imspe_value((data.sim_designs[1], data.sim_params[1]), np.zeros(1), data, spec, grid)
    assert abs(after - before) <= 10 * spec.nugget * len(grid)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_imspe_never_increases_variance(seed):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng, 1, 1)
    data = random_dataset(rng, 2, 3, 1, 1)
    grid = small_grid(rng, n=15)
    theta_map = rng.normal(size=1)
    base = integrated_variance(theta_map, data, spec, grid)
    cand = (rng.random(1), rng.normal(size=1))
    assert imspe_value(cand, theta_map, data, spec, grid) <= base + 1e-8


def test_imspe_single_pick_is_exhaustive_argmin():
    rng = np.random.default_rng(2)
    spec = random_spec(rng, 1, 1)
    data = random_dataset(rng, 2, 3, 1, 1)
    grid = small_grid(rng, n=25)
    theta_map = np.array([0.3])
    vals = [imspe_value((x, t), theta_map, data, spec, grid) for x, t in zip(grid.designs, grid.params)]
    b = imspe_select(1, theta_map, data, spec, grid)
    assert np.array_equal(b.designs[0], grid.designs[int(np.argmin(vals))])


def test_symmetric_tie_goes_to_lowest_index():
    spec = KernelSpec(sim_lengthscales=[0.3, np.inf])
    data = CalibrationDataset(np.zeros((0, 1)), [], [[0.5]], [[0.0]], [0.0], dim_theta=1)
    grid = CandidateGrid([[0.2], [0.8], [0.5]], [[0.0], [0.0], [0.0]])
    # candidates 0 and 1 mirror each other about the datum; the datum itself is uninformative
    d = d_optimal_select(1, np.zeros(1), data, spec, grid)
    assert d.designs[0, 0] == 0.2
    grid = CandidateGrid([[0.8], [0.2], [0.5], [0.0], [1.0]], np.zeros((5, 1)))
    b = imspe_select(1, np.zeros(1), data, spec, grid)
    assert b.designs[0, 0] == 0.8


def test_imspe_selected_variance_drops_below_others():
    spec = KernelSpec(sim_lengthscales=[0.15, np.inf], noise_var=0.0)
    data = CalibrationDataset(np.zeros((0, 1)), [], [[0.1]], [[0.0]], [0.0], dim_theta=1)
    xs = np.linspace(0, 1, 21)[:, None]
    grid = CandidateGrid(xs, np.zeros((21, 1)))
    b = imspe_select(1, np.zeros(1), data, spec, grid)
    after = data.append(b.designs, b.params, [0.0])
    var = _FixedPosterior(after, spec, np.zeros(1)).variance(xs, np.zeros((21, 1))).numpy()
    i = int(np.flatnonzero(xs[:, 0] == b.designs[0, 0])[0])
    assert np.all(var[i] < np.delete(var, i))


def test_d_optimal_without_data_ties_to_first():
    rng = np.random.default_rng(0)
    spec = KernelSpec(sim_lengthscales=[0.4, 0.4])
    empty = CalibrationDataset(np.zeros((0, 1)), [], dim_theta=1)
    grid = small_grid(rng, n=10)
    assert d_optimal_pick(np.zeros(1), empty, spec, grid) == 0


def test_d_optimal_avoids_observed_point():
    rng = np.random.default_rng(3)
    spec = KernelSpec(sim_lengthscales=[0.2, 0.5], noise_var=0.0)
    grid = small_grid(rng, n=20)
    data = CalibrationDataset(np.zeros((0, 1)), [], grid.designs[:1], grid.params[:1], [0.4], dim_theta=1)
    for _ in range(3):
        assert d_optimal_pick(np.zeros(1), data, spec, grid) != 0


def test_d_optimal_matches_exhaustive_scan():
    rng = np.random.default_rng(4)
    spec = random_spec(rng, 1, 1)
    data = random_dataset(rng, 2, 4, 1, 1)
    grid = small_grid(rng, n=30)
    p = spec.to_dict()
    ts = np.array([0.2])
    train = [(x, ts, 1) for x in data.real_designs] + [(x, t, 0) for x, t in zip(data.sim_designs, data.sim_params)]
    var = [schur_predict(train, np.zeros(len(train)), [(x, t, 0)], p)[1][0, 0]
           for x, t in zip(grid.designs, grid.params)]
    assert d_optimal_pick(ts, data, spec, grid) == int(np.argmax(var))


@pytest.mark.parametrize("select", [imspe_select, d_optimal_select])
def test_batch_equals_iterated_single_picks(select):
    rng = np.random.default_rng(5)
    spec = random_spec(rng, 1, 1)
    data = random_dataset(rng, 2, 3, 1, 1)
    grid = small_grid(rng, n=30)
    tm = np.array([0.1])
    batch = select(3, tm, data, spec, grid)
    d = data
    for i in range(3):
        one = select(1, tm, d, spec, grid)
        assert np.array_equal(one.designs[0], batch.designs[i])
        d = d.append(one.designs, one.params, [0.0])
    on_grid = [np.any(np.all(grid.designs == x, axis=1) & np.all(grid.params == t, axis=1))
               for x, t in zip(batch.designs, batch.params)]
    assert all(on_grid)


def test_grid_build():
    rng = np.random.default_rng(0)
    box = Box([0, 0], [2, 1])
    g = CandidateGrid.build(box, Prior.standard_normal(2), rng, max_points=500)
    assert len(g) == 500 and np.all(box.contains(g.designs))
    g = CandidateGrid.build(Box.unit(1), Prior.standard_normal(1), rng, n_params=8)
    assert len(g) == 16 * 8
    with pytest.raises(ValueError):
        imspe_select(4, np.zeros(1), random_dataset(rng, 1, 1, 1, 1), KernelSpec(sim_lengthscales=[1, 1]),
                     CandidateGrid(np.zeros((3, 1)), np.zeros((3, 1))))
