import numpy as np
import pytest

from bmfal.gaussian import ContractError
from bmfal.optimize import DomainBox, OptimizerConfig, OptimizerFailure, maximize, start_points

BOX = DomainBox([0.0, 0.0], [1.0, 1.0])


def quad(c):
    c = np.asarray(c)
    return lambda x: -float(np.sum((x - c) ** 2))


def two_bumps(x):
    x = np.atleast_2d(x)
    tall = np.exp(-np.sum((x - [0.75, 0.8]) ** 2, axis=1) / (2 * 0.15**2))
    short = 0.7 * np.exp(-np.sum((x - [0.25, 0.3]) ** 2, axis=1) / (2 * 0.15**2))
    return tall + short


def test_domain_box_contract():
    with pytest.raises(ContractError):
        DomainBox([0.0, 1.0], [1.0, 1.0])
    np.testing.assert_array_equal(BOX.center, [0.5, 0.5])
    np.testing.assert_array_equal(BOX.clip([-1.0, 2.0]), [0.0, 1.0])


def test_interior_quadratic():
    x, v = maximize(quad([0.3, 0.7]), BOX, OptimizerConfig(restarts=3))
    np.testing.assert_allclose(x, [0.3, 0.7], atol=1e-5)
    assert v == pytest.approx(0.0, abs=1e-9)


def test_exterior_quadratic_clips():
    x, _ = maximize(quad([1.4, -0.2]), BOX, OptimizerConfig(restarts=3))
    np.testing.assert_allclose(x, [1.0, 0.0], atol=1e-8)
    assert BOX.contains(x)


def test_value_at_least_best_start_and_in_box():
    cfg = OptimizerConfig(restarts=5, max_iters=2, seed=4)
    x, v = maximize(two_bumps, BOX, cfg, vectorized=True)
    assert BOX.contains(x)
    assert v == pytest.approx(two_bumps(x)[0])
    assert v >= two_bumps(start_points(BOX, cfg)).max()


def test_multimodal_taller_mode_found():
    g = np.linspace(0, 1, 201)
    grid = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
    top = grid[np.argmax(two_bumps(grid))]
    hits = 0
    for seed in range(100):
        x, _ = maximize(two_bumps, BOX, OptimizerConfig(restarts=10, seed=seed), vectorized=True)
        hits += np.linalg.norm(x - top) < 0.02
    assert hits >= 95


def test_restarts_are_nested_and_monotone():
    a = start_points(BOX, OptimizerConfig(restarts=4, seed=2))
    b = start_points(BOX, OptimizerConfig(restarts=9, seed=2))
    np.testing.assert_array_equal(a, b[:4])
    vals = [maximize(two_bumps, BOX, OptimizerConfig(restarts=r, seed=2), vectorized=True)[1]
            for r in (1, 3, 6, 10)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_deterministic():
    cfg = OptimizerConfig(restarts=4, seed=7)
    assert maximize(two_bumps, BOX, cfg, vectorized=True)[1] == maximize(two_bumps, BOX, cfg,
                                                                         vectorized=True)[1]


def test_scalar_and_vectorized_agree():
    cfg = OptimizerConfig(restarts=3, seed=1)
    xs, vs = maximize(lambda x: float(two_bumps(x)[0]), BOX, cfg)
    xv, vv = maximize(two_bumps, BOX, cfg, vectorized=True)
    np.testing.assert_allclose(xs, xv)
    assert vs == vv


def test_mostly_nonfinite_objective_fails():
    with pytest.raises(OptimizerFailure):
        maximize(lambda x: np.nan, BOX, OptimizerConfig(restarts=3))
