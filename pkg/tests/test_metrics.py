import numpy as np
import pytest

from taco.errors import DimensionMismatch, NoGroundTruth
from taco.geometry import TaskSpec, apply_map, make_task
from taco.measures import Seed
from taco.metrics import (
    MetricConfig,
    energy_distance,
    map_rmse,
    mmd_rbf,
    sliced_wasserstein,
)


class TestSlicedWasserstein:
    def test_identical_samples_zero(self):
        rng = np.random.default_rng(0)
        p = rng.normal(size=(50, 2))
        assert sliced_wasserstein(p, p.copy()) == pytest.approx(0.0, abs=1e-12)

    def test_1d_atoms(self):
        p = np.zeros((1, 1))
        q = np.ones((1, 1))
        for order in (1, 2):
            assert sliced_wasserstein(p, q, order=order) == pytest.approx(1.0)

    def test_2d_atoms_analytic(self):
        # SW2 between atoms distance 1 apart: sqrt(E cos^2) = 1/sqrt(2)
        p = np.zeros((1, 2))
        q = np.array([[1.0, 0.0]])
        cfg = MetricConfig(n_projections=4096, seed=Seed(3))
        val = sliced_wasserstein(p, q, order=2, cfg=cfg)
        assert abs(val - 1.0 / np.sqrt(2.0)) < 0.02

    def test_deterministic_under_seed(self):
        rng = np.random.default_rng(1)
        p = rng.normal(size=(30, 3))
        q = rng.normal(size=(40, 3)) + 0.5
        cfg = MetricConfig(seed=Seed(7))
        assert sliced_wasserstein(p, q, cfg=cfg) == sliced_wasserstein(p, q, cfg=cfg)

    def test_unequal_counts_quantile_path(self):
        rng = np.random.default_rng(2)
        p = rng.normal(size=(800, 1))
        q = rng.normal(size=(1200, 1))
        assert sliced_wasserstein(p, q) < 0.15

    def test_order_monotonicity(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            p = rng.normal(size=(64, 2))
            q = rng.normal(size=(64, 2)) + rng.normal() * 0.5
            cfg = MetricConfig(seed=Seed(11))
            sw1 = sliced_wasserstein(p, q, 1, cfg)
            sw2 = sliced_wasserstein(p, q, 2, cfg)
            assert sw1 <= sw2 + 1e-12

    def test_symmetry(self):
        rng = np.random.default_rng(4)
        p = rng.normal(size=(20, 2))
        q = rng.normal(size=(20, 2)) + 1
        cfg = MetricConfig(seed=Seed(5))
        assert sliced_wasserstein(p, q, cfg=cfg) == pytest.approx(
            sliced_wasserstein(q, p, cfg=cfg), abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            sliced_wasserstein(np.zeros((4, 2)), np.zeros((4, 3)))


class TestMMD:
    def test_identical_sets_biased_zero(self):
        rng = np.random.default_rng(5)
        p = rng.normal(size=(40, 2))
        assert mmd_rbf(p, p.copy(), unbiased=False) == pytest.approx(0.0, abs=1e-9)

    def test_identical_sets_unbiased_small(self):
        rng = np.random.default_rng(6)
        p = rng.normal(size=(200, 2))
        assert mmd_rbf(p, p.copy()) < 1e-6

    def test_two_atom_closed_form(self):
        d = 1.5
        h = 0.8
        p = np.zeros((1, 1))
        q = np.full((1, 1), d)
        cfg = MetricConfig(mmd_bandwidth=h)
        expect = np.sqrt(2.0 * (1.0 - np.exp(-d * d / (2 * h * h))))
        assert mmd_rbf(p, q, cfg) == pytest.approx(expect, abs=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(7)
        p = rng.normal(size=(30, 2))
        q = rng.normal(size=(25, 2)) + 0.3
        assert mmd_rbf(p, q) == pytest.approx(mmd_rbf(q, p), abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            mmd_rbf(np.zeros((4, 1)), np.zeros((4, 2)))


class TestEnergyDistance:
    def test_identical_sets_zero(self):
        rng = np.random.default_rng(8)
        p = rng.normal(size=(50, 3))
        assert energy_distance(p, p.copy()) == pytest.approx(0.0, abs=1e-12)

    def test_two_atoms(self):
        p = np.zeros((1, 2))
        q = np.array([[3.0, 4.0]])  # distance 5
        assert energy_distance(p, q) == pytest.approx(10.0)

    def test_nonnegative_random_pairs(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            n, m = rng.integers(2, 20, size=2)
            p = rng.normal(size=(n, 2))
            q = rng.normal(size=(m, 2)) + rng.normal()
            assert energy_distance(p, q) >= -1e-12

    def test_symmetry(self):
        rng = np.random.default_rng(10)
        p = rng.normal(size=(15, 2))
        q = rng.normal(size=(10, 2))
        assert energy_distance(p, q) == pytest.approx(energy_distance(q, p))


class TestMapRmse:
    def _task(self):
        return make_task(TaskSpec("simple", 64, 64, Seed(0)))

    def test_exact_outputs_zero(self):
        task = self._task()
        src = task.mu_new.points[:32]
        assert map_rmse(src, apply_map(task, src), task) == 0.0

    def test_constant_offset(self):
        task = self._task()
        src = task.mu_new.points[:32]
        v = np.array([0.3, -0.4])  # norm 0.5
        out = apply_map(task, src) + v
        assert map_rmse(src, out, task) == pytest.approx(0.5)

    def test_two_point_hand_value(self):
        task = self._task()
        src = np.array([[1.0, 0.0], [0.0, 1.0]])
        out = np.array([[-1.0, 0.0], [0.0, -1.0 + 2.0]])  # errors 0 and 2
        assert map_rmse(src, out, task) == pytest.approx(np.sqrt(2.0))

    def test_no_ground_truth(self):
        task = make_task(TaskSpec("moon", 64, 64, Seed(0)))
        with pytest.raises(NoGroundTruth):
            map_rmse(np.zeros((2, 2)), np.zeros((2, 2)), task)


def test_config_validation():
    with pytest.raises(ValueError):
        MetricConfig(n_projections=4)
    with pytest.raises(ValueError):
        MetricConfig(mmd_bandwidth="nope")
