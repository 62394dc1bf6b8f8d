import json

import numpy as np
import pytest

from taco.errors import ShapeMismatch, ZeroMass
from taco.measures import (
    Coupling,
    DiscreteMeasure,
    Seed,
    coupling_from_json,
    coupling_to_json,
    ess,
    grid_measure,
    load_measure,
    marginals,
    normalize,
    sample,
    save_json,
    tv_distance,
)


def make_particles(weights, d=2):
    n = len(weights)
    pts = np.arange(n * d, dtype=float).reshape(n, d)
    return DiscreteMeasure(pts, np.asarray(weights, dtype=float))


class TestNormalize:
    def test_uniform_rescale(self):
        m = make_particles([2.0, 2.0])
        assert np.allclose(m.weights, [0.5, 0.5])

    def test_single_atom(self):
        m = make_particles([1.0], d=1)
        assert np.allclose(m.weights, [1.0])

    def test_idempotent_keeps_bits(self):
        w = np.array([0.3, 0.1, 0.6])
        m = make_particles(w)
        m2 = normalize(m)
        assert np.array_equal(m.weights, w)
        assert np.array_equal(m2.weights, m.weights)

    def test_zero_mass(self):
        with pytest.raises(ZeroMass):
            make_particles([0.0, 0.0])

    def test_negative(self):
        with pytest.raises(ZeroMass):
            make_particles([1.0, -0.5])

    def test_nonfinite(self):
        with pytest.raises(ZeroMass):
            make_particles([1.0, np.inf])


class TestMarginals:
    def test_product_grid(self):
        wx = np.array([0.25, 0.75])
        wy = np.array([0.4, 0.6])
        c = Coupling(
            np.array([[0.0], [1.0]]),
            np.array([[0.0], [1.0]]),
            wx[:, None] * wy[None, :],
            mode="grid",
        )
        mx, my = marginals(c)
        assert np.allclose(mx.weights, wx)
        assert np.allclose(my.weights, wy)

    def test_single_pair_atom(self):
        c = Coupling(np.array([[1.0, 2.0]]), np.array([[3.0, 4.0]]), np.array([1.0]))
        mx, my = marginals(c)
        assert np.allclose(mx.points, [[1.0, 2.0]]) and np.allclose(mx.weights, [1.0])
        assert np.allclose(my.points, [[3.0, 4.0]]) and np.allclose(my.weights, [1.0])

    def test_2x2_hand_oracle(self):
        # row/column sums computed by hand
        c = Coupling(
            np.array([[0.0], [1.0]]),
            np.array([[0.0], [1.0]]),
            np.array([[0.1, 0.2], [0.3, 0.4]]),
            mode="grid",
        )
        mx, my = marginals(c)
        assert np.allclose(mx.weights, [0.3, 0.7])
        assert np.allclose(my.weights, [0.4, 0.6])


class TestTV:
    def test_identical(self):
        m = make_particles([0.5, 0.5])
        assert tv_distance(m, m) == 0.0

    def test_disjoint_atoms(self):
        pts = np.array([[0.0], [1.0]])
        a = DiscreteMeasure(pts, [1.0, 0.0])
        b = DiscreteMeasure(pts, [0.0, 1.0])
        assert tv_distance(a, b) == pytest.approx(1.0)

    def test_half_l1_hand_oracle(self):
        pts = np.array([[0.0], [1.0]])
        a = DiscreteMeasure(pts, [0.5, 0.5])
        b = DiscreteMeasure(pts, [0.7, 0.3])
        assert tv_distance(a, b) == pytest.approx(0.2)

    def test_support_mismatch(self):
        a = make_particles([0.5, 0.5])
        b = DiscreteMeasure(np.ones((2, 2)), [0.5, 0.5])
        with pytest.raises(ShapeMismatch):
            tv_distance(a, b)

    def test_metric_properties_random_grids(self):
        rng = np.random.default_rng(7)
        pts = np.arange(6, dtype=float)[:, None]
        for _ in range(50):
            wa = rng.dirichlet(np.ones(6))
            wb = rng.dirichlet(np.ones(6))
            wc = rng.dirichlet(np.ones(6))
            a, b, c = (DiscreteMeasure(pts, w) for w in (wa, wb, wc))
            assert tv_distance(a, b) == pytest.approx(tv_distance(b, a))
            assert tv_distance(a, c) <= tv_distance(a, b) + tv_distance(b, c) + 1e-15
            assert 0.0 <= tv_distance(a, b) <= 1.0
        assert tv_distance(a, a) == 0.0


class TestEss:
    def test_uniform(self):
        n = 17
        assert ess(np.full(n, 1.0 / n)) == pytest.approx(n)

    def test_degenerate(self):
        assert ess([1.0, 0.0, 0.0]) == pytest.approx(1.0)

    def test_analytic(self):
        assert ess([0.5, 0.5, 0.0]) == pytest.approx(2.0)

    def test_empty(self):
        with pytest.raises(ZeroMass):
            ess([])

    def test_range(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            n = rng.integers(1, 40)
            w = rng.dirichlet(np.ones(n))
            assert 1.0 - 1e-12 <= ess(w) <= n + 1e-9


class TestSample:
    def test_atom(self):
        m = DiscreteMeasure(np.array([[2.0, -1.0]]), [1.0])
        pts = sample(m, 5, Seed(0))
        assert np.allclose(pts, np.array([[2.0, -1.0]] * 5))

    def test_determinism(self):
        m = make_particles([0.3, 0.7])
        a = sample(m, 100, Seed(42, 1))
        b = sample(m, 100, Seed(42, 1))
        assert np.array_equal(a, b)

    def test_law_of_large_numbers(self):
        pts = np.array([[0.0], [1.0]])
        m = DiscreteMeasure(pts, [0.5, 0.5])
        draws = sample(m, 100_000, Seed(5))
        freq = np.mean(draws[:, 0] > 0.5)
        assert abs(freq - 0.5) < 0.01

    def test_grid_jitter_stays_in_cells(self):
        g = grid_measure([[0.0, 1.0]], 4, np.ones(4))
        pts = sample(g, 500, Seed(9))
        assert np.all(pts >= 0.0) and np.all(pts <= 1.0)


class TestGrid:
    def test_cell_centers_1d(self):
        g = grid_measure([[0.0, 1.0]], 4, np.ones(4))
        assert np.allclose(g.points[:, 0], [0.125, 0.375, 0.625, 0.875])

    def test_resolution_invariant(self):
        with pytest.raises(ShapeMismatch):
            DiscreteMeasure(
                np.zeros((3, 1)), np.ones(3), mode="grid",
                bounds=np.array([[0.0, 1.0]]), resolution=4,
            )

    def test_2d_count(self):
        g = grid_measure([[0, 1], [0, 1]], 5, np.ones(25))
        assert g.n == 25 and g.dim == 2


class TestJson:
    def test_measure_roundtrip(self, tmp_path):
        m = make_particles([0.25, 0.75])
        p = tmp_path / "m.json"
        save_json(m, p)
        m2 = load_measure(p)
        assert np.allclose(m2.points, m.points)
        assert np.allclose(m2.weights, m.weights)

    def test_grid_roundtrip(self, tmp_path):
        g = grid_measure([[0, 2], [0, 2]], 3, np.arange(1.0, 10.0))
        p = tmp_path / "g.json"
        save_json(g, p)
        g2 = load_measure(p)
        assert g2.mode == "grid" and g2.resolution == 3
        assert np.allclose(g2.weights, g.weights)
        assert np.allclose(g2.points, g.points)

    def test_coupling_roundtrip(self):
        c = Coupling(np.zeros((2, 2)), np.ones((2, 2)), [0.5, 0.5], epsilon_hint=0.3)
        doc = json.loads(json.dumps(coupling_to_json(c)))
        c2 = coupling_from_json(doc)
        assert c2.epsilon_hint == pytest.approx(0.3)
        assert np.allclose(c2.weights, c.weights)

    def test_loader_validates(self):
        with pytest.raises(ZeroMass):
            coupling_from_json(
                {"mode": "particle", "dim": 1, "pairs_x": [[0.0]],
                 "pairs_y": [[1.0]], "weights": [0.0]}
            )


def test_marginals_commute_with_normalize():
    rng = np.random.default_rng(11)
    w = rng.random((4, 3)) + 0.1
    c = Coupling(np.arange(4.0)[:, None], np.arange(3.0)[:, None], w, mode="grid")
    mx, my = marginals(c)
    assert mx.weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert my.weights.sum() == pytest.approx(1.0, abs=1e-12)


def test_immutability():
    m = make_particles([0.5, 0.5])
    with pytest.raises(ValueError):
        m.weights[0] = 0.9
    with pytest.raises(ValueError):
        m.points[0, 0] = 99.0
