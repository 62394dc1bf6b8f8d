"""Discrete probability measures and couplings.

Everything downstream (solvers, tilting, samplers, metrics) consumes the
two value types defined here:

* :class:`DiscreteMeasure` -- a weighted point cloud (``particle`` mode) or
  a box-aligned density grid (``grid`` mode, midpoint quadrature).
* :class:`Coupling` -- a joint measure over pairs, either a weighted pair
  cloud or a dense weight matrix over two supports.

Values are immutable after construction (arrays are frozen) and weight
vectors are renormalized on construction when they are off by more than
``NORMALIZATION_TOL``.  All reductions use numpy's fixed left-to-right
order, so results are bit-reproducible regardless of thread count.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ShapeMismatch, ZeroMass

NORMALIZATION_TOL = 1e-12


@dataclass(frozen=True)
class Seed:
    """Reproducible RNG handle: same (seed, stream) gives identical draws."""

    seed: int
    stream: int = 0

    def rng(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream,))
        return np.random.default_rng(ss)

    def child(self, stream: int) -> "Seed":
        return Seed(self.seed, stream)


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.flags.writeable = False
    return a


def _normalized(weights: np.ndarray) -> np.ndarray:
    weights = np.asarray(weights, dtype=float)
    if weights.size == 0:
        raise ZeroMass("empty weight vector")
    if np.any(weights < 0):
        raise ZeroMass("negative weights")
    total = float(np.sum(weights))
    if not np.isfinite(total) or total <= 0.0:
        raise ZeroMass(f"total weight {total!r} is not a positive finite number")
    if abs(total - 1.0) > NORMALIZATION_TOL:
        weights = weights / total
    return weights


def grid_points(bounds: np.ndarray, resolution: int) -> np.ndarray:
    """Cell centers of a regular grid over an axis-aligned box.

    Row-major (``ij``) ordering; returns an array of shape
    ``(resolution**d, d)``.
    """
    bounds = np.asarray(bounds, dtype=float).reshape(-1, 2)
    axes = [
        lo + (hi - lo) * (np.arange(resolution) + 0.5) / resolution
        for lo, hi in bounds
    ]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


@dataclass(frozen=True)
class DiscreteMeasure:
    """Weighted point cloud or grid density.

    Parameters
    ----------
    points : (n, d) array
        Atom locations; for grid mode these are the cell centers in
        row-major order.
    weights : (n,) array
        Nonnegative masses summing to one (renormalized on construction).
    mode : {"particle", "grid"}
    bounds : (d, 2) array, grid mode only
    resolution : int, grid mode only
        Bins per axis; ``n == resolution**d``.
    """

    points: np.ndarray
    weights: np.ndarray
    mode: str = "particle"
    bounds: np.ndarray | None = None
    resolution: int | None = None

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float)
        if points.ndim == 1:
            points = points[:, None]
        weights = _normalized(self.weights)
        if points.shape[0] != weights.shape[0]:
            raise ShapeMismatch(
                f"{points.shape[0]} points vs {weights.shape[0]} weights"
            )
        if self.mode not in ("particle", "grid"):
            raise ShapeMismatch(f"unknown mode {self.mode!r}")
        if self.mode == "grid":
            if self.bounds is None or self.resolution is None:
                raise ShapeMismatch("grid mode requires bounds and resolution")
            bounds = np.asarray(self.bounds, dtype=float).reshape(-1, 2)
            if points.shape[0] != self.resolution ** bounds.shape[0]:
                raise ShapeMismatch("grid weights do not match resolution**d")
            object.__setattr__(self, "bounds", _freeze(bounds))
        object.__setattr__(self, "points", _freeze(points))
        object.__setattr__(self, "weights", _freeze(weights))

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def cell_width(self) -> np.ndarray:
        if self.mode != "grid":
            raise ShapeMismatch("cell_width is grid-mode only")
        return (self.bounds[:, 1] - self.bounds[:, 0]) / self.resolution

    def with_weights(self, weights) -> "DiscreteMeasure":
        return replace(self, weights=np.asarray(weights, dtype=float))


def grid_measure(bounds, resolution: int, weights) -> DiscreteMeasure:
    """Construct a grid-mode measure from a (possibly multi-d) weight array."""
    bounds = np.asarray(bounds, dtype=float).reshape(-1, 2)
    w = np.asarray(weights, dtype=float).ravel()
    return DiscreteMeasure(
        points=grid_points(bounds, resolution),
        weights=w,
        mode="grid",
        bounds=bounds,
        resolution=resolution,
    )


@dataclass(frozen=True)
class GridSide:
    """Grid metadata for one side of a grid-mode coupling."""

    bounds: np.ndarray
    resolution: int

    def __post_init__(self):
        object.__setattr__(
            self, "bounds", _freeze(np.asarray(self.bounds, dtype=float).reshape(-1, 2))
        )


@dataclass(frozen=True)
class Coupling:
    """Joint measure over X x Y.

    Particle mode: ``x`` and ``y`` are (n, d) pair coordinates with a flat
    weight vector.  Grid mode: ``x``/``y`` are the two supports and
    ``weights`` is an (nx, ny) matrix.
    """

    x: np.ndarray
    y: np.ndarray
    weights: np.ndarray
    mode: str = "particle"
    epsilon_hint: float | None = None
    x_grid: GridSide | None = None
    y_grid: GridSide | None = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if y.ndim == 1:
            y = y[:, None]
        w = np.asarray(self.weights, dtype=float)
        if self.mode == "particle":
            if w.ndim != 1 or x.shape != y.shape or x.shape[0] != w.shape[0]:
                raise ShapeMismatch("particle coupling needs matching (n,d) pairs")
        elif self.mode == "grid":
            if w.ndim != 2 or w.shape != (x.shape[0], y.shape[0]):
                raise ShapeMismatch("grid coupling needs an (nx, ny) weight matrix")
        else:
            raise ShapeMismatch(f"unknown mode {self.mode!r}")
        w = _normalized(w.ravel()).reshape(w.shape)
        object.__setattr__(self, "x", _freeze(x))
        object.__setattr__(self, "y", _freeze(y))
        object.__setattr__(self, "weights", _freeze(w))

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def n_pairs(self) -> int:
        return self.weights.size

    def pair_weights(self) -> np.ndarray:
        """Weights as a flat vector (row-major for grid mode)."""
        return self.weights.ravel()

    def with_weights(self, weights) -> "Coupling":
        w = np.asarray(weights, dtype=float).reshape(self.weights.shape)
        return replace(self, weights=w)


def normalize(m):
    """Return a copy with weights rescaled to sum to one.

    Idempotent; raises :class:`ZeroMass` when the total is not a positive
    finite number.  Works for measures and couplings alike.
    """
    return m.with_weights(_normalized(np.asarray(m.weights, dtype=float).ravel()).reshape(np.shape(m.weights)))


def marginals(c: Coupling) -> tuple[DiscreteMeasure, DiscreteMeasure]:
    """X- and Y-marginals of a coupling, each normalized.

    Grid-mode couplings with grid metadata return grid-mode marginals.
    """
    if c.mode == "particle":
        mx = DiscreteMeasure(c.x, c.weights)
        my = DiscreteMeasure(c.y, c.weights)
        return mx, my
    wx = c.weights.sum(axis=1)
    wy = c.weights.sum(axis=0)
    if c.x_grid is not None:
        mx = DiscreteMeasure(c.x, wx, mode="grid", bounds=c.x_grid.bounds,
                             resolution=c.x_grid.resolution)
    else:
        mx = DiscreteMeasure(c.x, wx)
    if c.y_grid is not None:
        my = DiscreteMeasure(c.y, wy, mode="grid", bounds=c.y_grid.bounds,
                             resolution=c.y_grid.resolution)
    else:
        my = DiscreteMeasure(c.y, wy)
    return mx, my


def _check_same_support(a, b):
    wa = np.asarray(a.weights)
    wb = np.asarray(b.weights)
    if wa.shape != wb.shape:
        raise ShapeMismatch(f"weight shapes differ: {wa.shape} vs {wb.shape}")
    if isinstance(a, Coupling) != isinstance(b, Coupling):
        raise ShapeMismatch("cannot compare a coupling with a measure")
    if isinstance(a, Coupling):
        ok = np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
    else:
        ok = np.array_equal(a.points, b.points)
    if not ok:
        raise ShapeMismatch("supports differ")


def tv_distance(a, b) -> float:
    """Total variation distance ``0.5 * sum |w_a - w_b|`` on a shared support."""
    _check_same_support(a, b)
    return 0.5 * float(np.abs(np.asarray(a.weights).ravel() - np.asarray(b.weights).ravel()).sum())


def ess(weights) -> float:
    """Effective sample size ``1 / sum w_i**2`` of normalized weights."""
    w = np.asarray(weights, dtype=float).ravel()
    if w.size == 0:
        raise ZeroMass("empty weight vector")
    return 1.0 / float(np.sum(w * w))


def sample(m: DiscreteMeasure, n: int, seed) -> np.ndarray:
    """Draw ``n`` i.i.d. points from the measure.

    Particle mode returns atom copies; grid mode jitters uniformly within
    the selected cell.  Deterministic under the seed.
    """
    if n < 1:
        raise ZeroMass("need n >= 1 draws")
    rng = seed.rng() if isinstance(seed, Seed) else Seed(int(seed)).rng()
    idx = rng.choice(m.n, size=n, p=m.weights)
    pts = m.points[idx].copy()
    if m.mode == "grid":
        width = m.cell_width()
        pts += (rng.random((n, m.dim)) - 0.5) * width
    return pts


# ---------------------------------------------------------------------------
# JSON interchange
# ---------------------------------------------------------------------------

def measure_to_json(m: DiscreteMeasure) -> dict:
    doc = {"mode": m.mode, "dim": m.dim}
    if m.mode == "grid":
        shape = (m.resolution,) * m.dim
        doc["grid"] = np.asarray(m.weights).reshape(shape).tolist()
        doc["bounds"] = m.bounds.tolist()
        doc["resolution"] = m.resolution
    else:
        doc["points"] = m.points.tolist()
        doc["weights"] = m.weights.tolist()
    return doc


def measure_from_json(doc: dict) -> DiscreteMeasure:
    mode = doc["mode"]
    if mode == "grid":
        return grid_measure(doc["bounds"], int(doc["resolution"]), np.asarray(doc["grid"]))
    pts = np.asarray(doc["points"], dtype=float)
    return DiscreteMeasure(pts, np.asarray(doc["weights"], dtype=float))


def coupling_to_json(c: Coupling, extra: dict | None = None) -> dict:
    doc = {"mode": c.mode, "dim": c.dim, "epsilon_hint": c.epsilon_hint}
    if c.mode == "particle":
        doc["pairs_x"] = c.x.tolist()
        doc["pairs_y"] = c.y.tolist()
        doc["weights"] = c.weights.tolist()
    else:
        doc["x_support"] = c.x.tolist()
        doc["y_support"] = c.y.tolist()
        doc["grid"] = c.weights.tolist()
        if c.x_grid is not None:
            doc["x_bounds"] = c.x_grid.bounds.tolist()
            doc["x_resolution"] = c.x_grid.resolution
        if c.y_grid is not None:
            doc["y_bounds"] = c.y_grid.bounds.tolist()
            doc["y_resolution"] = c.y_grid.resolution
    if extra:
        doc.update(extra)
    return doc


def coupling_from_json(doc: dict) -> Coupling:
    eps = doc.get("epsilon_hint")
    if doc["mode"] == "particle":
        return Coupling(
            np.asarray(doc["pairs_x"], dtype=float),
            np.asarray(doc["pairs_y"], dtype=float),
            np.asarray(doc["weights"], dtype=float),
            epsilon_hint=eps,
        )
    x_grid = y_grid = None
    if "x_bounds" in doc:
        x_grid = GridSide(np.asarray(doc["x_bounds"]), int(doc["x_resolution"]))
    if "y_bounds" in doc:
        y_grid = GridSide(np.asarray(doc["y_bounds"]), int(doc["y_resolution"]))
    return Coupling(
        np.asarray(doc["x_support"], dtype=float),
        np.asarray(doc["y_support"], dtype=float),
        np.asarray(doc["grid"], dtype=float),
        mode="grid",
        epsilon_hint=eps,
        x_grid=x_grid,
        y_grid=y_grid,
    )


def save_json(obj, path):
    path = Path(path)
    if isinstance(obj, DiscreteMeasure):
        doc = measure_to_json(obj)
    elif isinstance(obj, Coupling):
        doc = coupling_to_json(obj)
    else:
        doc = obj
    path.write_text(json.dumps(doc))


def load_measure(path) -> DiscreteMeasure:
    return measure_from_json(json.loads(Path(path).read_text()))


def load_coupling(path) -> Coupling:
    return coupling_from_json(json.loads(Path(path).read_text()))
