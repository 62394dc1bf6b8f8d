"""Synthetic task zoo: reference couplings, new marginals, ground-truth maps.

Each task fixes a latent transport rule.  The reference coupling exposes
that rule only through paired samples (x', T(x') + noise); the new
marginals are placed elsewhere so that transferring the rule requires
genuine generalization.  Grid variants rasterize the same geometry onto a
regular grid with strictly positive (floored) densities so that exact TV
and conditional expectations are available for theory validation.

Non-paper parameter choices (moon crescent shape, blob widths, the 1D
grid mixtures) are fixed here and documented in the README.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import AlreadyPerturbed, NoGroundTruth, UnknownTask
from .measures import (
    Coupling,
    DiscreteMeasure,
    GridSide,
    Seed,
    grid_measure,
    grid_points,
    marginals,
)
from .sinkhorn import CostSpec

TASK_NAMES = (
    "simple",
    "medium",
    "complex",
    "moon",
    "circle",
    "radial_warp",
    "polar_twist",
    "gaussian_1d_grid",
)

REFERENCE_BLOB_STD = 0.5
COUPLING_NOISE_STD = 0.1


@dataclass(frozen=True)
class TaskSpec:
    name: str
    n_reference: int = 4096
    n_new: int = 4096
    seed: Seed = Seed(0)
    perturbed: bool = False

    def __post_init__(self):
        if self.name not in TASK_NAMES:
            raise UnknownTask(f"unknown task {self.name!r}; choose from {TASK_NAMES}")
        if self.n_reference < 2 or self.n_new < 2:
            raise UnknownTask("sample counts must be >= 2")


@dataclass(frozen=True)
class TaskData:
    spec: TaskSpec
    reference_coupling: Coupling
    mu_new: DiscreteMeasure
    nu_new: DiscreteMeasure
    ground_truth_map: object | None = None
    map_name: str | None = None
    cost_fn: object | None = None  # latent c(x, y); oracle/test use only
    epsilon: float | None = None   # grid tasks: regularization of the reference plan


def rotation(deg: float) -> np.ndarray:
    th = math.radians(deg)
    return np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])


def _mixture_sample(rng, n, centers, std):
    """Stratified mixture draw: component counts are split exactly.

    Equal per-blob counts keep pairings between mixture clouds balanced
    (no forced cross-blob spill from multinomial count fluctuations).
    """
    centers = np.asarray(centers, dtype=float)
    k = len(centers)
    counts = np.full(k, n // k)
    counts[: n % k] += 1
    idx = np.repeat(np.arange(k), counts)
    return centers[idx] + std * rng.standard_normal((n, centers.shape[1]))


# latent maps ---------------------------------------------------------------

def _map_anticorrelation(x):
    return -x


def _map_rotation(deg):
    R = rotation(deg)
    return lambda x: x @ R.T


def _map_radial_warp(x):
    r2 = np.sum(np.atleast_2d(x) ** 2, axis=-1, keepdims=True)
    out = np.atleast_2d(x) * (1.0 + 0.5 * r2)
    return out.reshape(np.shape(x))


def _map_polar_twist(x):
    x2 = np.atleast_2d(x)
    r = np.hypot(x2[:, 0], x2[:, 1])
    th = np.arctan2(x2[:, 1], x2[:, 0]) + np.sin(r)
    out = np.stack([r * np.cos(th), r * np.sin(th)], axis=-1)
    return out.reshape(np.shape(x))


def _map_circle_split(shift=5.0, center_y=0.0):
    def f(x):
        x2 = np.atleast_2d(x)
        out = x2.copy()
        out[:, 1] += shift * np.sign(x2[:, 1] - center_y)
        return out.reshape(np.shape(x))

    return f


def _cost_from_map(T):
    def c(xs, ys):
        return np.sum((ys[None, :, :] - np.atleast_2d(T(xs))[:, None, :]) ** 2, axis=-1)

    return c


# task definitions ----------------------------------------------------------

def _mixture_params(name):
    """(reference centers/std, new centers/std, map, map_name) for blob tasks."""
    if name == "simple":
        # two-blob reference centered at the origin; new marginals pushed
        # out to the (+-10, +-10) corners
        return (
            [(1.5, 1.5), (-1.5, -1.5)], REFERENCE_BLOB_STD,
            [(10.0, 10.0), (-10.0, -10.0)], REFERENCE_BLOB_STD,
            _map_anticorrelation, "anticorrelation",
        )
    if name == "medium":
        return (
            [(-3.0, 0.0), (3.0, 0.0)], REFERENCE_BLOB_STD,
            [(5.0, 5.0), (5.0, -5.0), (-5.0, 5.0), (-5.0, -5.0)], REFERENCE_BLOB_STD,
            _map_rotation(60.0), "rotation_60",
        )
    if name == "complex":
        cross = np.array([(0.0, 0.0), (2.0, 0.0), (-2.0, 0.0), (0.0, 2.0), (0.0, -2.0)])
        return (
            cross, 0.35,
            6.7 * cross, 6.7 * 0.35,
            _map_rotation(45.0), "rotation_45",
        )
    raise UnknownTask(name)


def _make_blob_task(spec: TaskSpec) -> TaskData:
    ref_centers, ref_std, new_centers, new_std, T, map_name = _mixture_params(spec.name)
    rng_ref = spec.seed.child(0).rng()
    rng_mu = spec.seed.child(1).rng()
    rng_nu = spec.seed.child(2).rng()

    x_ref = _mixture_sample(rng_ref, spec.n_reference, ref_centers, ref_std)
    y_ref = T(x_ref) + COUPLING_NOISE_STD * rng_ref.standard_normal(x_ref.shape)
    ref = Coupling(x_ref, y_ref, np.full(spec.n_reference, 1.0 / spec.n_reference))

    mu = _mixture_sample(rng_mu, spec.n_new, new_centers, new_std)
    x_for_nu = _mixture_sample(rng_nu, spec.n_new, new_centers, new_std)
    nu = T(x_for_nu) + COUPLING_NOISE_STD * rng_nu.standard_normal(x_for_nu.shape)

    return TaskData(
        spec=spec,
        reference_coupling=ref,
        mu_new=DiscreteMeasure(mu, np.full(spec.n_new, 1.0 / spec.n_new)),
        nu_new=DiscreteMeasure(nu, np.full(spec.n_new, 1.0 / spec.n_new)),
        ground_truth_map=T,
        map_name=map_name,
        cost_fn=_cost_from_map(T),
    )


def _make_map_task(spec, ref_sampler, new_sampler, T, map_name, noise=0.05, ref_map=None):
    rng_ref = spec.seed.child(0).rng()
    rng_mu = spec.seed.child(1).rng()
    rng_nu = spec.seed.child(2).rng()
    x_ref = ref_sampler(rng_ref, spec.n_reference)
    y_ref = (ref_map or T)(x_ref) + noise * rng_ref.standard_normal(x_ref.shape)
    ref = Coupling(x_ref, y_ref, np.full(spec.n_reference, 1.0 / spec.n_reference))
    mu = new_sampler(rng_mu, spec.n_new)
    x_for_nu = new_sampler(rng_nu, spec.n_new)
    nu = T(x_for_nu) + noise * rng_nu.standard_normal(x_for_nu.shape)
    return TaskData(
        spec=spec,
        reference_coupling=ref,
        mu_new=DiscreteMeasure(mu, np.full(spec.n_new, 1.0 / spec.n_new)),
        nu_new=DiscreteMeasure(nu, np.full(spec.n_new, 1.0 / spec.n_new)),
        ground_truth_map=T,
        map_name=map_name,
        cost_fn=_cost_from_map(T),
    )


def _circle_sampler(center, radius, noise=0.05):
    center = np.asarray(center, dtype=float)

    def f(rng, n):
        th = rng.uniform(0.0, 2.0 * math.pi, size=n)
        r = radius + noise * rng.standard_normal(n)
        return center + np.stack([r * np.cos(th), r * np.sin(th)], axis=-1)

    return f


def _moon_points(rng, n, upper: bool, noise=0.07):
    th = rng.uniform(0.0, math.pi, size=n)
    if upper:
        pts = np.stack([np.cos(th), np.sin(th)], axis=-1)
    else:
        pts = np.stack([1.0 - np.cos(th), 0.5 - np.sin(th)], axis=-1)
    return pts + noise * rng.standard_normal((n, 2)), th


def _make_moon_task(spec: TaskSpec) -> TaskData:
    # Crescent parameters (radius 1, offset (1, 0.5), noise 0.07) are fixed
    # here; the source text leaves them open.
    rng_ref = spec.seed.child(0).rng()
    rng_mu = spec.seed.child(1).rng()
    rng_nu = spec.seed.child(2).rng()
    x_ref, th = _moon_points(rng_ref, spec.n_reference, upper=True)
    # reference coupling pairs points of equal arc parameter
    y_ref = np.stack([1.0 - np.cos(th), 0.5 - np.sin(th)], axis=-1)
    y_ref += 0.07 * rng_ref.standard_normal(y_ref.shape)
    ref = Coupling(x_ref, y_ref, np.full(spec.n_reference, 1.0 / spec.n_reference))

    shift = np.array([3.0, 1.0])
    mu_pts, _ = _moon_points(rng_mu, spec.n_new, upper=True)
    nu_pts, _ = _moon_points(rng_nu, spec.n_new, upper=False)
    mu_pts = 2.0 * mu_pts + shift
    nu_pts = 2.0 * nu_pts + shift
    return TaskData(
        spec=spec,
        reference_coupling=ref,
        mu_new=DiscreteMeasure(mu_pts, np.full(spec.n_new, 1.0 / spec.n_new)),
        nu_new=DiscreteMeasure(nu_pts, np.full(spec.n_new, 1.0 / spec.n_new)),
        ground_truth_map=None,
        map_name=None,
        cost_fn=None,
    )


# 1D grid task ---------------------------------------------------------------

GRID_1D_BOUNDS = (-3.0, 3.0)
GRID_1D_EPSILON = 0.5
GRID_FLOOR = 1e-4  # uniform mass fraction mixed in to keep densities positive


def _gauss_mix_density(points, comps):
    x = points[:, 0]
    out = np.zeros_like(x)
    for w, m, s in comps:
        out += w * np.exp(-0.5 * ((x - m) / s) ** 2) / s
    return out


def _floored(weights):
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    return (1.0 - GRID_FLOOR) * w + GRID_FLOOR / w.size


def reference_plan_from_shapes(alpha, beta, cost_matrix, epsilon,
                               x_grid=None, y_grid=None, x_pts=None, y_pts=None):
    """Entropic plan ``alpha_i beta_j exp(-C_ij / eps)``, normalized.

    By construction this is the exact EOT plan between its own marginals
    for the given cost, so no solver runs during task construction.
    Built in log space to survive large cost ranges.
    """
    logp = (
        np.log(alpha)[:, None]
        + np.log(beta)[None, :]
        - cost_matrix / epsilon
    )
    logp -= logp.max()
    P = np.exp(logp)
    P /= P.sum()
    return Coupling(x_pts, y_pts, P, mode="grid", epsilon_hint=epsilon,
                    x_grid=x_grid, y_grid=y_grid)


def _make_gaussian_1d_grid_task(spec: TaskSpec, resolution: int = 32) -> TaskData:
    from .sinkhorn import SinkhornConfig, solve

    bounds = np.array([GRID_1D_BOUNDS])
    pts = grid_points(bounds, resolution)

    # endpoint mixtures mutually cover each other (density ratios stay
    # bounded), so the mixture-path forcing is bounded along all of [0, 1]
    mu_ref = grid_measure(bounds, resolution, _floored(
        _gauss_mix_density(pts, [(0.55, -1.1, 0.42), (0.45, -0.35, 0.32)])))
    nu_ref = grid_measure(bounds, resolution, _floored(
        _gauss_mix_density(pts, [(0.5, 0.45, 0.36), (0.5, 1.25, 0.4)])))
    mu_new = _floored(_gauss_mix_density(pts, [(0.5, -1.3, 0.38), (0.5, -0.5, 0.38)]))
    nu_new = _floored(_gauss_mix_density(pts, [(0.6, 0.65, 0.34), (0.4, 1.5, 0.38)]))

    # solving against floored marginals keeps every density ratio along the
    # path bounded (the closed-form product construction would leave
    # exp(-C/eps) tails in the reference marginals)
    ref, _ = solve(mu_ref, nu_ref, CostSpec("squared_euclidean"),
                   SinkhornConfig(epsilon=GRID_1D_EPSILON, tol=1e-11))
    return TaskData(
        spec=spec,
        reference_coupling=ref,
        mu_new=grid_measure(bounds, resolution, mu_new),
        nu_new=grid_measure(bounds, resolution, nu_new),
        ground_truth_map=None,
        map_name=None,
        cost_fn=lambda xs, ys: CostSpec("squared_euclidean").table(xs, ys),
        epsilon=GRID_1D_EPSILON,
    )


def make_task(spec: TaskSpec, grid_resolution: int | None = None) -> TaskData:
    """Build the task deterministically from its spec.

    ``grid_resolution`` only applies to the 1D grid task (default 32).
    """
    base = replace(spec, perturbed=False)
    if base.name in ("simple", "medium", "complex"):
        task = _make_blob_task(base)
    elif base.name == "moon":
        task = _make_moon_task(base)
    elif base.name == "circle":
        # same latent split rule on both tasks, taken about each circle's own
        # equator: the reference circle sits at y=-1, the new one at y=0
        task = _make_map_task(
            base,
            ref_sampler=_circle_sampler((8.0, -1.0), 2.0),
            new_sampler=_circle_sampler((0.0, 0.0), 3.0),
            T=_map_circle_split(shift=5.0, center_y=0.0),
            map_name="circle_split",
            ref_map=_map_circle_split(shift=5.0, center_y=-1.0),
        )
    elif base.name == "radial_warp":
        task = _make_map_task(
            base,
            ref_sampler=lambda rng, n: _mixture_sample(rng, n, [(-1.5, 0.0), (1.5, 0.0)], 0.3),
            new_sampler=lambda rng, n: _mixture_sample(rng, n, [(0.0, -1.0), (0.0, 1.0)], 0.25),
            T=_map_radial_warp,
            map_name="radial_warp",
        )
    elif base.name == "polar_twist":
        task = _make_map_task(
            base,
            ref_sampler=lambda rng, n: _mixture_sample(rng, n, [(-2.0, 0.0), (2.0, 0.0)], 0.3),
            new_sampler=lambda rng, n: _mixture_sample(rng, n, [(0.0, -3.0), (0.0, 3.0)], 0.3),
            T=_map_polar_twist,
            map_name="polar_twist",
        )
    elif base.name == "gaussian_1d_grid":
        task = _make_gaussian_1d_grid_task(base, grid_resolution or 32)
    else:
        raise UnknownTask(base.name)

    if spec.perturbed:
        task = perturb(task)
    return task


def apply_map(task: TaskData, x) -> np.ndarray:
    """Evaluate the ground-truth map at a point or batch of points."""
    if task.ground_truth_map is None:
        raise NoGroundTruth(f"task {task.spec.name!r} has no analytic map")
    return task.ground_truth_map(np.asarray(x, dtype=float))


def perturb(task: TaskData) -> TaskData:
    """Rotate nu_new +10 degrees about its centroid (+2/axis shift for simple).

    The latent-cost optimum no longer coincides with the reference map, so
    the ground-truth map is dropped.
    """
    if task.spec.perturbed:
        raise AlreadyPerturbed("task already perturbed")
    if task.spec.name == "gaussian_1d_grid":
        raise UnknownTask("the 1D grid task has no perturbed variant")
    pts = task.nu_new.points
    if task.spec.name == "simple":
        new_pts = pts + 2.0
    else:
        centroid = pts.mean(axis=0)
        new_pts = (pts - centroid) @ rotation(10.0).T + centroid
    nu = DiscreteMeasure(new_pts, task.nu_new.weights)
    return replace(
        task,
        spec=replace(task.spec, perturbed=True),
        nu_new=nu,
        ground_truth_map=None,
        map_name=None,
        cost_fn=task.cost_fn,
    )


# 2D grid instances ----------------------------------------------------------

@dataclass(frozen=True)
class GridInstance:
    """A blob task rasterized onto a shared 2D grid, with oracle cost."""

    task_name: str
    mu_ref: DiscreteMeasure
    nu_ref: DiscreteMeasure
    mu_new: DiscreteMeasure
    nu_new: DiscreteMeasure
    reference_plan: Coupling
    cost: CostSpec
    epsilon: float


def _raster_mixture(points, centers, std):
    centers = np.asarray(centers, dtype=float)
    d2 = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=-1)
    return np.exp(-0.5 * d2 / std**2).sum(axis=1)


def make_grid_instance(
    name: str,
    resolution: int = 24,
    epsilon: float = 8.0,
    bounds=None,
) -> GridInstance:
    """Rasterize a blob task onto a ``resolution x resolution`` grid.

    The reference plan is constructed in closed form as
    ``shape_x * shape_y * exp(-C/eps)`` (an exact entropic plan for its own
    marginals), so the latent cost enters the reference only the way it
    would through sampled couplings.
    """
    if name not in ("simple", "medium", "complex"):
        raise UnknownTask(f"no grid instance for task {name!r}")
    ref_centers, ref_std, new_centers, new_std, T, _ = _mixture_params(name)
    if bounds is None:
        extent = np.abs(np.asarray(new_centers)).max() + 3.0 * max(ref_std, new_std)
        bounds = np.array([[-extent, extent], [-extent, extent]])
    else:
        bounds = np.asarray(bounds, dtype=float)
    pts = grid_points(bounds, resolution)
    side = GridSide(bounds, resolution)

    cost_fn = _cost_from_map(T)
    C = cost_fn(pts, pts)

    # coupling noise enlarges the y-side spread
    y_std = math.hypot(ref_std, COUPLING_NOISE_STD)
    alpha = _floored(_raster_mixture(pts, ref_centers, ref_std))
    beta = _floored(_raster_mixture(pts, np.atleast_2d(T(np.asarray(ref_centers, dtype=float))), y_std))
    plan = reference_plan_from_shapes(alpha, beta, C, epsilon,
                                      x_grid=side, y_grid=side, x_pts=pts, y_pts=pts)

    mu_new = grid_measure(bounds, resolution, _floored(_raster_mixture(pts, new_centers, new_std)))
    nu_new_centers = np.atleast_2d(T(np.asarray(new_centers, dtype=float)))
    nu_new = grid_measure(bounds, resolution,
                          _floored(_raster_mixture(pts, nu_new_centers, math.hypot(new_std, COUPLING_NOISE_STD))))

    mu_ref, nu_ref = marginals(plan)
    return GridInstance(
        task_name=name,
        mu_ref=mu_ref,
        nu_ref=nu_ref,
        mu_new=mu_new,
        nu_new=nu_new,
        reference_plan=plan,
        cost=CostSpec("custom_matrix", matrix=C),
        epsilon=epsilon,
    )
