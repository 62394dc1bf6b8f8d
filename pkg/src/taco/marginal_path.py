"""Marginal paths (mu_t, nu_t), their velocity fields, and forcing terms.

Three families:

* ``linear_pairs`` -- straight-line particle interpolation between two
  sample clouds under a bijective pairing.  Velocities are constant per
  particle; there is no pointwise density, so strong-form forcing is
  unavailable and particle pipelines use :func:`weak_forcing` instead.
* ``gaussian_analytic`` -- Gaussian endpoints with linear mean path and
  linearly interpolated covariance square roots; everything closed form.
* ``grid_mixture`` -- grid densities interpolated either linearly
  (``mixture`` rule) or log-linearly (``geometric`` rule, safer for
  far-apart supports).  Forcing is the time derivative of the log density,
  computed by centered finite differences.

The forcing term is d/dt log(density): the right-hand side of the linear
system the tilting rates must solve.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadPairing, OutOfFamily
from .measures import DiscreteMeasure, grid_measure

FD_TIME_STEP = 1e-4


# ---------------------------------------------------------------------------
# pairings
# ---------------------------------------------------------------------------

def greedy_pairing(start: np.ndarray, end: np.ndarray) -> np.ndarray:
    """Bijective assignment: cheapest available pair first.

    Visits candidate pairs in order of increasing distance and assigns a
    pair whenever both endpoints are still free.  Deterministic; ties are
    broken by flat index order.
    """
    n = start.shape[0]
    if end.shape[0] != n:
        raise BadPairing(f"cannot pair {n} starts with {end.shape[0]} ends")
    d2 = np.sum((start[:, None, :] - end[None, :, :]) ** 2, axis=-1)
    order = np.argsort(d2, axis=None, kind="stable")
    assign = np.full(n, -1, dtype=int)
    row_free = np.ones(n, dtype=bool)
    col_free = np.ones(n, dtype=bool)
    remaining = n
    chunk = max(4 * n, 1024)
    for lo in range(0, order.size, chunk):
        idx = order[lo:lo + chunk]
        rows, cols = np.unravel_index(idx, (n, n))
        keep = row_free[rows] & col_free[cols]
        for r, c in zip(rows[keep], cols[keep]):
            if row_free[r] and col_free[c]:
                assign[r] = c
                row_free[r] = False
                col_free[c] = False
                remaining -= 1
        if remaining == 0:
            break
    return assign


def ot_pairing(start: np.ndarray, end: np.ndarray) -> np.ndarray:
    """Optimal (non-crossing) assignment under squared Euclidean cost.

    Greedy matching produces crossing paths near decision boundaries when
    one cloud splits into several; the optimal matching behaves like a
    transport field and keeps nearby starts together.
    """
    from scipy.optimize import linear_sum_assignment

    n = start.shape[0]
    if end.shape[0] != n:
        raise BadPairing(f"cannot pair {n} starts with {end.shape[0]} ends")
    d2 = np.sum((start[:, None, :] - end[None, :, :]) ** 2, axis=-1)
    rows, cols = linear_sum_assignment(d2)
    assign = np.empty(n, dtype=int)
    assign[rows] = cols
    return assign


def sinkhorn_pairing(start: np.ndarray, end: np.ndarray, epsilon: float | None = None) -> np.ndarray:
    """Bijection from an entropic plan, rounded greedily by plan mass."""
    from .sinkhorn import CostSpec, SinkhornConfig, solve

    n = start.shape[0]
    if end.shape[0] != n:
        raise BadPairing(f"cannot pair {n} starts with {end.shape[0]} ends")
    if epsilon is None:
        scale = float(np.mean(np.var(np.vstack([start, end]), axis=0)))
        epsilon = 0.05 * max(scale, 1e-12)
    mu = DiscreteMeasure(start, np.full(n, 1.0 / n))
    nu = DiscreteMeasure(end, np.full(n, 1.0 / n))
    plan, _ = solve(mu, nu, CostSpec(), SinkhornConfig(epsilon=epsilon, tol=1e-7),
                    raise_on_no_convergence=False)
    order = np.argsort(-plan.weights, axis=None, kind="stable")
    rows, cols = np.unravel_index(order, (n, n))
    assign = np.full(n, -1, dtype=int)
    row_free = np.ones(n, dtype=bool)
    col_free = np.ones(n, dtype=bool)
    remaining = n
    for r, c in zip(rows, cols):
        if row_free[r] and col_free[c]:
            assign[r] = c
            row_free[r] = False
            col_free[c] = False
            remaining -= 1
            if remaining == 0:
                break
    return assign


def _validate_pairing(pairing, n) -> np.ndarray:
    p = np.asarray(pairing, dtype=int)
    if p.shape != (n,) or not np.array_equal(np.sort(p), np.arange(n)):
        raise BadPairing("pairing must be a permutation of sample indices")
    return p


# ---------------------------------------------------------------------------
# per-side descriptors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PairsSide:
    start: np.ndarray  # (n, d)
    end: np.ndarray    # (n, d), end[i] paired with start[i]


@dataclass(frozen=True)
class GaussianSide:
    mean0: np.ndarray
    cov0: np.ndarray
    mean1: np.ndarray
    cov1: np.ndarray
    bounds: np.ndarray      # grid box for interpolate()
    resolution: int = 64


@dataclass(frozen=True)
class GridSideDensities:
    start: DiscreteMeasure  # grid mode
    end: DiscreteMeasure    # same grid
    rule: str = "mixture"   # or "geometric"


@dataclass(frozen=True)
class PathSpec:
    family: str  # linear_pairs | gaussian_analytic | grid_mixture
    mu: object
    nu: object


def linear_pairs_path(mu_start, mu_end, nu_start, nu_end,
                      pairing="greedy", epsilon=None) -> PathSpec:
    """Particle path between sample clouds; ``pairing`` is "greedy",
    "ot", "sinkhorn", or a pair of explicit index maps."""
    mu_start = np.atleast_2d(np.asarray(mu_start, dtype=float))
    mu_end = np.atleast_2d(np.asarray(mu_end, dtype=float))
    nu_start = np.atleast_2d(np.asarray(nu_start, dtype=float))
    nu_end = np.atleast_2d(np.asarray(nu_end, dtype=float))
    if pairing == "greedy":
        pm = greedy_pairing(mu_start, mu_end)
        pn = greedy_pairing(nu_start, nu_end)
    elif pairing == "ot":
        pm = ot_pairing(mu_start, mu_end)
        pn = ot_pairing(nu_start, nu_end)
    elif pairing == "sinkhorn":
        pm = sinkhorn_pairing(mu_start, mu_end, epsilon)
        pn = sinkhorn_pairing(nu_start, nu_end, epsilon)
    else:
        pm, pn = pairing
        pm = _validate_pairing(pm, mu_start.shape[0])
        pn = _validate_pairing(pn, nu_start.shape[0])
    return PathSpec(
        family="linear_pairs",
        mu=PairsSide(mu_start, mu_end[pm]),
        nu=PairsSide(nu_start, nu_end[pn]),
    )


def gaussian_path(mu0, cov_mu0, mu1, cov_mu1, nu0, cov_nu0, nu1, cov_nu1,
                  bounds, resolution=64) -> PathSpec:
    bounds = np.asarray(bounds, dtype=float).reshape(-1, 2)

    def side(m0, c0, m1, c1):
        return GaussianSide(
            np.atleast_1d(np.asarray(m0, dtype=float)),
            np.atleast_2d(np.asarray(c0, dtype=float)),
            np.atleast_1d(np.asarray(m1, dtype=float)),
            np.atleast_2d(np.asarray(c1, dtype=float)),
            bounds, resolution,
        )

    return PathSpec("gaussian_analytic",
                    side(mu0, cov_mu0, mu1, cov_mu1),
                    side(nu0, cov_nu0, nu1, cov_nu1))


def grid_mixture_path(mu_start, mu_end, nu_start, nu_end, rule="mixture") -> PathSpec:
    for a, b in ((mu_start, mu_end), (nu_start, nu_end)):
        if a.mode != "grid" or b.mode != "grid" or not np.array_equal(a.points, b.points):
            raise OutOfFamily("grid_mixture endpoints must share one grid")
    if rule not in ("mixture", "geometric"):
        raise OutOfFamily(f"unknown interpolation rule {rule!r}")
    return PathSpec("grid_mixture",
                    GridSideDensities(mu_start, mu_end, rule),
                    GridSideDensities(nu_start, nu_end, rule))


def _side(path: PathSpec, side: str):
    if side not in ("mu", "nu"):
        raise OutOfFamily(f"side must be 'mu' or 'nu', got {side!r}")
    return getattr(path, side)


# ---------------------------------------------------------------------------
# gaussian helpers
# ---------------------------------------------------------------------------

def _sym_sqrt(cov: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(cov)
    if np.any(vals <= 0):
        raise OutOfFamily("covariances must be positive definite")
    return (vecs * np.sqrt(vals)) @ vecs.T


def _gaussian_moments(s: GaussianSide, t: float):
    m = (1.0 - t) * s.mean0 + t * s.mean1
    a0 = _sym_sqrt(s.cov0)
    a1 = _sym_sqrt(s.cov1)
    A = (1.0 - t) * a0 + t * a1
    return m, A, (s.mean1 - s.mean0), (a1 - a0)


# ---------------------------------------------------------------------------
# grid-mixture helpers
# ---------------------------------------------------------------------------

def _grid_log_weights(s: GridSideDensities, t: float) -> np.ndarray:
    w0 = s.start.weights
    w1 = s.end.weights
    if s.rule == "mixture":
        w = (1.0 - t) * w0 + t * w1
        return np.log(w / w.sum())
    logw = (1.0 - t) * np.log(w0) + t * np.log(w1)
    m = logw.max()
    return logw - (m + np.log(np.exp(logw - m).sum()))


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def interpolate(path: PathSpec, side: str, t: float) -> DiscreteMeasure:
    """The marginal at time t; endpoints are reproduced exactly."""
    if not 0.0 <= t <= 1.0:
        raise OutOfFamily(f"t={t} outside [0, 1]")
    s = _side(path, side)
    if path.family == "linear_pairs":
        pts = (1.0 - t) * s.start + t * s.end
        n = pts.shape[0]
        return DiscreteMeasure(pts, np.full(n, 1.0 / n))
    if path.family == "gaussian_analytic":
        m, A, _, _ = _gaussian_moments(s, t)
        cov = A @ A
        from .measures import grid_points

        pts = grid_points(s.bounds, s.resolution)
        diff = pts - m
        sol = np.linalg.solve(cov, diff.T).T
        w = np.exp(-0.5 * np.sum(diff * sol, axis=1))
        return grid_measure(s.bounds, s.resolution, w)
    if path.family == "grid_mixture":
        if t == 0.0:
            return s.start
        if t == 1.0:
            return s.end
        w = np.exp(_grid_log_weights(s, t))
        return grid_measure(s.start.bounds, s.start.resolution, w)
    raise OutOfFamily(path.family)


def velocity(path: PathSpec, side: str, t: float, x=None, index=None):
    """Velocity field of the side at time t.

    linear_pairs requires particle indices (velocity is end - start,
    constant in t); gaussian_analytic accepts arbitrary points and returns
    the affine field mdot + Adot A^-1 (x - m_t); 1D grid_mixture inverts
    the continuity equation through the cumulative flux.
    """
    s = _side(path, side)
    if path.family == "linear_pairs":
        if index is None:
            raise OutOfFamily("linear_pairs velocity needs particle indices")
        idx = np.asarray(index, dtype=int)
        return s.end[idx] - s.start[idx]
    if path.family == "gaussian_analytic":
        if x is None:
            raise OutOfFamily("gaussian velocity needs evaluation points")
        m, A, mdot, adot = _gaussian_moments(s, t)
        x2 = np.atleast_2d(np.asarray(x, dtype=float))
        coef = adot @ np.linalg.inv(A)
        out = mdot + (x2 - m) @ coef.T
        return out.reshape(np.shape(x))
    if path.family == "grid_mixture":
        if s.start.dim != 1:
            raise OutOfFamily("grid_mixture velocity is 1D-only")
        h = FD_TIME_STEP
        lo, hi = max(t - h, 0.0), min(t + h, 1.0)
        w_hi = np.exp(_grid_log_weights(s, hi))
        w_lo = np.exp(_grid_log_weights(s, lo))
        dw = (w_hi - w_lo) / (hi - lo)
        w_t = np.exp(_grid_log_weights(s, t))
        flux = np.cumsum(dw) - 0.5 * dw
        width = float(s.start.cell_width()[0])
        u = -flux * width / w_t
        if x is None:
            return u
        pos = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
        return np.interp(pos, s.start.points[:, 0], u)
    raise OutOfFamily(path.family)


def forcing(path: PathSpec, side: str, t: float, x=None):
    """d/dt log density at time t.

    gaussian_analytic evaluates -div(u) - u . grad(log density) in closed
    form; grid_mixture uses a centered finite difference of the log
    density in t.  linear_pairs has no pointwise density.
    """
    s = _side(path, side)
    if path.family == "linear_pairs":
        raise OutOfFamily(
            "linear_pairs has no pointwise density; use weak_forcing instead"
        )
    if path.family == "gaussian_analytic":
        if x is None:
            raise OutOfFamily("gaussian forcing needs evaluation points")
        m, A, mdot, adot = _gaussian_moments(s, t)
        cov = A @ A
        x2 = np.atleast_2d(np.asarray(x, dtype=float))
        coef = adot @ np.linalg.inv(A)
        u = mdot + (x2 - m) @ coef.T
        div_u = float(np.trace(coef))
        score = -np.linalg.solve(cov, (x2 - m).T).T
        out = -div_u - np.sum(u * score, axis=1)
        return out if np.ndim(x) > 1 else float(out[0])
    if path.family == "grid_mixture":
        h = FD_TIME_STEP
        lo, hi = max(t - h, 0.0), min(t + h, 1.0)
        zeta = (_grid_log_weights(s, hi) - _grid_log_weights(s, lo)) / (hi - lo)
        # d/dt log(density) integrates to zero exactly; remove the FD bias
        # in the constant mode
        w_t = np.exp(_grid_log_weights(s, t))
        zeta = zeta - float(np.dot(zeta, w_t))
        if x is None:
            return zeta
        pos = np.atleast_2d(np.asarray(x, dtype=float))
        if s.start.dim == 1:
            return np.interp(pos.ravel(), s.start.points[:, 0], zeta)
        # nearest-cell lookup for multi-d grids
        d2 = np.sum((pos[:, None, :] - s.start.points[None, :, :]) ** 2, axis=-1)
        return zeta[np.argmin(d2, axis=1)]
    raise OutOfFamily(path.family)


def silverman_bandwidth(points: np.ndarray) -> float:
    """Silverman's rule with factor 1.0, averaged over dimensions."""
    pts = np.atleast_2d(points)
    n, d = pts.shape
    sigma = float(np.mean(np.std(pts, axis=0))) or 1.0
    return sigma * (4.0 / (d + 2)) ** (1.0 / (d + 4)) * n ** (-1.0 / (d + 4))


def weak_forcing(path: PathSpec, side: str, t: float, query, bandwidth=None):
    """Sample-based forcing for linear_pairs paths.

    Realizes the integration-by-parts identity E[a * zeta] = E[grad a . u]
    through a Gaussian kernel density estimate whose derivative is taken
    analytically: with momentum field mhat*uhat = sum_j u_j K_h(. - X_j),

        zeta_hat(q) = -div(mhat uhat)(q) / mhat(q)
                    = sum_j (q - X_j) . u_j K_h / (h^2 sum_j K_h).

    No score estimation and no numeric differentiation of test functions.
    """
    s = _side(path, side)
    if path.family != "linear_pairs":
        raise OutOfFamily("weak_forcing applies to linear_pairs paths")
    cloud = (1.0 - t) * s.start + t * s.end
    vel = s.end - s.start
    q = np.atleast_2d(np.asarray(query, dtype=float))
    if bandwidth is None:
        bandwidth = silverman_bandwidth(cloud)
    h2 = bandwidth * bandwidth
    d2 = np.sum((q[:, None, :] - cloud[None, :, :]) ** 2, axis=-1)
    logk = -0.5 * d2 / h2
    logk -= logk.max(axis=1, keepdims=True)
    K = np.exp(logk)
    proj = np.einsum("qjd,jd->qj", q[:, None, :] - cloud[None, :, :], vel)
    num = np.sum(proj * K, axis=1)
    den = h2 * np.sum(K, axis=1)
    return num / den
