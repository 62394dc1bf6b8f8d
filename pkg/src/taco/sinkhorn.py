"""Log-domain entropic OT solver, divergence metric, and tilt extraction.

The solver is used by oracles and tests only: the transfer algorithm never
sees a cost function.  ``tilt_residual`` checks how well the log-ratio of
two plans splits into additive potentials, which is the separability
structure two entropic plans share exactly when they share a cost.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NoConvergence, NumericalOverflow, SupportMismatch, ZeroEntries
from .measures import Coupling, DiscreteMeasure, GridSide, coupling_to_json


@dataclass(frozen=True)
class CostSpec:
    """Ground cost: a named rule or an explicit table."""

    kind: str = "squared_euclidean"
    matrix: np.ndarray | None = None

    def table(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        if self.kind == "custom_matrix":
            m = np.asarray(self.matrix, dtype=float)
            if m.shape != (xs.shape[0], ys.shape[0]):
                raise SupportMismatch(
                    f"cost matrix {m.shape} does not match supports "
                    f"({xs.shape[0]}, {ys.shape[0]})"
                )
            if not np.all(np.isfinite(m)):
                raise NumericalOverflow("cost matrix has non-finite entries")
            return m
        diff = xs[:, None, :] - ys[None, :, :]
        if self.kind == "squared_euclidean":
            return np.sum(diff * diff, axis=-1)
        if self.kind == "absolute":
            return np.sum(np.abs(diff), axis=-1)
        raise SupportMismatch(f"unknown cost kind {self.kind!r}")


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float
    max_iter: int = 10_000
    tol: float = 1e-9
    check_every: int = 1  # residual evaluation cadence (it costs a full plan)

    def __post_init__(self):
        if self.epsilon <= 0 or self.tol <= 0:
            raise ValueError("epsilon and tol must be positive")
        if self.check_every < 1:
            raise ValueError("check_every must be >= 1")


@dataclass(frozen=True)
class DualPotentials:
    """Potentials over the two supports, gauge-fixed by <g, nu> = 0."""

    f: np.ndarray
    g: np.ndarray


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(a - m), axis=axis)) + m.squeeze(axis)
    return out


def solve(
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    cost: CostSpec,
    cfg: SinkhornConfig,
    init: DualPotentials | None = None,
    raise_on_no_convergence: bool = True,
):
    """Entropic OT plan between two discrete measures.

    Alternates log-domain potential updates until the L1 marginal residual
    drops below ``cfg.tol``.  The returned plan equals
    ``mu_i * nu_j * exp((f_i + g_j - C_ij) / eps)`` renormalized, and the
    potentials satisfy the zero-mean gauge ``<g, nu> = 0``.

    Passing ``init`` warm-starts the iteration, which makes sequences of
    nearby problems (plans along a marginal path) cheap.
    """
    eps = cfg.epsilon
    C = cost.table(mu.points, nu.points)
    with np.errstate(divide="ignore"):
        la = np.log(mu.weights)
        lb = np.log(nu.weights)
    f = init.f.copy() if init is not None else np.zeros(mu.n)
    g = init.g.copy() if init is not None else np.zeros(nu.n)

    residual = np.inf
    converged = False
    P = None
    for it in range(cfg.max_iter):
        g = -eps * _logsumexp(la[:, None] + (f[:, None] - C) / eps, axis=0)
        f = -eps * _logsumexp(lb[None, :] + (g[None, :] - C) / eps, axis=1)
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
            raise NumericalOverflow(
                "non-finite potentials; rescale the cost or increase epsilon"
            )
        if (it + 1) % cfg.check_every and it + 1 < cfg.max_iter:
            continue
        logP = la[:, None] + lb[None, :] + (f[:, None] + g[None, :] - C) / eps
        P = np.exp(logP)
        residual = float(
            np.abs(P.sum(axis=1) - mu.weights).sum()
            + np.abs(P.sum(axis=0) - nu.weights).sum()
        )
        if residual <= cfg.tol:
            converged = True
            break
    if not converged and raise_on_no_convergence:
        raise NoConvergence(
            f"marginal residual {residual:.3e} > tol {cfg.tol:.3e} "
            f"after {cfg.max_iter} iterations",
            residual=residual,
        )

    shift = float(np.dot(g, nu.weights))
    g = g - shift
    f = f + shift
    P = P / P.sum()

    x_grid = (GridSide(mu.bounds, mu.resolution) if mu.mode == "grid" else None)
    y_grid = (GridSide(nu.bounds, nu.resolution) if nu.mode == "grid" else None)
    plan = Coupling(mu.points, nu.points, P, mode="grid", epsilon_hint=eps,
                    x_grid=x_grid, y_grid=y_grid)
    return plan, DualPotentials(f, g)


def _primal_value(P, C, base, eps) -> float:
    mask = P > 0
    kl = float(np.sum(P[mask] * np.log(P[mask] / base[mask])))
    return float(np.sum(P * C)) + eps * kl


def entropic_cost(
    mu: DiscreteMeasure, nu: DiscreteMeasure, cost: CostSpec, cfg: SinkhornConfig
) -> float:
    """Primal value <C, P> + eps * KL(P | mu x nu) at the solved plan."""
    eps = cfg.epsilon
    base = mu.weights[:, None] * nu.weights[None, :]
    if np.array_equal(mu.points, nu.points) and np.array_equal(mu.weights, nu.weights):
        # Self-transport: plain alternation two-cycles on symmetric problems,
        # so use the averaged symmetric update (f = g fixed point).
        C = cost.table(mu.points, mu.points)
        with np.errstate(divide="ignore"):
            la = np.log(mu.weights)
        g = np.zeros(mu.n)
        for _ in range(cfg.max_iter):
            g_new = 0.5 * (g - eps * _logsumexp(la[:, None] + (g[:, None] - C) / eps, axis=0))
            if np.max(np.abs(g_new - g)) < 0.1 * eps * cfg.tol:
                g = g_new
                break
            g = g_new
        P = np.exp(la[:, None] + la[None, :] + (g[:, None] + g[None, :] - C) / eps)
        P = P / P.sum()
        return _primal_value(P, C, base, eps)
    plan, _ = solve(mu, nu, cost, cfg)
    C = cost.table(mu.points, nu.points)
    return _primal_value(plan.weights, C, base, eps)


def sinkhorn_divergence(
    p: DiscreteMeasure,
    q: DiscreteMeasure,
    epsilon: float,
    max_iter: int = 10_000,
    tol: float = 1e-9,
) -> float:
    """Debiased entropic OT cost with squared-Euclidean ground cost.

    S_eps(p, q) = OT_eps(p, q) - OT_eps(p, p)/2 - OT_eps(q, q)/2, which
    vanishes on identical measures (up to solver tolerance).
    """
    cfg = SinkhornConfig(epsilon=epsilon, max_iter=max_iter, tol=tol)
    cost = CostSpec("squared_euclidean")
    pq = entropic_cost(p, q, cost, cfg)
    pp = entropic_cost(p, p, cost, cfg)
    qq = entropic_cost(q, q, cost, cfg)
    return pq - 0.5 * pp - 0.5 * qq


def tilt_residual(ref_plan: Coupling, target_plan: Coupling):
    """Fit log(target/ref) = phi(x) + psi(y) + const by least squares.

    Returns centered ``(phi, psi)`` and the max absolute deviation from
    additivity.  Two entropic plans sharing a cost give residual at the
    solver tolerance; plans with different costs do not.

    The rank deficiency (constant shifts between phi, psi and the absorbed
    constant) is handled by a 1e-10 ridge on the normal equations followed
    by re-centering, which keeps the output deterministic.
    """
    if ref_plan.weights.shape != target_plan.weights.shape:
        raise SupportMismatch("plans have different support shapes")
    if not (np.array_equal(ref_plan.x, target_plan.x)
            and np.array_equal(ref_plan.y, target_plan.y)):
        raise SupportMismatch("plans live on different supports")
    R = np.asarray(ref_plan.weights, dtype=float)
    T = np.asarray(target_plan.weights, dtype=float)
    if R.ndim != 2:
        raise SupportMismatch("tilt_residual needs grid-mode plans")
    if np.any(R <= 0):
        raise ZeroEntries("reference plan must be strictly positive")
    if np.any(T <= 0):
        raise ZeroEntries("target plan must be strictly positive")
    L = np.log(T) - np.log(R)

    nx, ny = L.shape
    n_unk = 1 + nx + ny
    A = np.zeros((n_unk, n_unk))
    rhs = np.zeros(n_unk)
    A[0, 0] = nx * ny
    A[0, 1:1 + nx] = ny
    A[0, 1 + nx:] = nx
    A[1:1 + nx, 0] = ny
    A[1 + nx:, 0] = nx
    A[1:1 + nx, 1:1 + nx] = ny * np.eye(nx)
    A[1 + nx:, 1 + nx:] = nx * np.eye(ny)
    A[1:1 + nx, 1 + nx:] = 1.0
    A[1 + nx:, 1:1 + nx] = 1.0
    rhs[0] = L.sum()
    rhs[1:1 + nx] = L.sum(axis=1)
    rhs[1 + nx:] = L.sum(axis=0)
    sol = np.linalg.solve(A + 1e-10 * np.eye(n_unk), rhs)

    phi = sol[1:1 + nx]
    psi = sol[1 + nx:]
    const = sol[0] + phi.mean() + psi.mean()
    phi = phi - phi.mean()
    psi = psi - psi.mean()
    fit = const + phi[:, None] + psi[None, :]
    residual = float(np.max(np.abs(L - fit)))
    return phi, psi, residual


def plan_to_json(plan: Coupling, potentials: DualPotentials) -> dict:
    """Measures JSON for the plan plus the {epsilon, f, g} block."""
    return coupling_to_json(
        plan,
        extra={
            "epsilon": plan.epsilon_hint,
            "f": potentials.f.tolist(),
            "g": potentials.g.tolist(),
        },
    )
