"""Nonparametric coupling sampler: bridge fields over a weighted pair cloud.

The regression field beta_s is evaluated exactly over the weighted pairs
instead of being fit by a network: for a query z the field is the
density-weighted average of closed-form conditional bridge velocities,

    beta_s(z) = sum_i w_i v_s(z|x_i, y_i) p(z|x_i, y_i) / sum_i w_i p(...),

with Gaussian bridge densities from :func:`bridge_moments`.  Carrying the
pair weights through tilt updates therefore realizes the importance-
reweighted regression target without any retraining step.

Transport runs the frozen ODE: the state is lifted to (moving, frozen),
the frozen component pins the source point and enters the conditioning
density, and only the moving component integrates.  This keeps the
sampler a coupling sampler (source-conditional) rather than a marginal
flow, and disambiguates crossing bridge paths.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DegenerateDenominator, SlotCountMismatch
from .marginal_path import PathSpec, velocity
from .measures import Coupling, ess
from .tilting import TiltRates, rates_on_pairs, tilt_step


@dataclass(frozen=True)
class BridgeConfig:
    sigma: float = 0.1
    euler_steps: int = 200
    s_min: float | None = None                # default 1/(2*euler_steps)
    neighbor_truncation: float | None = None  # radius in sigma_s units; None = exact

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.euler_steps < 2:
            raise ValueError("euler_steps must be >= 2")
        s_min = self.s_min if self.s_min is not None else 1.0 / (2 * self.euler_steps)
        if not 0.0 < s_min < 0.5:
            raise ValueError("s_min must lie in (0, 0.5)")
        object.__setattr__(self, "s_min", s_min)
        if self.neighbor_truncation is not None and self.neighbor_truncation <= 0:
            raise ValueError("neighbor_truncation must be positive")


@dataclass(frozen=True)
class LiftedState:
    """Transport state: the frozen component never changes during a solve."""

    moving: np.ndarray
    frozen: np.ndarray


def bridge_moments(x, y, s: float, sigma: float):
    """Mean (1-s)x + sy and isotropic variance sigma^2 s(1-s) of the bridge."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return (1.0 - s) * x + s * y, sigma * sigma * s * (1.0 - s)


def conditional_velocity(x, y, s: float, z):
    """Closed-form bridge drift (y - x) + (1-2s)/(2s(1-s)) (z - m_s)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    m = (1.0 - s) * x + s * y
    kappa = (1.0 - 2.0 * s) / (2.0 * s * (1.0 - s))
    return (y - x) + kappa * (z - m)


# The field itself is computed in log domain and needs only relative
# densities, but queries whose best bridge density falls this far below
# one have lost contact with the data entirely: any output would be pure
# extrapolation from a single distant bridge, so the contract is to fail.
DEGENERATE_LOG_THRESHOLD = -2e4


def _pairs_view(c: Coupling):
    """Pair-cloud view of a coupling (grid mode expands to product pairs)."""
    if c.mode == "grid":
        nx, ny = c.weights.shape
        return (np.repeat(c.x, ny, axis=0), np.tile(c.y, (nx, 1)),
                c.pair_weights())
    return c.x, c.y, c.pair_weights()


def _conditioning_logweights(c: Coupling, s: float, z, sigma: float, frozen=None,
                             subset=None):
    """Unnormalized log weights of each pair at the (lifted) query.

    Raises :class:`DegenerateDenominator` when every positively-weighted
    bridge density has effectively vanished at the query.
    """
    x, y, w = _pairs_view(c)
    if subset is not None:
        x, y, w = x[subset], y[subset], w[subset]
    m, var = bridge_moments(x, y, s, sigma)
    d = x.shape[1]
    d2 = np.sum((np.asarray(z, dtype=float)[None, :] - m) ** 2, axis=1)
    if frozen is not None:
        d2 = d2 + np.sum((np.asarray(frozen, dtype=float)[None, :] - x) ** 2, axis=1)
        d = 2 * d
    logdens = -0.5 * d2 / var - 0.5 * d * np.log(2.0 * np.pi * var)
    positive = w > 0
    if not np.any(positive) or float(np.max(logdens[positive])) < DEGENERATE_LOG_THRESHOLD:
        raise DegenerateDenominator(
            f"every bridge density underflows at s={s}; the query is far "
            "from all bridges (sigma too small or truncation too aggressive)"
        )
    with np.errstate(divide="ignore"):
        return np.log(w) + logdens, x, y, m


def beta_field(c: Coupling, s: float, z, cfg: BridgeConfig, frozen=None):
    """Exact regression field at interpolation time s and position z.

    ``frozen`` adds the lifted conditioning on the source coordinate
    (passing a :class:`LiftedState` as ``z`` does the same).  With
    ``cfg.neighbor_truncation = r`` pairs whose conditioning weight falls
    more than exp(-r^2/2) below the best pair are dropped (relative mass
    below e^-18 at the default r = 6).
    """
    if isinstance(z, LiftedState):
        z, frozen = z.moving, z.frozen
    if not 0.0 < s < 1.0:
        raise ValueError(f"s={s} outside (0, 1)")
    logw, x, y, m = _conditioning_logweights(c, s, z, cfg.sigma, frozen)
    best = float(np.max(logw))
    keep = slice(None)
    if cfg.neighbor_truncation is not None:
        keep = logw >= best - 0.5 * cfg.neighbor_truncation**2
        if not np.any(keep):
            raise DegenerateDenominator(f"truncation removed every pair at s={s}")
    lam = np.exp(logw[keep] - best)
    lam /= lam.sum()
    z = np.asarray(z, dtype=float)
    kappa = (1.0 - 2.0 * s) / (2.0 * s * (1.0 - s))
    v = (y[keep] - x[keep]) + kappa * (z[None, :] - m[keep])
    return lam @ v


def covariance_rate(c: Coupling, rates: TiltRates, s: float, z,
                    cfg: BridgeConfig, frozen=None):
    """Instantaneous change of beta under tilting.

    Conditional covariance (over the weighted cloud, with the same
    Gaussian conditioning weights as :func:`beta_field`) between the
    bridge velocity and the joint rate a(X) + b(Y).
    """
    if not 0.0 < s < 1.0:
        raise ValueError(f"s={s} outside (0, 1)")
    logw, x, y, m = _conditioning_logweights(c, s, z, cfg.sigma, frozen)
    best = float(np.max(logw))
    lam = np.exp(logw - best)
    lam /= lam.sum()
    z = np.asarray(z, dtype=float)
    kappa = (1.0 - 2.0 * s) / (2.0 * s * (1.0 - s))
    v = (y - x) + kappa * (z[None, :] - m)
    F = rates_on_pairs(c, rates)
    mean_v = lam @ v
    mean_F = float(np.dot(lam, F))
    return (lam * F) @ v - mean_v * mean_F


def integrate(c: Coupling, sources, cfg: BridgeConfig) -> np.ndarray:
    """Transport source points through the frozen ODE.

    Euler steps of the moving coordinate from s_min to 1 - s_min with the
    frozen coordinate pinned at the source, plus one closing jump of size
    s_min using the last evaluable field.  Returns one endpoint per
    source; the frozen component is bit-identical throughout.
    """
    out, degenerate = integrate_batch(c, sources, cfg)
    if degenerate:
        j, s = degenerate[0]
        raise DegenerateDenominator(
            f"source {j}: every bridge density underflows at s={s}; the "
            "query is far from all bridges (sigma too small or truncation "
            "too aggressive)"
        )
    return out


def integrate_batch(c: Coupling, sources, cfg: BridgeConfig):
    """Frozen-ODE transport of a source batch.

    Returns ``(endpoints, degenerate)`` where ``degenerate`` lists
    ``(source_index, s)`` for sources whose conditioning collapsed; their
    endpoint rows are left at the last valid state.  Sources are grouped
    by location so a group shares one truncated pair subset and steps as
    one matrix operation.
    """
    sources = np.atleast_2d(np.asarray(sources, dtype=float))
    grid_ny = c.weights.shape[1] if c.mode == "grid" else None
    xs, ys, w = _pairs_view(c)
    positive = w > 0
    logw = np.where(positive, np.log(np.where(positive, w, 1.0)), -np.inf)
    m = sources.shape[0]
    out = sources.copy()
    degenerate: list[tuple[int, float]] = []

    if cfg.neighbor_truncation is None:
        # no truncation: slice the batch so per-step temporaries stay small
        n_pairs = xs.shape[0]
        step_size = max(1, int(5e6 // max(n_pairs, 1)))
        groups = [np.arange(lo, min(lo + step_size, m))
                  for lo in range(0, m, step_size)]
        subsets = [np.flatnonzero(positive)] * len(groups)
    else:
        margin = (cfg.neighbor_truncation * cfg.sigma / 2.0) ** 2
        # frozen-coordinate prefilter over the distinct source-side points
        # (for grid couplings a kept x-column brings its whole row of pairs)
        ux = c.x if grid_ny is not None else xs
        chunk = max(1, int(2e6 // max(ux.shape[0], 1)))
        keep_rows = []
        for lo in range(0, m, chunk):
            d2 = np.sum((sources[lo:lo + chunk, None, :] - ux[None, :, :]) ** 2,
                        axis=-1)
            keep_rows.append(d2 <= (d2.min(axis=1) + margin)[:, None])
        keep = np.vstack(keep_rows)
        # sources in the same coarse cell share one pair subset
        cell = 3.0 * cfg.sigma
        keys = [tuple(k) for k in np.floor(sources / cell).astype(int)]
        by_key: dict = {}
        for j, key in enumerate(keys):
            by_key.setdefault(key, []).append(j)
        groups = [np.asarray(v) for v in by_key.values()]
        subsets = []
        for g in groups:
            cols = np.flatnonzero(keep[g].any(axis=0))
            if grid_ny is not None:
                cols = (cols[:, None] * grid_ny + np.arange(grid_ny)[None, :]).ravel()
            subsets.append(cols[positive[cols]])

    d = sources.shape[1]

    n_steps = cfg.euler_steps
    h = (1.0 - 2.0 * cfg.s_min) / n_steps
    lift = 2 * d
    for group, sub in zip(groups, subsets):
        X, Y, LW = xs[sub], ys[sub], logw[sub]
        disp = Y - X
        Z = sources[group].copy()
        fr_d2 = np.sum((sources[group][:, None, :] - X[None, :, :]) ** 2, axis=-1)
        alive = np.ones(group.shape[0], dtype=bool)

        def step(s, size):
            nonlocal Z
            mean = (1.0 - s) * X + s * Y
            var = cfg.sigma * cfg.sigma * s * (1.0 - s)
            diff = Z[alive][:, None, :] - mean[None, :, :]
            tot = np.sum(diff * diff, axis=-1) + fr_d2[alive]
            score = LW[None, :] - 0.5 * tot / var
            dens_best = (-0.5 * tot / var - 0.5 * lift * np.log(2 * np.pi * var)).max(axis=1)
            dead = dens_best < DEGENERATE_LOG_THRESHOLD
            if np.any(dead):
                alive_idx = np.flatnonzero(alive)
                for aj in alive_idx[dead]:
                    degenerate.append((int(group[aj]), s))
                alive[alive_idx[dead]] = False
                diff = diff[~dead]
                score = score[~dead]
                if diff.shape[0] == 0:
                    return
            best = score.max(axis=1, keepdims=True)
            lam = np.exp(score - best)
            lam /= lam.sum(axis=1, keepdims=True)
            kappa = (1.0 - 2.0 * s) / (2.0 * s * (1.0 - s))
            vel = lam @ disp + kappa * (Z[alive] - lam @ mean)
            Z[alive] = Z[alive] + size * vel

        for k in range(n_steps):
            step(cfg.s_min + k * h, h)
        step(1.0 - cfg.s_min, cfg.s_min)  # closing jump to s = 1
        out[group] = Z
    degenerate.sort()
    return out, degenerate


def nearest_bridge_endpoints(c: Coupling, sources) -> np.ndarray:
    """Temperature-zero limit of the transport: follow the nearest bridge.

    For a source with no bridge density left, the softmax collapses onto
    the closest pair (ties broken by pair weight); the single-bridge ODE
    endpoint is that pair's target shifted by the source offset.
    """
    sources = np.atleast_2d(np.asarray(sources, dtype=float))
    xs, ys, w = _pairs_view(c)
    positive = w > 0
    xs, ys, w = xs[positive], ys[positive], w[positive]
    logw = np.log(w)
    out = np.empty_like(sources)
    chunk = max(1, int(2e6 // max(xs.shape[0], 1)))
    for lo in range(0, sources.shape[0], chunk):
        d2 = np.sum((sources[lo:lo + chunk, None, :] - xs[None, :, :]) ** 2, axis=-1)
        j = np.argmax(logw[None, :] - 1e12 * d2, axis=1)
        out[lo:lo + chunk] = ys[j] + (sources[lo:lo + chunk] - xs[j])
    return out


@dataclass
class ParticleSlots:
    """Persistent off-manifold pairs advanced along the marginal bridges.

    ``mu_index``/``nu_index`` address the path particles whose bridge
    velocities move each slot; positions accumulate one Euler step per
    outer iteration.
    """

    x: np.ndarray
    y: np.ndarray
    mu_index: np.ndarray
    nu_index: np.ndarray

    @property
    def count(self) -> int:
        return self.x.shape[0]


def init_slots(reference: Coupling, indices) -> ParticleSlots:
    idx = np.asarray(indices, dtype=int)
    return ParticleSlots(
        x=reference.x[idx].copy(),
        y=reference.y[idx].copy(),
        mu_index=idx.copy(),
        nu_index=idx.copy(),
    )


def weighted_update(
    c: Coupling,
    rates: TiltRates,
    delta: float,
    alpha: float,
    particle_slots: ParticleSlots | None,
    path: PathSpec | None,
    k: int,
    cfg: BridgeConfig,
    rng: np.random.Generator | None = None,
    ess_threshold: float = 0.5,
):
    """One outer iteration of the coupling sampler.

    Flow portion (the first pairs of ``c``): weights multiplied by
    exp(delta (a + b)) and renormalized -- carrying the weights realizes
    the reweighted regression field exactly.  Particle portion: each slot
    advances one Euler step of size delta along the marginal bridge
    fields.  The returned coupling is the union with flow mass
    ``1 - alpha`` and particle mass ``alpha``.

    Systematic resampling refreshes the flow portion when its effective
    sample size falls below ``ess_threshold`` times the flow count
    (deterministic under ``rng``; never triggered by light tilts).
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    n_part = particle_slots.count if particle_slots is not None else 0
    if alpha > 0 and n_part == 0:
        raise SlotCountMismatch("alpha > 0 requires particle slots")
    n_flow = c.x.shape[0] - n_part
    if n_flow < 0:
        raise SlotCountMismatch(
            f"coupling has {c.x.shape[0]} pairs but {n_part} slots"
        )

    if n_part == 0:
        return tilt_step(c, rates, delta), particle_slots

    t_k = k * delta
    vx = velocity(path, "mu", t_k, index=particle_slots.mu_index)
    vy = velocity(path, "nu", t_k, index=particle_slots.nu_index)
    new_slots = replace(
        particle_slots,
        x=particle_slots.x + delta * vx,
        y=particle_slots.y + delta * vy,
    )

    if n_flow == 0 or alpha >= 1.0:
        union = Coupling(new_slots.x, new_slots.y, np.full(n_part, 1.0 / n_part))
        return union, new_slots

    flow = Coupling(c.x[:n_flow], c.y[:n_flow],
                    c.pair_weights()[:n_flow] / c.pair_weights()[:n_flow].sum())
    flow_rates = TiltRates(rates.a_values[:n_flow], rates.b_values[:n_flow])
    flow = tilt_step(flow, flow_rates, delta)
    fw = flow.pair_weights()
    fx, fy = flow.x, flow.y
    if ess(fw) < ess_threshold * n_flow:
        rng = rng or np.random.default_rng(k)
        picks = _systematic_resample(fw, rng)
        fx, fy = fx[picks], fy[picks]
        fw = np.full(n_flow, 1.0 / n_flow)

    weights = np.concatenate([
        (1.0 - alpha) * fw,
        np.full(n_part, alpha / n_part),
    ])
    union = Coupling(
        np.vstack([fx, new_slots.x]),
        np.vstack([fy, new_slots.y]),
        weights,
    )
    return union, new_slots


def _systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = weights.shape[0]
    positions = (np.arange(n) + rng.random()) / n
    return np.searchsorted(np.cumsum(weights), positions)
