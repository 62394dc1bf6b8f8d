"""Distribution and map-recovery metrics (all lower-is-better)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NoGroundTruth
from .measures import Seed


@dataclass(frozen=True)
class MetricConfig:
    n_projections: int = 512
    seed: Seed = Seed(0)
    mmd_bandwidth: float | str = "median"  # positive float or "median"
    eval_epsilon: float | str = "auto"     # "auto": 0.05 x squared length scale

    def __post_init__(self):
        if self.n_projections < 8:
            raise ValueError("n_projections must be >= 8")
        if isinstance(self.mmd_bandwidth, str) and self.mmd_bandwidth != "median":
            raise ValueError("mmd_bandwidth is a positive float or 'median'")
        if isinstance(self.eval_epsilon, str) and self.eval_epsilon != "auto":
            raise ValueError("eval_epsilon is a positive float or 'auto'")


def resolve_eval_epsilon(cfg: MetricConfig, p, q) -> float:
    """Sinkhorn-divergence regularization: 0.05 x the pooled squared
    length scale unless the config pins a value."""
    if cfg.eval_epsilon != "auto":
        return float(cfg.eval_epsilon)
    pooled = np.vstack([np.atleast_2d(p), np.atleast_2d(q)])
    scale2 = float(np.sum(np.var(pooled, axis=0)))
    return max(0.05 * scale2, 1e-6)


def _as_samples(p):
    p = np.asarray(p, dtype=float)
    if p.ndim == 1:
        p = p[:, None]
    if p.shape[0] < 1:
        raise DimensionMismatch("need at least one sample")
    return p


def _check_dims(p, q):
    if p.shape[1] != q.shape[1]:
        raise DimensionMismatch(f"dimensions differ: {p.shape[1]} vs {q.shape[1]}")


def _wasserstein_1d(a: np.ndarray, b: np.ndarray, order: int) -> float:
    """W_order^order between 1D samples: sorted pairing, or quantile
    interpolation when the counts differ."""
    a = np.sort(a)
    b = np.sort(b)
    if a.shape[0] != b.shape[0]:
        k = max(a.shape[0], b.shape[0])
        qs = (np.arange(k) + 0.5) / k
        a = np.quantile(a, qs, method="linear")
        b = np.quantile(b, qs, method="linear")
    return float(np.mean(np.abs(a - b) ** order))


def sliced_wasserstein(p, q, order: int = 2, cfg: MetricConfig | None = None) -> float:
    """Sliced Wasserstein distance: (mean over directions of W_o^o)^(1/o).

    Projection directions are drawn once per call from the seeded stream,
    uniformly on the sphere.
    """
    cfg = cfg or MetricConfig()
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    p = _as_samples(p)
    q = _as_samples(q)
    _check_dims(p, q)
    d = p.shape[1]
    rng = cfg.seed.rng()
    dirs = rng.standard_normal((cfg.n_projections, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pp = p @ dirs.T
    qq = q @ dirs.T
    vals = [_wasserstein_1d(pp[:, j], qq[:, j], order) for j in range(cfg.n_projections)]
    return float(np.mean(vals) ** (1.0 / order))


def _sq_dists(a, b):
    return np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1)


def mmd_rbf(p, q, cfg: MetricConfig | None = None, unbiased: bool = True) -> float:
    """Gaussian-kernel MMD, sqrt of the clipped squared estimator.

    Kernel exp(-||u-v||^2 / (2 h^2)); h from the config or the median
    pairwise distance over the pooled samples.  The unbiased estimator
    needs two samples per set; below that the biased V-statistic is used.
    """
    cfg = cfg or MetricConfig()
    p = _as_samples(p)
    q = _as_samples(q)
    _check_dims(p, q)
    dpp = _sq_dists(p, p)
    dqq = _sq_dists(q, q)
    dpq = _sq_dists(p, q)
    if cfg.mmd_bandwidth == "median":
        pooled = np.concatenate([
            np.sqrt(dpp[np.triu_indices_from(dpp, 1)]),
            np.sqrt(dqq[np.triu_indices_from(dqq, 1)]),
            np.sqrt(dpq).ravel(),
        ])
        h = float(np.median(pooled[pooled > 0])) if np.any(pooled > 0) else 1.0
    else:
        h = float(cfg.mmd_bandwidth)
    kpp = np.exp(-dpp / (2 * h * h))
    kqq = np.exp(-dqq / (2 * h * h))
    kpq = np.exp(-dpq / (2 * h * h))
    n, m = p.shape[0], q.shape[0]
    if unbiased and n > 1 and m > 1:
        est = (
            (kpp.sum() - np.trace(kpp)) / (n * (n - 1))
            + (kqq.sum() - np.trace(kqq)) / (m * (m - 1))
            - 2.0 * kpq.mean()
        )
    else:
        est = kpp.mean() + kqq.mean() - 2.0 * kpq.mean()
    return float(np.sqrt(max(est, 0.0)))


def energy_distance(p, q) -> float:
    """2 E||X-Y|| - E||X-X'|| - E||Y-Y'|| with plug-in (V-statistic) means."""
    p = _as_samples(p)
    q = _as_samples(q)
    _check_dims(p, q)
    exy = float(np.mean(np.sqrt(_sq_dists(p, q))))
    exx = float(np.mean(np.sqrt(_sq_dists(p, p))))
    eyy = float(np.mean(np.sqrt(_sq_dists(q, q))))
    return 2.0 * exy - exx - eyy


def map_rmse(sources, transported, task) -> float:
    """Root mean squared error against the task's ground-truth map."""
    from .geometry import apply_map

    sources = _as_samples(sources)
    transported = _as_samples(transported)
    if task.ground_truth_map is None:
        raise NoGroundTruth(f"task {task.spec.name!r} has no analytic map")
    if sources.shape != transported.shape:
        raise DimensionMismatch("sources and outputs must be index-aligned")
    target = apply_map(task, sources)
    return float(np.sqrt(np.mean(np.sum((target - transported) ** 2, axis=1))))
