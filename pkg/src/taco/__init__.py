"""Coupling transfer for entropic OT with a latent cost.

Core objects: discrete measures and couplings (:mod:`taco.measures`), a
log-domain entropic OT solver (:mod:`taco.sinkhorn`), marginal paths
(:mod:`taco.marginal_path`), the tilting-rate solver and tilt steps
(:mod:`taco.tilting`), the nonparametric coupling sampler
(:mod:`taco.flow_sampler`), the synthetic task zoo (:mod:`taco.geometry`),
evaluation metrics (:mod:`taco.metrics`), and the experiment runner
(:mod:`taco.cli`).
"""

from .measures import (
    Coupling,
    DiscreteMeasure,
    Seed,
    ess,
    grid_measure,
    marginals,
    normalize,
    sample,
    tv_distance,
)
from .sinkhorn import CostSpec, DualPotentials, SinkhornConfig, sinkhorn_divergence, solve, tilt_residual

__all__ = [
    "Coupling",
    "DiscreteMeasure",
    "Seed",
    "ess",
    "grid_measure",
    "marginals",
    "normalize",
    "sample",
    "tv_distance",
    "CostSpec",
    "DualPotentials",
    "SinkhornConfig",
    "sinkhorn_divergence",
    "solve",
    "tilt_residual",
]

__version__ = "0.1.0"
