"""Constrained maximum entropy and free-energy minimisation on grids.

Modules: ``core`` (grids, densities, functionals), ``maxent`` (constraints and
the dual solver), ``dynamics`` (Langevin and Fokker-Planck), ``blanket``
(linear-Gaussian particular partitions), ``gauge`` (constraint geometry and
flows), ``diagnostics`` (named checks) and ``cli`` (the batch runner).
"""

from .core import Density, Grid, Region, entropy, fisher_information, kl_divergence, mutual_information, region_mass, restrict, total_variation
from .maxent import ConstraintSet, gibbs_density, retarget, solve

__version__ = "0.1.0"

__all__ = [
    "ConstraintSet",
    "Density",
    "Grid",
    "Region",
    "entropy",
    "fisher_information",
    "gibbs_density",
    "kl_divergence",
    "mutual_information",
    "region_mass",
    "restrict",
    "retarget",
    "solve",
    "total_variation",
]
