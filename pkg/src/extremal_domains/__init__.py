"""Extremal domains for the first Dirichlet eigenvalue on spheres.

Modules
-------
geom      configurations, distances, cutoffs
spectral  symmetric spherical-harmonic analysis on S^2
ld2       Green kernel, LD solutions and matching on S^2
boundary  boundary functions, exterior fields, H_L, J_L, B and R
perturb   collar pullbacks, candidate eigenfunction, f(w) and N(w)
driver    fixed point, verification and sweeps
dim4      the S^3 lattice layer: G3, the shooting constant F and tau
cli       command-line front end
"""

from .geom import SymmetryConfig, build_config, check_symmetric, cutoff, dist_to_set, geodesic_distance
from .ld2 import MatchingData, matching_for, solve_matching

__all__ = ["SymmetryConfig", "build_config", "check_symmetric", "cutoff", "dist_to_set",
           "geodesic_distance", "MatchingData", "matching_for", "solve_matching"]
__version__ = "0.1.0"
