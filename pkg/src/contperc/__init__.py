"""Continuum percolation of inclusion models and homogenization with stiff inclusions."""
from .rng import SeedKey
from .geometry import Ball, Compound, Polytope, RasterSet, RasterShape, Window, shape_distance
from .point_processes import PointSample, ProcessConfig, resample_cell, sample_process
from .inclusions import InclusionSet, ModelSpec, RadiusLaw
from .clusters import ClusterDecomposition, TailEstimate, decompose, fit_decay, typical_cluster_tail
from .connectivity import (CertifierInput, ConnectivityEstimate, SiteField, buckling_certify, discretize,
                           theta_estimate)
from .radii import action_radius, boolean_radius_map, dependence_radius, radius_tail_bound
from .cluster_geometry import FattenedCluster, build_cutoff, fatten, verify_ball_conditions
from .effective import CoefficientField, CorrectorSolution, EffectiveTensor, assemble_field, effective_tensor

__all__ = [
    "SeedKey", "Ball", "Compound", "Polytope", "RasterSet", "RasterShape", "Window", "shape_distance",
    "PointSample", "ProcessConfig", "resample_cell", "sample_process",
    "InclusionSet", "ModelSpec", "RadiusLaw",
    "ClusterDecomposition", "TailEstimate", "decompose", "fit_decay", "typical_cluster_tail",
    "CertifierInput", "ConnectivityEstimate", "SiteField", "buckling_certify", "discretize", "theta_estimate",
    "action_radius", "boolean_radius_map", "dependence_radius", "radius_tail_bound",
    "FattenedCluster", "build_cutoff", "fatten", "verify_ball_conditions",
    "CoefficientField", "CorrectorSolution", "EffectiveTensor", "assemble_field", "effective_tensor",
]
__version__ = "0.1.0"
