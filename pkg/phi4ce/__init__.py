"""Desk-scale cluster-expansion laboratory for the regularized φ⁴ model."""

from phi4ce.covariance import KernelParams, covariance, decay_constant, full_covariance, kernel
from phi4ce.errors import (CapabilityError, ConfigError, DomainError, ExpansionError, NonContractionError,
                           SingularityError)
from phi4ce.gaussian import CovarianceMatrix, GaussianIntegrator, Grid, interpolate, wick_moment
from phi4ce.geometry import PointConfiguration, mst_length, set_tree_length, steiner_length
from phi4ce.ksolver import KSConfig, KSSolver, schwinger_expansion, solve_fixed_point
from phi4ce.model import LatticeModel, ModelParams, SchwingerRequest, SourceField
from phi4ce.trees import OrderedTree, enumerate_trees, lemma3_sum, speer_weight

__version__ = "0.1.0"
