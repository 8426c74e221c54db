"""Graph-fused gamma lasso for censored compositional count maps.

Recovers per-molecule relative spatial rates from pixel-level count data
in which low counts fall below detection limits, using variational
inference with learned edge-wise fusion on the pixel grid.
"""

from .data import CountDataset, load_dataset, save_dataset
from .elbo import ElboBreakdown, elbo_estimate, elbo_grad
from .errors import (
    ConfigError,
    DataError,
    GfglError,
    NumericsError,
    OracleRegimeError,
    TrainingDivergedError,
)
from .graph import SpatialGraph, build_grid_graph
from .priors import PriorConfig
from .simulate import SimSpec, paper_like_spec, simulate, smoke_spec
from .trainer import FitResult, TrainConfig, fit, load_checkpoint, save_checkpoint
from .variational import FamilyConfig, VariationalParams, init_params, posterior_summary

__version__ = "0.1.0"

__all__ = [
    "CountDataset",
    "load_dataset",
    "save_dataset",
    "ElboBreakdown",
    "elbo_estimate",
    "elbo_grad",
    "GfglError",
    "DataError",
    "ConfigError",
    "NumericsError",
    "OracleRegimeError",
    "TrainingDivergedError",
    "SpatialGraph",
    "build_grid_graph",
    "PriorConfig",
    "SimSpec",
    "simulate",
    "paper_like_spec",
    "smoke_spec",
    "FitResult",
    "TrainConfig",
    "fit",
    "save_checkpoint",
    "load_checkpoint",
    "FamilyConfig",
    "VariationalParams",
    "init_params",
    "posterior_summary",
    "__version__",
]
