"""Estimate a fixed model's performance on an unlabeled target set by
importance-weighting labeled source data over user-defined slices."""

__version__ = "0.1.0"

from .slice_core import (  # noqa: E402
    CorrectionMatrix,
    CorrectionTable,
    DependencyGraph,
    InputError,
    SliceMatrix,
    ValidationReport,
    infer_edges,
    validate_inputs,
)
from .graphical_model import JointModelParams, PotentialMap, marginalize, sample_joint  # noqa: E402
from .kliep import SolverConfig, build_weights, gradient, objective, solve, split_source  # noqa: E402
from .estimator import BoundInputs, Estimate, effective_sample_size, theorem1_bound, weighted_estimate  # noqa: E402
from .weights import WeightVector  # noqa: E402

__all__ = [
    "BoundInputs",
    "CorrectionMatrix",
    "CorrectionTable",
    "DependencyGraph",
    "Estimate",
    "InputError",
    "JointModelParams",
    "PotentialMap",
    "SliceMatrix",
    "SolverConfig",
    "ValidationReport",
    "WeightVector",
    "build_weights",
    "effective_sample_size",
    "gradient",
    "infer_edges",
    "marginalize",
    "objective",
    "sample_joint",
    "solve",
    "split_source",
    "theorem1_bound",
    "validate_inputs",
    "weighted_estimate",
]
