"""Sampling designs for sparse functional data.

Generate incidence designs for a pilot study, fit functional PCA to the
sparse pilot data, and pick the next study's observation points by the
recovered-variance criterion.
"""

from .criteria import CriterionReport, are, composite, f_value, f_values, mise, rrmse
from .design_gen import (
    DesignSpec,
    IncidenceMatrix,
    TargetConcurrence,
    compute_target_concurrence,
    concurrence,
    generate_bibd,
    generate_design,
    generate_hybrid_design,
    generate_hybrid_design_adaptive,
)
from .design_search import SearchMethod, ThresholdReport, search_optimal, threshold_analysis
from .errors import (
    ConstructionFailed,
    DegenerateCovariance,
    InfeasibleSpec,
    InsufficientData,
    InsufficientSubjects,
    ParseError,
    PilotDesignError,
    ValidationError,
)
from .fpca_pace import FpcaModel, PaceOptions, SparseDataset, fit_pace, predict_scores
from .sim_harness import ExperimentResult, SimConfig, real_data_experiment, run_experiment

__version__ = "0.1.0"

__all__ = [
    "ConstructionFailed", "CriterionReport", "DegenerateCovariance", "DesignSpec",
    "ExperimentResult", "FpcaModel", "IncidenceMatrix", "InfeasibleSpec", "InsufficientData",
    "InsufficientSubjects", "PaceOptions", "ParseError", "PilotDesignError", "SearchMethod",
    "SimConfig", "SparseDataset", "TargetConcurrence", "ThresholdReport", "ValidationError",
    "are", "composite", "compute_target_concurrence", "concurrence", "f_value", "f_values",
    "fit_pace", "generate_bibd", "generate_design", "generate_hybrid_design",
    "generate_hybrid_design_adaptive", "mise", "predict_scores", "real_data_experiment",
    "rrmse", "run_experiment", "search_optimal", "threshold_analysis",
]
