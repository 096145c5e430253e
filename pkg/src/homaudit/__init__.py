"""Homogeneity-bias audit toolkit.

Measures whether a generative model writes more mutually similar stories
about some social groups than others, across a sampling-hyperparameter
sweep: generate stories per facial-stimulus condition, embed them, take all
within-condition pairwise cosine similarities, standardize within each
hyperparameter setting, and fit random-intercept mixed models with Wald
inference.
"""

__version__ = "0.1.0"

from .core import (
    Condition,
    DesignError,
    Gender,
    HomAuditError,
    Knob,
    Race,
    Stimulus,
    StudyDesign,
    StudyPlan,
    SweepSpec,
    default_stimuli,
    validate_design,
)
from .lmm import ClusterStats, LmmFit, LmmSpec, fit_reml, fit_reml_arrays, profiled_reml_deviance, wald_p
from .similarity import PairId, SimilarityObservation, cosine, pair_count

__all__ = [
    "__version__",
    "Condition",
    "DesignError",
    "Gender",
    "HomAuditError",
    "Knob",
    "Race",
    "Stimulus",
    "StudyDesign",
    "StudyPlan",
    "SweepSpec",
    "default_stimuli",
    "validate_design",
    "ClusterStats",
    "LmmFit",
    "LmmSpec",
    "fit_reml",
    "fit_reml_arrays",
    "profiled_reml_deviance",
    "wald_p",
    "PairId",
    "SimilarityObservation",
    "cosine",
    "pair_count",
]
