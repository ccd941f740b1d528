"""Reverse-time nested matching for staggered-adoption panels.

Pipeline: ``load_panel`` -> ``run_rtnm`` -> ``estimate_att`` ->
``bootstrap_covariance`` -> ``wald_test``.
"""

from .bootstrap import CovarianceEstimate, bootstrap_covariance
from .distance import DistanceSpec, fit_metric
from .estimate import AttVector, GtIndex, estimate_att, naive_att
from .homogeneity import HypothesisSpec, TestResult, build_hypothesis, standard_hypotheses, wald_test
from .matching import FullMatchProblem, MatchBounds, solve_full_match
from .nested import NestedDesign, run_rtnm, verify_nested
from .panel import NEVER, PanelDataset, Schema, balance_report, covariate_window, load_panel, write_panel
from .simulate import DgpConfig, generate_panel, simulate

__version__ = "0.1.0"

__all__ = [
    "NEVER",
    "AttVector",
    "CovarianceEstimate",
    "DgpConfig",
    "DistanceSpec",
    "FullMatchProblem",
    "GtIndex",
    "HypothesisSpec",
    "MatchBounds",
    "NestedDesign",
    "PanelDataset",
    "Schema",
    "TestResult",
    "balance_report",
    "bootstrap_covariance",
    "build_hypothesis",
    "covariate_window",
    "estimate_att",
    "fit_metric",
    "generate_panel",
    "load_panel",
    "naive_att",
    "standard_hypotheses",
    "run_rtnm",
    "simulate",
    "solve_full_match",
    "verify_nested",
    "wald_test",
    "write_panel",
]
