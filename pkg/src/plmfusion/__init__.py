"""Partially linear models that borrow strength from external summary statistics."""

from plmfusion.bandwidth import DEFAULT_S_GRID, BandwidthSearch, cv_scores, dbe_beta, loo_cv_score, select_bandwidth
from plmfusion.errors import (
    ConvergenceError,
    InfeasibleConstraintError,
    NegativeVarianceError,
    PlmFusionError,
    RankDeficiencyError,
    RateOutOfRangeError,
    SingularDesignError,
    ValidationError,
)
from plmfusion.evidence import (
    SummaryEvidence,
    Weights,
    WorkingModel,
    meta_combine,
    solve_el_joint,
    solve_el_weights,
    solve_internal_theta,
    weights_ib1,
    weights_ib2,
    working_score,
)
from plmfusion.inference import (
    SandwichComponents,
    WaldRow,
    curve_variance,
    external_fraction,
    sandwich_components,
    variance_beta,
    wald_summary,
)
from plmfusion.io import FitReport, read_dataset, read_evidence, write_dataset, write_evidence
from plmfusion.plm import Dataset, PlmFit, estimate_curve, fit_pls, fit_weighted_pls, profile
from plmfusion.simulation import SimConfig, SimResult, generate_case, run_monte_carlo, true_theta_oracle
from plmfusion.smoother import Bandwidth, SmootherMatrix, bandwidth_from_rate, build_smoother, fixed_bandwidth
from plmfusion.workflow import curve_on_grid, fit_report

__version__ = "0.1.0"
