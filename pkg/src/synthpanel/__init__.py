"""Synthetic control estimation with permutation inference and DID comparisons."""

from __future__ import annotations

from .did import DidResult, did_estimate, event_study, sdid_estimate
from .errors import SynthPanelError
from .inference import (
    Bands,
    InferenceReport,
    PlaceboSet,
    confidence_bands,
    in_space_placebos,
    in_time_placebo,
    infer,
    leave_one_out,
    permutation_pvalue,
    rmse_ratio,
    weighted_pvalue,
)
from .panel import Panel, PredictorSpec, TreatmentSpec, build_design, load_panel
from .scm import GapSeries, TrainValSplit, WeightSolution, estimate_gaps, solve_v, solve_w
from .simgen import FactorDGP, FactorModelSpec, generate_factor_panel, null_battery, run_battery
from .study import StudyConfig, emit_plot_data, run_multi, run_study

__version__ = "0.1.0"

__all__ = [
    "Bands",
    "DidResult",
    "FactorDGP",
    "FactorModelSpec",
    "GapSeries",
    "InferenceReport",
    "Panel",
    "PlaceboSet",
    "PredictorSpec",
    "StudyConfig",
    "SynthPanelError",
    "TrainValSplit",
    "TreatmentSpec",
    "WeightSolution",
    "build_design",
    "confidence_bands",
    "did_estimate",
    "emit_plot_data",
    "estimate_gaps",
    "event_study",
    "generate_factor_panel",
    "in_space_placebos",
    "in_time_placebo",
    "infer",
    "leave_one_out",
    "load_panel",
    "null_battery",
    "permutation_pvalue",
    "rmse_ratio",
    "run_battery",
    "run_multi",
    "run_study",
    "sdid_estimate",
    "solve_v",
    "solve_w",
    "weighted_pvalue",
]
