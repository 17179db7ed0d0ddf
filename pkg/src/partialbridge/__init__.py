"""Partially bridging vaccine efficacy from completed trials to a new population.

The lower bound on marginal efficacy in a target population is estimated from
biomarker draws in that population, completed randomized trials, and
user-specified bounds on the target's conditional unvaccinated risk.
"""

from .bridge import (
    Bridge,
    BridgeEstimate,
    CurveResult,
    FluctuationResult,
    WorstCaseAllocation,
    adaptive_weights,
    build_bridge,
    curve,
    fit_nuisances,
    fluctuate,
    lower_confidence_bound,
    phi_estimate,
    population_bridge,
    population_phi,
    prepare,
    remainder_diagnostics,
    risk_envelope,
    ve_minus,
)
from .data import (
    AnalysisConfig,
    BoundFn,
    BoundsSpec,
    MultiTrialData,
    TrialSample,
    ValidatedBounds,
    load_config,
    load_trials,
    preset_bounds,
    validate_bounds,
    write_trials,
)
from .monotone import phi_estimate_monotone, solve_allocation_monotone
from .twophase import CensoringFit, fit_censoring, ipcw_estimate, nested_case_control_sample, prepare_ipcw

__all__ = [
    "AnalysisConfig", "BoundFn", "BoundsSpec", "Bridge", "BridgeEstimate", "CensoringFit", "CurveResult",
    "FluctuationResult", "MultiTrialData", "TrialSample", "ValidatedBounds", "WorstCaseAllocation",
    "adaptive_weights", "build_bridge", "curve", "fit_censoring", "fit_nuisances", "fluctuate",
    "ipcw_estimate", "load_config", "load_trials", "lower_confidence_bound", "nested_case_control_sample",
    "phi_estimate", "phi_estimate_monotone", "population_bridge", "population_phi", "prepare",
    "prepare_ipcw", "preset_bounds", "remainder_diagnostics", "risk_envelope", "solve_allocation_monotone",
    "ve_minus", "validate_bounds", "write_trials",
]
