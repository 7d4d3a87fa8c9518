"""Metrics, synthetic data, distribution shift and the experiment runner."""

from .experiment import ExperimentReport, normalize_config, run_experiment, trial_seed
from .metrics import (
    CoverageReport,
    coverage_deviation,
    interval_grid_size,
    mc_band,
    minmax_gap,
    miscoverage,
    set_size,
)
from .shift import Tilt, shift_harness, tilted_sample
from .synth import SynthConfig, sample, synth_generate, synth_groups

__all__ = [
    "CoverageReport", "ExperimentReport", "SynthConfig", "Tilt", "coverage_deviation",
    "interval_grid_size", "mc_band", "minmax_gap", "miscoverage", "normalize_config",
    "run_experiment", "sample", "set_size", "shift_harness", "synth_generate", "synth_groups",
    "tilted_sample", "trial_seed",
]
