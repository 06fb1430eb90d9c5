"""Experiment harness: specs, runs, evaluation, plots and the ``flowiar`` CLI."""

from .config import ExperimentSpec, apply_overrides, load_spec, parse_override, save_spec, spec_from_dict
from .experiment import (
    ABLATIONS,
    ablation_specs,
    config_diff,
    evaluate_checkpoint,
    replay_manifest,
    run_ablation,
    run_spec,
    valid_fraction_trend,
)
from .plotting import aggregate, best_till_now, load_curves, plot_runs, render_from_data

__all__ = [
    "ABLATIONS",
    "ExperimentSpec",
    "ablation_specs",
    "aggregate",
    "apply_overrides",
    "best_till_now",
    "config_diff",
    "evaluate_checkpoint",
    "load_curves",
    "load_spec",
    "parse_override",
    "plot_runs",
    "render_from_data",
    "replay_manifest",
    "run_ablation",
    "run_spec",
    "save_spec",
    "spec_from_dict",
    "valid_fraction_trend",
]
