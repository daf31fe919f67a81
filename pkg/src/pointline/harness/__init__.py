"""Synthetic-scene experiment harness: scene generation, metrics, drivers."""

from .config import HarnessConfig, parse_config
from .scene import GroundTruth, generate_scene
from .metrics import ExperimentReport, evaluate_solution, reports_to_csv, reports_to_json
from .experiments import (
    run_ba_experiment,
    run_covariance_ablation,
    run_drift_experiment,
    run_jacobian_check,
    run_matching_experiment,
    run_voma_pipeline,
)

__all__ = [
    "HarnessConfig",
    "parse_config",
    "GroundTruth",
    "generate_scene",
    "ExperimentReport",
    "evaluate_solution",
    "reports_to_csv",
    "reports_to_json",
    "run_ba_experiment",
    "run_covariance_ablation",
    "run_drift_experiment",
    "run_jacobian_check",
    "run_matching_experiment",
    "run_voma_pipeline",
]
