"""Experiment harness: presets, episode runner, sweeps, persistence, CLI."""

from .config import ExperimentConfig, PRESETS, ScenarioSpec, build_world, load_config
from .simulate import EpisodeModels, MetricRecord, build_models, collect_offline_dataset, run_episode
from .sweep import allocation_report, sweep_budgets

__all__ = [
    "ExperimentConfig",
    "PRESETS",
    "ScenarioSpec",
    "build_world",
    "load_config",
    "EpisodeModels",
    "MetricRecord",
    "build_models",
    "collect_offline_dataset",
    "run_episode",
    "allocation_report",
    "sweep_budgets",
]
