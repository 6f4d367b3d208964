"""Experiment harness: configuration, pipelines, CLI and figures."""

from .config import ExperimentConfig, quick_config
from .pipeline import Workspace, run_matrix

__all__ = ["ExperimentConfig", "Workspace", "quick_config", "run_matrix"]
