"""Desk-scale preference-based RL laboratory."""

from .loop import RunConfig, final_window_return, normalized_return, run_experiment

__all__ = ["RunConfig", "run_experiment", "normalized_return", "final_window_return"]
__version__ = "0.1.0"
