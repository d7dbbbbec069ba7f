"""Deterministic simulation lab for Byzantine-resilient distributed non-convex SGD."""
from .attacks import AttackSpec
from .config import ConfigError, ExperimentConfig, load_config, parse_config, render_config
from .defenses import DefenseSpec
from .simulator import run, run_coupled_escape, theorem_params

__version__ = "0.1.0"

__all__ = [
    "AttackSpec",
    "ConfigError",
    "DefenseSpec",
    "ExperimentConfig",
    "load_config",
    "parse_config",
    "render_config",
    "run",
    "run_coupled_escape",
    "theorem_params",
]
