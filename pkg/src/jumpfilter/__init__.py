"""Filtering for partially observed jump-diffusions with common jump times."""

__version__ = "0.1.0"

from .config import load_config, load_model
from .measure import density_processes, martingale_check, protter_shimbo_report
from .model import FiniteStateSignalModel, JumpDiffusionSystem, MarkSpace, ModelError, validate_assumptions
from .oracle import grid_bayes_filter, particle_filter
from .sim import ObservationPath, extract_observation, simulate_path
from .zakai import FilterError, FilterTrajectory, run_ks, run_zakai

__all__ = [
    "FiniteStateSignalModel", "JumpDiffusionSystem", "MarkSpace", "ModelError", "validate_assumptions",
    "ObservationPath", "extract_observation", "simulate_path",
    "FilterError", "FilterTrajectory", "run_ks", "run_zakai",
    "grid_bayes_filter", "particle_filter",
    "density_processes", "martingale_check", "protter_shimbo_report",
    "load_config", "load_model", "__version__",
]
