"""Federated learning simulator with a validation-based poisoning defense."""
from .config import SimConfig, get_preset, load_config
from .simulation import run_simulation

__version__ = "0.1.0"

__all__ = ["SimConfig", "get_preset", "load_config", "run_simulation", "__version__"]
