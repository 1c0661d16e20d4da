"""Flexible personalized split federated learning at desk scale.

Clients keep a private input block, a private output head and ``round(q*M)``
middle blocks; the server runs the rest of the middle stack for each client
from one shared copy and never averages client parameters.
"""

from .config import ExperimentConfig, load_config, parse_config
from .data import FederationSpec, generate_federation
from .errors import ConfigError, FlexpError, InputError
from .model import ModelConfig, build_model, partition
from .protocols import Experiment, RunPlan, RunResult, run_protocol
from .sim import DeviceProfile

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DeviceProfile", "Experiment", "ExperimentConfig", "FederationSpec", "FlexpError",
    "InputError", "ModelConfig", "RunPlan", "RunResult", "build_model", "generate_federation", "load_config",
    "parse_config", "partition", "run_protocol",
]
