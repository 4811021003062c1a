"""Fault-tolerant federated anomaly detection on a simulated edge cluster."""

__version__ = "0.1.0"

from .errors import FedsimError  # noqa: E402
from .nn import ModelConfig, ModelParameters, init_model, predict  # noqa: E402
from .federation import FaultConfig, FederationConfig, run_federated_training  # noqa: E402
from .faults import CostModelConfig, WeibullModel, estimate_weibull, optimal_interval  # noqa: E402
from .metrics import auc_roc, compare_methods, ks_two_sample, mann_whitney_u  # noqa: E402

__all__ = [
    "CostModelConfig",
    "FaultConfig",
    "FederationConfig",
    "FedsimError",
    "ModelConfig",
    "ModelParameters",
    "WeibullModel",
    "auc_roc",
    "compare_methods",
    "estimate_weibull",
    "init_model",
    "ks_two_sample",
    "mann_whitney_u",
    "optimal_interval",
    "predict",
    "run_federated_training",
]
