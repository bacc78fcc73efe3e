"""Label inference against secure aggregation in FedSGD with per-client fishing models."""
from .attack import FishingServer, build_fishing_models, disaggregate, infer_labels, run_attack
from .errors import SaleakError
from .federation import FederationState, RoundConfig, run_round
from .nn import Model, cnn_bn, fcn3

__version__ = "0.1.0"

__all__ = [
    "FederationState", "FishingServer", "Model", "RoundConfig", "SaleakError", "build_fishing_models",
    "cnn_bn", "disaggregate", "fcn3", "infer_labels", "run_attack", "run_round",
]
