"""Federated learning simulator with sybil-amplified data poisoning."""
from .models import Model, build_model, init_params
from .data import LabeledDataset
from .config import ExperimentConfig, build_config

__all__ = ["Model", "build_model", "init_params", "LabeledDataset", "ExperimentConfig", "build_config"]
__version__ = "0.1.0"
