"""Federated-learning backdoor simulator with the TrojanDam server-side defense."""

from .engine import Model, NetworkSpec, ParameterSet, small_cnn
from .estimator import CNNClassifier

__version__ = "0.1.0"
__all__ = ["Model", "NetworkSpec", "ParameterSet", "small_cnn", "CNNClassifier"]
