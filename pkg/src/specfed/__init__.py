"""Collaborative spectrum sensing with power-weighted federated learning and RL scheduling."""
from . import convergence, federation, fusion, nn, scheduling, sensing, specgen
from .federation import FederatedSensingEstimator
from .sensing import SpectrumSensingClassifier

__version__ = "0.1.0"

__all__ = ["convergence", "federation", "fusion", "nn", "scheduling", "sensing", "specgen",
           "FederatedSensingEstimator", "SpectrumSensingClassifier", "__version__"]
