"""Change detection with a segmentor, a generator and a discriminator.

One framework covers unsupervised (USCD), weakly supervised (WSCD),
regional supervised (RSCD) and fully supervised (FSCD) change detection on
bi-temporal remote-sensing pairs.
"""

__version__ = "0.1.0"

from .losses import LossWeights
from .networks import Discriminator, Generator, NetworkConfig, Networks, Segmentor
from .training import PairSet, TrainConfig, TrainReport, predict, predict_proba, train

__all__ = [
    "Discriminator",
    "Generator",
    "LossWeights",
    "NetworkConfig",
    "Networks",
    "PairSet",
    "Segmentor",
    "TrainConfig",
    "TrainReport",
    "predict",
    "predict_proba",
    "train",
    "__version__",
]
