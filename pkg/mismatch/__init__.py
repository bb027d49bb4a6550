from . import version
from .network import build_network
from .network import forward
from .network import NetworkConfig
from .synth import DatasetSpec
from .synth import generate_dataset
from .training import fit
from .training import predict
from .training import TrainConfig
from .training import train

__all__ = [
    "build_network",
    "DatasetSpec",
    "fit",
    "forward",
    "generate_dataset",
    "NetworkConfig",
    "predict",
    "train",
    "TrainConfig",
]

__version__ = version.__version__
