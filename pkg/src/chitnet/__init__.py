"""Two-branch infrared/visible image fusion network."""
from .network import CHITNet, NetSpec, fuse_pair
from .trainer import TrainConfig, Trainer, load_model, train
from .metrics import all_metrics, evaluate_corpus

__version__ = "0.1.0"

__all__ = ["CHITNet", "NetSpec", "fuse_pair", "TrainConfig", "Trainer", "load_model", "train",
           "all_metrics", "evaluate_corpus"]
