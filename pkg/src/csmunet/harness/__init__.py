"""Toy network, synthetic data, training loop, sweeps and reports."""

from .config import RunConfig, from_mapping
from .train import TrainingDiverged, evaluate, sweep, train

__all__ = ["RunConfig", "from_mapping", "train", "evaluate", "sweep", "TrainingDiverged"]
