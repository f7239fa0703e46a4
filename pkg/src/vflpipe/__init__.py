"""Vertical federated learning pipeline: multi-party id alignment, cluster
coresets and weighted split-model training over a simulated network."""

from .core import Task, VerticalDataset, generate_blobs, generate_planted_clusters
from .coreset import build_coreset
from .federation import Federation
from .mpsi import Policy, Topology, run_mpsi
from .tpsi import TpsiProtocol, run_tpsi
from .train import ModelKind, TrainConfig, knn_predict, train_until_converged

__all__ = [
    "Task", "VerticalDataset", "generate_blobs", "generate_planted_clusters", "build_coreset",
    "Federation", "Policy", "Topology", "run_mpsi", "TpsiProtocol", "run_tpsi", "ModelKind",
    "TrainConfig", "knn_predict", "train_until_converged",
]
__version__ = "0.1.0"
