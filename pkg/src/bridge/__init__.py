"""Sequence-on-graph representation learning with token-level cross-attention message passing."""

from .data import Dataset, Graph, Vocab, generate_synthetic, ingest_dataset
from .layers import LayerSpec
from .model import BridgeModel, ModelConfig, bridge_forward
from .tasks import TrainConfig, evaluate_fraud, evaluate_link, train

__version__ = "0.1.0"

__all__ = ["Dataset", "Graph", "Vocab", "generate_synthetic", "ingest_dataset", "LayerSpec",
           "BridgeModel", "ModelConfig", "bridge_forward", "TrainConfig", "evaluate_fraud",
           "evaluate_link", "train"]
