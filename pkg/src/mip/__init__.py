"""Multi-interest preference retrieval: cluster-masked self-attention user
encoding, learned per-cluster weights and max-aggregated scoring."""

__version__ = "0.1.0"

from .clustering import ClusterAssignment, ClusterSpec
from .config import ModelConfig, RunConfig, TrainConfig
from .data import DatasetSplit, SequenceExample, load_split, save_split, synth_generate
from .metrics import EvalReport, auc, evaluate, ndcg_at_k, precision_at_k, profile_latency, recall_at_k
from .model import MIPModel
from .training import TrainReport, early_stop, train, train_joint, train_two_stage

__all__ = [
    "ClusterAssignment",
    "ClusterSpec",
    "DatasetSplit",
    "EvalReport",
    "MIPModel",
    "ModelConfig",
    "RunConfig",
    "SequenceExample",
    "TrainConfig",
    "TrainReport",
    "auc",
    "early_stop",
    "evaluate",
    "load_split",
    "ndcg_at_k",
    "precision_at_k",
    "profile_latency",
    "recall_at_k",
    "save_split",
    "synth_generate",
    "train",
    "train_joint",
    "train_two_stage",
]
