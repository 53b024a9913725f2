from .checkpoint import load_checkpoint, save_checkpoint
from .layers import (
    BatchNormState,
    GraphBatch,
    batch_norm,
    dropout,
    gat_layer,
    gat_scores,
    gcn_layer,
    global_mean_pool,
    make_batch,
    normalize_adjacency,
)
from .models import (
    AttentionRecord,
    GraphClassifier,
    ModelConfig,
    gat_classifier_forward,
    gcn_classifier_forward,
)

__all__ = [
    "AttentionRecord",
    "BatchNormState",
    "GraphBatch",
    "GraphClassifier",
    "ModelConfig",
    "batch_norm",
    "dropout",
    "gat_classifier_forward",
    "gat_layer",
    "gat_scores",
    "gcn_classifier_forward",
    "gcn_layer",
    "global_mean_pool",
    "load_checkpoint",
    "make_batch",
    "normalize_adjacency",
    "save_checkpoint",
]
