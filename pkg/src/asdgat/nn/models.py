"""End-to-end graph classifiers: the attention model and its GCN baseline."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..errors import ConfigError, DataError
from . import layers
from .layers import BatchNormState, GraphBatch


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults reproduce the published stack.

    ``head_width`` is the per-head output width, so each block emits
    ``heads * head_width`` features (8 x 256 = 2048 by default).
    """

    kind: str = "gat"
    in_dim: int = 316
    heads: int = 8
    head_width: int = 256
    n_blocks: int = 7
    fc_width: int = 1024
    dropout_first: float = 0.1
    dropout_rest: float = 0.2
    dropout_fc: float = 0.2
    leaky_slope: float = 0.2
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.kind not in ("gat", "gcn"):
            raise ConfigError(f"unknown model kind {self.kind!r}")
        for name in ("in_dim", "heads", "head_width", "n_blocks", "fc_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("dropout_first", "dropout_rest", "dropout_fc"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")

    @property
    def width(self) -> int:
        return self.heads * self.head_width

    def block_dropout(self, block: int) -> float:
        return self.dropout_first if block == 0 else self.dropout_rest

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AttentionRecord:
    layer_index: int
    src: np.ndarray
    dst: np.ndarray
    alpha: np.ndarray  # head-averaged, one per edge
    graph_index: np.ndarray  # owning graph of each edge


@dataclass
class ForwardResult:
    log_probs: Tensor
    embeddings: np.ndarray
    attention: list[AttentionRecord] = field(default_factory=list)


class GraphClassifier:
    """Blocks of [conv -> BatchNorm -> ELU -> Dropout], mean pool, FC1 -> ReLU -> Dropout, FC2, log-softmax."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | int = 0):
        self.config = config
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        c = config
        self.params: dict[str, Tensor] = {}
        self.norms: list[BatchNormState] = []
        d_in = c.in_dim
        for b in range(c.n_blocks):
            self.params[f"block{b}.W"] = ad.parameter(layers.glorot(rng, d_in, c.width))
            if c.kind == "gat":
                a = np.stack([layers.glorot(rng, 2 * c.head_width, 1, (2 * c.head_width,)) for _ in range(c.heads)])
                self.params[f"block{b}.att_dst"] = ad.parameter(a[:, :c.head_width].reshape(-1, 1))
                self.params[f"block{b}.att_src"] = ad.parameter(a[:, c.head_width:].reshape(-1, 1))
            bn = BatchNormState.create(c.width, c.bn_momentum, c.bn_eps)
            self.params[f"block{b}.bn.gamma"] = bn.gamma
            self.params[f"block{b}.bn.beta"] = bn.beta
            self.norms.append(bn)
            d_in = c.width
        self.params["fc1.W"] = ad.parameter(layers.glorot(rng, c.width, c.fc_width))
        self.params["fc1.b"] = ad.parameter(np.zeros((1, c.fc_width)))
        self.params["fc2.W"] = ad.parameter(layers.glorot(rng, c.fc_width, 2))
        self.params["fc2.b"] = ad.parameter(np.zeros((1, 2)))

    def attention_vector(self, block: int, head: int) -> np.ndarray:
        """The 2*head_width attention vector [a_dst || a_src] of one head."""
        w = self.config.head_width
        sl = slice(head * w, (head + 1) * w)
        return np.concatenate([self.params[f"block{block}.att_dst"].data[sl, 0],
                               self.params[f"block{block}.att_src"].data[sl, 0]])

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for b, bn in enumerate(self.norms):
            out[f"block{b}.bn.running_mean"] = bn.running_mean
            out[f"block{b}.bn.running_var"] = bn.running_var
        return out

    def set_buffers(self, buffers: dict[str, np.ndarray]) -> None:
        for b, bn in enumerate(self.norms):
            bn.running_mean = np.array(buffers[f"block{b}.bn.running_mean"], dtype=np.float64)
            bn.running_var = np.array(buffers[f"block{b}.bn.running_var"], dtype=np.float64)

    def state(self) -> dict[str, np.ndarray]:
        """Copy of all parameters and running statistics."""
        out = {k: p.data.copy() for k, p in self.params.items()}
        out.update({k: v.copy() for k, v in self.buffers().items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise DataError(f"parameter {k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=np.float64, copy=True)
        self.set_buffers(state)

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def forward(self, batch: GraphBatch, train: bool = False, rng: np.random.Generator | None = None,
                extract_attention: bool = False) -> ForwardResult:
        c = self.config
        if batch.features.shape[1] != c.in_dim:
            raise DataError(f"feature width {batch.features.shape[1]} != model input width {c.in_dim}")
        if train and rng is None:
            raise ValueError("train-mode forward needs an rng for dropout")
        h = ad.constant(batch.features)
        n = batch.n_nodes
        records = []
        edge_norm = layers.gcn_edge_weights(batch.src, batch.dst, n) if c.kind == "gcn" else None
        for b in range(c.n_blocks):
            p = self.params
            if c.kind == "gat":
                h, alpha = layers.gat_layer(h, batch.src, batch.dst, p[f"block{b}.W"], p[f"block{b}.att_dst"],
                                            p[f"block{b}.att_src"], c.heads, c.leaky_slope)
                if extract_attention:
                    records.append(AttentionRecord(b, batch.src, batch.dst, alpha, batch.graph_index[batch.dst]))
            else:
                h = layers.gcn_layer(h, batch.src, batch.dst, p[f"block{b}.W"], edge_norm=edge_norm)
            h = layers.batch_norm(h, self.norms[b], train)
            h = ad.elu(h)
            h = layers.dropout(h, c.block_dropout(b), train, rng)
        pooled = layers.global_mean_pool(h, batch.graph_index, batch.n_graphs)
        z = ad.relu(layers.linear(pooled, self.params["fc1.W"], self.params["fc1.b"]))
        embeddings = z.data.copy()
        z = layers.dropout(z, c.dropout_fc, train, rng)
        logits = layers.linear(z, self.params["fc2.W"], self.params["fc2.b"])
        return ForwardResult(ad.log_softmax(logits, axis=1), embeddings, records)

    def __call__(self, graphs, train=False, rng=None, extract_attention=False) -> ForwardResult:
        return self.forward(layers.make_batch(graphs), train, rng, extract_attention)

    def predict_log_proba(self, graphs, features=None, chunk: int = 256) -> np.ndarray:
        """Eval-mode log-probabilities, evaluated in chunks."""
        out = []
        for lo in range(0, len(graphs), chunk):
            part = graphs[lo:lo + chunk]
            feats = None if features is None else features[lo:lo + chunk]
            out.append(self.forward(layers.make_batch(part, feats)).log_probs.data)
        return np.concatenate(out) if out else np.zeros((0, 2))


def gat_classifier_forward(graphs, model: GraphClassifier, train=False, rng=None, extract_attention=False):
    if model.config.kind != "gat":
        raise ConfigError("gat_classifier_forward needs a GAT model")
    r = model(graphs, train, rng, extract_attention)
    return r.log_probs, r.embeddings, r.attention


def gcn_classifier_forward(graphs, model: GraphClassifier, train=False, rng=None):
    if model.config.kind != "gcn":
        raise ConfigError("gcn_classifier_forward needs a GCN model")
    return model(graphs, train, rng).log_probs
