"""Graph layers built from autodiff primitives.

All layers operate on a :class:`GraphBatch`, the disjoint union of several
graphs: node rows are stacked and edge indices offset so one call processes
the whole mini-batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..errors import DataError


@dataclass
class GraphBatch:
    features: np.ndarray  # (N, d)
    src: np.ndarray  # directed edges incl. self-loops
    dst: np.ndarray
    graph_index: np.ndarray  # (N,) graph id per node
    n_graphs: int
    labels: np.ndarray
    ids: list[str]

    @property
    def n_nodes(self) -> int:
        return self.features.shape[0]


def make_batch(graphs, features: list[np.ndarray] | None = None) -> GraphBatch:
    """Stack graphs into one batch; self-loops are appended here.

    ``features`` optionally overrides each graph's node features while keeping
    its topology (used by the explainers).
    """
    feats, srcs, dsts, owner = [], [], [], []
    offset = 0
    for g_idx, g in enumerate(graphs):
        x = g.features if features is None else features[g_idx]
        n = x.shape[0]
        if n != g.n_nodes:
            raise DataError(f"graph {g.id}: feature rows {n} != nodes {g.n_nodes}")
        d = g.directed_edges()
        loops = np.arange(n)
        srcs.append(np.concatenate([d[:, 0], loops]) + offset)
        dsts.append(np.concatenate([d[:, 1], loops]) + offset)
        feats.append(x)
        owner.append(np.full(n, g_idx))
        offset += n
    widths = {f.shape[1] for f in feats}
    if len(widths) != 1:
        raise DataError(f"feature widths differ within batch: {sorted(widths)}")
    return GraphBatch(
        features=np.concatenate(feats).astype(np.float64),
        src=np.concatenate(srcs).astype(np.int64),
        dst=np.concatenate(dsts).astype(np.int64),
        graph_index=np.concatenate(owner).astype(np.int64),
        n_graphs=len(graphs),
        labels=np.array([g.label for g in graphs], dtype=np.int64),
        ids=[g.id for g in graphs],
    )


def normalize_adjacency(adjacency) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 for a symmetric 0/1 adjacency with zero diagonal."""
    a = np.asarray(adjacency, dtype=np.float64)
    if a.shape[0] != a.shape[1] or not np.array_equal(a, a.T):
        raise DataError("adjacency must be square and symmetric")
    a_tilde = a + np.eye(a.shape[0])
    inv_sqrt = 1.0 / np.sqrt(a_tilde.sum(axis=1))
    return inv_sqrt[:, None] * a_tilde * inv_sqrt[None, :]


def gcn_edge_weights(src: np.ndarray, dst: np.ndarray, n_nodes: int) -> np.ndarray:
    """Per-edge entries of the normalized adjacency for a self-loop-augmented edge list."""
    deg = np.bincount(dst, minlength=n_nodes).astype(np.float64)
    return 1.0 / np.sqrt(deg[src] * deg[dst])


def gcn_layer(h: Tensor, src, dst, weight: Tensor, activation=None, edge_norm=None) -> Tensor:
    """activation(A_norm @ H @ W), aggregated sparsely along the edge list."""
    if h.shape[1] != weight.shape[0]:
        raise ad.ShapeError(f"gcn_layer: H width {h.shape[1]} != W rows {weight.shape[0]}")
    n = h.shape[0]
    if edge_norm is None:
        edge_norm = gcn_edge_weights(src, dst, n)
    hw = ad.matmul(h, weight)
    msg = ad.multiply(ad.gather_rows(hw, src), ad.constant(edge_norm[:, None]))
    out = ad.scatter_add_rows(msg, dst, n)
    return activation(out) if activation is not None else out


def head_mask(heads: int, head_width: int) -> np.ndarray:
    """(heads*head_width, heads) indicator: row r belongs to head r // head_width."""
    m = np.zeros((heads * head_width, heads))
    for k in range(heads):
        m[k * head_width:(k + 1) * head_width, k] = 1.0
    return m


def gat_scores(h: Tensor, src, dst, weight: Tensor, att_dst: Tensor, att_src: Tensor, heads: int,
               slope: float = 0.2) -> tuple[Tensor, Tensor]:
    """Projected features and per-edge, per-head attention coefficients.

    For edge j -> i and head k: e = LeakyReLU(a_k . [W_k h_i || W_k h_j]),
    normalised by softmax over all edges entering i.

    Returns:
        (Wh of shape (N, heads*head_width), alpha of shape (E, heads))
    """
    if h.shape[1] != weight.shape[0]:
        raise ad.ShapeError(f"gat_layer: H width {h.shape[1]} != W rows {weight.shape[0]}")
    width = weight.shape[1]
    if width % heads:
        raise ad.ShapeError("projection width must be a multiple of heads")
    mask = ad.constant(head_mask(heads, width // heads))
    wh = ad.matmul(h, weight)
    # block-diagonal (width, heads) matrices holding one attention half per head
    score_dst = ad.matmul(wh, ad.multiply(mask, att_dst))
    score_src = ad.matmul(wh, ad.multiply(mask, att_src))
    e = ad.add(ad.gather_rows(score_dst, dst), ad.gather_rows(score_src, src))
    e = ad.leaky_relu(e, slope)
    alpha = ad.segment_softmax(e, dst, h.shape[0])
    return wh, alpha


def gat_layer(h: Tensor, src, dst, weight: Tensor, att_dst: Tensor, att_src: Tensor, heads: int,
              slope: float = 0.2) -> tuple[Tensor, np.ndarray]:
    """Multi-head attention aggregation with concatenated heads.

    Returns the (N, heads*head_width) output and the head-averaged alpha per edge.
    """
    wh, alpha = gat_scores(h, src, dst, weight, att_dst, att_src, heads, slope)
    mask = head_mask(heads, weight.shape[1] // heads)
    alpha_wide = ad.matmul(alpha, ad.constant(mask.T))
    msg = ad.multiply(ad.gather_rows(wh, src), alpha_wide)
    out = ad.scatter_add_rows(msg, dst, h.shape[0])
    return out, alpha.data.mean(axis=1)


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, width: int, momentum: float = 0.1, eps: float = 1e-5) -> BatchNormState:
        return cls(ad.parameter(np.ones((1, width))), ad.parameter(np.zeros((1, width))),
                   np.zeros(width), np.ones(width), momentum, eps)


def batch_norm(x: Tensor, state: BatchNormState, train: bool) -> Tensor:
    """Feature-wise normalisation over the node axis.

    Train mode uses batch statistics (biased variance) and updates the running
    estimates with the unbiased variance; eval mode uses the running estimates.
    """
    if train:
        n = x.shape[0]
        if n < 2:
            raise DataError("batch_norm in train mode needs at least 2 rows")
        mu = ad.mean(x, axis=0, keepdims=True)
        xc = ad.add(x, ad.scale(mu, -1.0))
        var = ad.mean(ad.multiply(xc, xc), axis=0, keepdims=True)
        inv_std = ad.exp(ad.scale(ad.log(ad.add(var, ad.constant(state.eps))), -0.5))
        xhat = ad.multiply(xc, inv_std)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu.data[0]
        state.running_var = (1 - m) * state.running_var + m * var.data[0] * n / (n - 1)
    else:
        shift = ad.constant(-state.running_mean[None, :])
        inv_std = ad.constant(1.0 / np.sqrt(state.running_var[None, :] + state.eps))
        xhat = ad.multiply(ad.add(x, shift), inv_std)
    return ad.add(ad.multiply(xhat, state.gamma), state.beta)


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity in eval mode or when p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout p must lie in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    keep = rng.random(x.shape) >= p
    return ad.multiply(x, ad.constant(keep / (1.0 - p)))


def global_mean_pool(h: Tensor, graph_index, n_graphs: int) -> Tensor:
    graph_index = np.asarray(graph_index, dtype=np.int64)
    counts = np.bincount(graph_index, minlength=n_graphs).astype(np.float64)
    if np.any(counts == 0):
        raise DataError("global_mean_pool: a graph has no nodes")
    summed = ad.scatter_add_rows(h, graph_index, n_graphs)
    return ad.multiply(summed, ad.constant(1.0 / counts[:, None]))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, weight), bias)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))
