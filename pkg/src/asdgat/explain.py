"""Region importance from Kernel SHAP and from extracted attention weights."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericError
from .nn.layers import make_batch
from .nn.models import GraphClassifier

EXACT_LIMIT = 4096


def shapley_kernel_weight(m: int, s: int) -> float:
    """Kernel weight of a coalition of size ``s`` out of ``m`` features (0 < s < m)."""
    return (m - 1) / (math.comb(m, s) * s * (m - s))


def exact_shapley(value_fn, m: int) -> np.ndarray:
    """Shapley values by the permutation-weighted definition over all 2^m coalitions.

    ``value_fn`` maps a boolean mask of length ``m`` to the coalition's value.
    """
    masks = np.array(list(itertools.product((False, True), repeat=m)), dtype=bool)
    values = {tuple(mask): value_fn(mask) for mask in masks}
    phi = np.zeros(m)
    fact = math.factorial
    for mask in masks:
        s = int(mask.sum())
        base = values[tuple(mask)]
        for i in np.flatnonzero(~mask):
            with_i = mask.copy()
            with_i[i] = True
            w = fact(s) * fact(m - s - 1) / fact(m)
            phi[i] += w * (values[tuple(with_i)] - base)
    return phi


def _all_coalitions(m: int) -> tuple[np.ndarray, np.ndarray]:
    masks = np.array(list(itertools.product((0, 1), repeat=m)), dtype=np.float64)
    sizes = masks.sum(axis=1)
    keep = (sizes > 0) & (sizes < m)
    masks = masks[keep]
    weights = np.array([shapley_kernel_weight(m, int(s)) for s in masks.sum(axis=1)])
    return masks, weights


def _sampled_coalitions(m: int, n_samples: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Every size-1 and size-(m-1) coalition, then kernel-weighted random ones."""
    eye = np.eye(m)
    masks = [eye, 1.0 - eye]
    weights = [np.full(2 * m, shapley_kernel_weight(m, 1))]
    inner = np.arange(2, m - 1)
    n_rest = n_samples - 2 * m
    if n_rest > 0 and inner.size:
        mass = (m - 1) / (inner * (m - inner))
        sizes = rng.choice(inner, size=n_rest, p=mass / mass.sum())
        drawn = np.zeros((n_rest, m))
        for row, s in enumerate(sizes):
            drawn[row, rng.choice(m, size=s, replace=False)] = 1.0
        masks.append(drawn)
        weights.append(np.full(n_rest, mass.sum() / n_rest))
    return np.concatenate(masks), np.concatenate(weights)


def kernel_shap(model_fn, background, x, n_coalition_samples: int = 2048, seed: int = 0,
                max_retries: int = 3) -> np.ndarray:
    """Kernel SHAP against the mean of ``background``.

    ``model_fn`` maps a (k, M) array of inputs to k scalar outputs. Masked
    features take the background mean. The weighted regression is solved with
    the efficiency constraint eliminated, so the values always sum to
    ``f(x) - f(reference)``. Coalitions are enumerated exactly whenever
    ``2**M <= 4096``.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    background = np.atleast_2d(np.asarray(background, dtype=np.float64))
    if background.shape[0] == 0:
        raise DataError("kernel_shap needs a non-empty background")
    m = x.size
    if background.shape[1] != m:
        raise DataError(f"background width {background.shape[1]} != input width {m}")
    reference = background.mean(axis=0)
    f_x, f_ref = np.asarray(model_fn(np.stack([x, reference])), dtype=np.float64).reshape(2)
    delta = f_x - f_ref
    if m == 1:
        return np.array([delta])

    rng = np.random.default_rng(seed)
    n = n_coalition_samples
    for _ in range(max_retries + 1):
        if 2**m <= EXACT_LIMIT:
            masks, weights = _all_coalitions(m)
        else:
            masks, weights = _sampled_coalitions(m, n, rng)
        inputs = masks * x + (1.0 - masks) * reference
        y = np.asarray(model_fn(inputs), dtype=np.float64).reshape(-1) - f_ref
        # substitute phi_last = delta - sum(others)
        design = masks[:, :-1] - masks[:, -1:]
        target = y - masks[:, -1] * delta
        sw = np.sqrt(weights)
        coef, _, rank, _ = np.linalg.lstsq(design * sw[:, None], target * sw, rcond=None)
        if rank == m - 1:
            return np.append(coef, delta - coef.sum())
        n *= 2
    raise NumericError("singular Kernel SHAP regression; increase n_coalition_samples")


@dataclass
class ShapReport:
    values: np.ndarray  # (n, d) per feature, or (n,) for region-level masking
    region_scores: np.ndarray
    region_names: list[str]
    expected_value: float
    prediction: float
    level: str = "feature"

    def ranking(self, by_abs: bool = False) -> list[tuple[str, float]]:
        key = np.abs(self.region_scores) if by_abs else self.region_scores
        order = np.argsort(-key, kind="stable")
        return [(self.region_names[i], float(self.region_scores[i])) for i in order]


def _positive_prob(model: GraphClassifier, graph, flat_rows: np.ndarray, shape, chunk: int) -> np.ndarray:
    feats = [row.reshape(shape) for row in flat_rows]
    lp = model.predict_log_proba([graph] * len(feats), features=feats, chunk=chunk)
    return np.exp(lp[:, 1])


def subject_shap(model: GraphClassifier, background_graphs, graph, n_coalition_samples: int = 2048,
                 seed: int = 0, level: str = "feature", chunk: int = 256) -> ShapReport:
    """Kernel SHAP of one subject's positive-class probability.

    The subject's feature matrix is flattened; the wrapper reshapes candidate
    vectors back to ``n x d`` and evaluates them on the subject's own graph in
    eval mode. ``level="region"`` masks whole feature rows (one player per
    region) instead of single features.
    """
    if model is None:
        raise DataError("subject_shap needs a trained model")
    x = graph.features
    n, d = x.shape
    if d != model.config.in_dim:
        raise DataError(f"feature width {d} != model input width {model.config.in_dim}")
    bg = np.stack([g.features for g in background_graphs])
    if bg.shape[1:] != x.shape:
        raise DataError("background graphs must match the subject's feature shape")

    if level == "feature":
        def fn(z):
            return _positive_prob(model, graph, z, (n, d), chunk)
        phi = kernel_shap(fn, bg.reshape(len(bg), -1), x.reshape(-1), n_coalition_samples, seed)
        values = phi.reshape(n, d)
        region_scores = values.mean(axis=1)
    elif level == "region":
        reference = bg.mean(axis=0)

        def fn(masks):
            # masks here are region-level coalition rows, expanded to full matrices
            full = masks[:, :, None] * x[None] + (1 - masks[:, :, None]) * reference[None]
            return _positive_prob(model, graph, full.reshape(len(masks), -1), (n, d), chunk)

        # region players: "present" is 1, "absent" is 0; background of all zeros means fully masked
        values = kernel_shap(fn, np.zeros((1, n)), np.ones(n), n_coalition_samples, seed)
        region_scores = values.copy()
    else:
        raise DataError(f"unknown SHAP level {level!r}")
    pred = float(_positive_prob(model, graph, x.reshape(1, -1), (n, d), chunk)[0])
    return ShapReport(values, region_scores, list(graph.region_names), pred - float(values.sum()), pred, level)


@dataclass
class RegionImportance:
    name: str
    score: float
    per_layer: list[float] = field(default_factory=list)


def attention_scores(model: GraphClassifier, graphs, chunk: int = 256) -> np.ndarray:
    """(n_layers, n_regions) sums of head-averaged alpha over edges leaving each region.

    Each destination's incoming coefficients (self-loop included) sum to one;
    a region's score adds up the share it receives in every neighbourhood it
    belongs to, across all graphs.
    """
    if not graphs:
        raise DataError("attention importance needs at least one graph")
    if model.config.kind != "gat":
        raise DataError("attention importance needs an attention model")
    n_regions = graphs[0].n_nodes
    if any(g.n_nodes != n_regions for g in graphs):
        raise DataError("all graphs must share the same regions")
    scores = np.zeros((model.config.n_blocks, n_regions))
    for lo in range(0, len(graphs), chunk):
        batch = make_batch(graphs[lo:lo + chunk])
        result = model.forward(batch, extract_attention=True)
        offsets = np.concatenate([[0], np.cumsum(np.bincount(batch.graph_index, minlength=batch.n_graphs))])
        region = batch.src - offsets[batch.graph_index[batch.src]]
        for rec in result.attention:
            scores[rec.layer_index] += np.bincount(region, weights=rec.alpha, minlength=n_regions)
    return scores


def attention_importance(model: GraphClassifier, graphs, chunk: int = 256) -> list[RegionImportance]:
    per_layer = attention_scores(model, graphs, chunk)
    total = per_layer.sum(axis=0)
    names = graphs[0].region_names
    order = np.argsort(-total, kind="stable")
    return [RegionImportance(names[i], float(total[i]), [float(v) for v in per_layer[:, i]]) for i in order]


def _sci(v: float) -> str:
    if v == 0:
        return "0"
    exp = int(math.floor(math.log10(abs(v))))
    return f"{v / 10**exp:.3f} × 10^{exp}"


def export_rankings(shap: ShapReport | None, attention: list[RegionImportance] | None, k: int = 5) -> dict:
    """Top-k table of both rankings plus the count of regions they share."""
    shap_rank = shap.ranking() if shap is not None else []
    att_rank = [(r.name, r.score) for r in attention] if attention is not None else []
    n = max(len(shap_rank), len(att_rank))
    if k > n:
        raise DataError(f"top-k {k} exceeds number of regions {n}")
    shap_top, att_top = shap_rank[:k], att_rank[:k]
    overlap = len({a for a, _ in shap_top} & {b for b, _ in att_top})
    lines = ["| Rank | Shapley (with Score) | Attention (with Score) |", "|---|---|---|"]
    for i in range(k):
        s = f"{shap_top[i][0]} ({_sci(shap_top[i][1])})" if i < len(shap_top) else ""
        a = f"{att_top[i][0]} ({att_top[i][1]:.3f})" if i < len(att_top) else ""
        lines.append(f"| {i + 1} | {s} | {a} |")
    return {"shap": shap_top, "attention": att_top, "overlap": overlap, "markdown": "\n".join(lines) + "\n"}
