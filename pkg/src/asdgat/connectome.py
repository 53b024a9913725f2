"""Pearson functional connectivity and thresholded brain graphs."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

FEATURE_MODES = ("correlation-profile", "correlation-plus-series")


def pearson_matrix(ts: np.ndarray) -> np.ndarray:
    """R x R sample Pearson correlations of the columns of ``ts``.

    Constant columns get an all-zero row and column, diagonal included.
    """
    ts = np.asarray(ts, dtype=np.float64)
    if ts.ndim != 2 or ts.shape[0] < 2:
        raise DataError("pearson_matrix needs a T x R matrix with T >= 2")
    centered = ts - ts.mean(axis=0)
    norms = np.sqrt((centered**2).sum(axis=0))
    ok = norms > 1e-12 * np.maximum(1.0, np.abs(ts).max(axis=0))
    unit = np.zeros_like(centered)
    unit[:, ok] = centered[:, ok] / norms[ok]
    r = unit.T @ unit
    r = 0.5 * (r + r.T)
    np.clip(r, -1.0, 1.0, out=r)
    idx = np.flatnonzero(ok)
    r[idx, idx] = 1.0
    return r


@dataclass
class BrainGraph:
    """Undirected subject graph; ``edges`` lists each pair once with i < j."""

    id: str
    label: int
    features: np.ndarray
    edges: np.ndarray  # (E, 2) int
    weights: np.ndarray  # (E,)
    region_names: list[str]

    @property
    def n_nodes(self) -> int:
        return self.features.shape[0]

    @property
    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n_nodes, self.n_nodes))
        if len(self.edges):
            a[self.edges[:, 0], self.edges[:, 1]] = 1.0
            a[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return a

    def directed_edges(self) -> np.ndarray:
        """Both orientations of every edge as (src, dst) rows."""
        if not len(self.edges):
            return np.zeros((0, 2), dtype=np.int64)
        return np.concatenate([self.edges, self.edges[:, ::-1]]).astype(np.int64)

    def permuted(self, perm) -> BrainGraph:
        """Relabel nodes so that new node k is old node perm[k]."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        edges = inv[self.edges] if len(self.edges) else self.edges
        edges = np.sort(edges, axis=1) if len(edges) else edges
        return BrainGraph(
            self.id, self.label, self.features[perm], edges, self.weights.copy(),
            [self.region_names[k] for k in perm],
        )

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "label": int(self.label),
            "n_nodes": self.n_nodes,
            "region_names": list(self.region_names),
            "edges": [[int(i), int(j), float(w)] for (i, j), w in zip(self.edges, self.weights)],
            "features": self.features.tolist(),
        }

    @classmethod
    def from_json(cls, raw: dict) -> BrainGraph:
        features = np.asarray(raw["features"], dtype=np.float64)
        if features.shape[0] != raw["n_nodes"] or len(raw["region_names"]) != raw["n_nodes"]:
            raise DataError(f"graph {raw.get('id')}: n_nodes disagrees with features/region_names")
        e = np.asarray(raw["edges"], dtype=np.float64).reshape(-1, 3)
        return cls(
            str(raw["id"]), int(raw["label"]), features,
            e[:, :2].astype(np.int64), e[:, 2].copy(), list(raw["region_names"]),
        )


def build_graph(conn, threshold: float, features, label: int, region_names, graph_id: str = "") -> BrainGraph:
    """Keep the undirected edge (i, j), i != j, iff |r_ij| >= threshold."""
    conn = np.asarray(conn, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError(f"threshold must lie in [0, 1], got {threshold}")
    n = conn.shape[0]
    if conn.shape != (n, n) or features.shape[0] != n or len(region_names) != n:
        raise DataError("dimension mismatch between connectivity, features and region names")
    iu, ju = np.triu_indices(n, k=1)
    keep = np.abs(conn[iu, ju]) >= threshold
    edges = np.stack([iu[keep], ju[keep]], axis=1).astype(np.int64)
    return BrainGraph(graph_id, int(label), features, edges, conn[iu[keep], ju[keep]].copy(), list(region_names))


def node_features(conn, ts, mode: str = "correlation-profile", k: int = 0) -> np.ndarray:
    """Node feature matrix.

    ``correlation-profile`` uses the connectivity row of each region.
    ``correlation-plus-series`` appends the first ``k`` z-scored time points
    of the region (zero padded when the series is shorter).
    """
    conn = np.asarray(conn, dtype=np.float64)
    if mode == "correlation-profile":
        return conn.copy()
    if mode != "correlation-plus-series":
        raise ConfigError(f"unknown feature mode {mode!r}; choose from {FEATURE_MODES}")
    if k < 0:
        raise ConfigError("series length k must be non-negative")
    ts = np.asarray(ts, dtype=np.float64)
    n = conn.shape[0]
    series = np.zeros((n, k))
    take = min(k, ts.shape[0])
    series[:, :take] = ts[:take].T
    return np.concatenate([conn, series], axis=1)


def default_region_names(n: int) -> list[str]:
    return [f"ROI {i + 1}" for i in range(n)]


def save_graph(graph: BrainGraph, path) -> None:
    Path(path).write_text(json.dumps(graph.to_json()))


def load_graph(path) -> BrainGraph:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"graph file not found: {path}")
    return BrainGraph.from_json(json.loads(path.read_text()))


def save_cohort(graphs: list[BrainGraph], out_dir, meta: dict | None = None) -> Path:
    """Write one JSON per graph plus ``index.json``; returns the index path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for g in graphs:
        fname = f"{g.id}.json"
        save_graph(g, out_dir / fname)
        entries.append({"id": g.id, "label": g.label, "path": fname})
    index = {"graphs": entries, **(meta or {})}
    path = out_dir / "index.json"
    path.write_text(json.dumps(index, indent=2) + "\n")
    return path


def load_cohort(graph_dir) -> list[BrainGraph]:
    graph_dir = Path(graph_dir)
    index_path = graph_dir / "index.json"
    if not index_path.is_file():
        raise DataError(f"no cohort index at {index_path}")
    index = json.loads(index_path.read_text())
    graphs = [load_graph(graph_dir / e["path"]) for e in index["graphs"]]
    widths = {g.features.shape[1] for g in graphs}
    if len(widths) > 1:
        raise DataError(f"feature widths differ across cohort: {sorted(widths)}")
    return graphs
