"""Splitting, loss, optimisation and the replicate / sweep protocols.

Randomness: run ``k`` of a replicate set uses ``seed = base_seed + k``. From
that seed four independent generators are derived as
``default_rng([seed, stream])`` with stream 0 = split, 1 = weight init,
2 = dropout, 3 = batch shuffling.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError, NumericError
from .metrics import MetricsReport, aggregate_runs, evaluate_log_probs
from .nn.checkpoint import save_checkpoint
from .nn.layers import make_batch
from .nn.models import GraphClassifier, ModelConfig

log = logging.getLogger("asdgat.train")

SPLIT, INIT, DROPOUT, SHUFFLE = range(4)


def stream(seed: int, which: int) -> np.random.Generator:
    return np.random.default_rng([seed, which])


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    epochs: int = 150
    patience: int = 30
    model: str = "gat"
    heads: int = 8
    head_width: int = 256
    n_gat_blocks: int = 7
    fc_width: int = 1024
    dropout_first: float = 0.1
    dropout_rest: float = 0.2
    dropout_fc: float = 0.2
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch norm needs two rows)")
        if self.epochs < 0 or self.patience < 0:
            raise ConfigError("epochs and patience must be non-negative")
        if len(self.ratios) != 3 or abs(sum(self.ratios) - 1.0) > 1e-9 or min(self.ratios) < 0:
            raise ConfigError("ratios must be three non-negative numbers summing to 1")
        self.model_config(1)  # validates architecture fields

    def model_config(self, in_dim: int) -> ModelConfig:
        return ModelConfig(kind=self.model, in_dim=in_dim, heads=self.heads, head_width=self.head_width,
                           n_blocks=self.n_gat_blocks, fc_width=self.fc_width, dropout_first=self.dropout_first,
                           dropout_rest=self.dropout_rest, dropout_fc=self.dropout_fc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratios"] = list(self.ratios)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        d = dict(d)
        if "ratios" in d:
            d["ratios"] = tuple(d["ratios"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class SplitAssignment:
    train: list[str]
    validation: list[str]
    test: list[str]
    ratios: tuple[float, float, float]
    seed: int

    def to_dict(self) -> dict:
        return {"train": self.train, "validation": self.validation, "test": self.test,
                "ratios": list(self.ratios), "seed": self.seed}


def _largest_remainder(n: int, ratios) -> list[int]:
    quotas = [n * r for r in ratios]
    counts = [math.floor(q) for q in quotas]
    # ties on the fractional part go to the earlier part
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def stratified_split(subjects, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> SplitAssignment:
    """Per-class largest-remainder allocation, shuffled within class.

    ``subjects`` is any sequence of objects with ``id`` and ``label``
    (manifest subjects or graphs).
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError("split ratios must sum to 1")
    rng = stream(seed, SPLIT)
    parts: list[list[str]] = [[], [], []]
    for label in (0, 1):
        ids = [s.id for s in subjects if s.label == label]
        if len(ids) < len(ratios):
            raise DataError(f"class {label} has {len(ids)} subjects; need at least {len(ratios)}")
        ids = [ids[i] for i in rng.permutation(len(ids))]
        lo = 0
        for part, count in zip(parts, _largest_remainder(len(ids), ratios)):
            part.extend(ids[lo:lo + count])
            lo += count
    return SplitAssignment(*parts, ratios=tuple(ratios), seed=seed)


def nll_loss(log_probs: ad.Tensor, labels) -> ad.Tensor:
    """Mean negative log-likelihood of the true class."""
    labels = np.asarray(labels, dtype=np.int64)
    if not np.isin(labels, (0, 1)).all():
        raise DataError("labels must be 0 or 1")
    onehot = np.zeros(log_probs.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = ad.sum(ad.multiply(log_probs, ad.constant(onehot)))
    return ad.scale(picked, -1.0 / len(labels))


def adam_step(params, grads, m, v, t: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns new (params, m, v) lists."""
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient; update aborted")
    new_p, new_m, new_v = [], [], []
    for p, g, mi, vi in zip(params, grads, m, v):
        mi = beta1 * mi + (1 - beta1) * g
        vi = beta2 * vi + (1 - beta2) * g * g
        m_hat = mi / (1 - beta1**t)
        v_hat = vi / (1 - beta2**t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(mi)
        new_v.append(vi)
    return new_p, new_m, new_v


class Adam:
    def __init__(self, params: dict[str, ad.Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        keys = list(self.params)
        grads = [ad.grad_of(self.params[k]) for k in keys]
        new_p, new_m, new_v = adam_step([self.params[k].data for k in keys], grads,
                                        [self.m[k] for k in keys], [self.v[k] for k in keys],
                                        self.t + 1, self.lr, self.beta1, self.beta2, self.eps)
        self.t += 1
        for k, p, mi, vi in zip(keys, new_p, new_m, new_v):
            self.params[k].data = p
            self.m[k], self.v[k] = mi, vi


@dataclass
class RunResult:
    seed: int
    config: dict
    split: dict
    history: list[dict]
    best_epoch: int
    best_val_loss: float
    metrics: MetricsReport
    test_ids: list[str]
    test_scores: list[float]
    test_labels: list[int]
    checkpoint: str | None = None
    model: GraphClassifier | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "config": self.config,
            "split": self.split,
            "history": self.history,
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "metrics": self.metrics.to_dict(),
            "test": {"ids": self.test_ids, "scores": self.test_scores, "labels": self.test_labels},
            "checkpoint": self.checkpoint,
        }


def _select(graphs, ids):
    by_id = {g.id: g for g in graphs}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise DataError(f"split references unknown subjects: {missing[:3]}")
    return [by_id[i] for i in ids]


def evaluate_loss(model: GraphClassifier, graphs, chunk: int = 256) -> float:
    if not graphs:
        return float("nan")
    lp = model.predict_log_proba(graphs, chunk=chunk)
    labels = np.array([g.label for g in graphs])
    return float(-lp[np.arange(len(labels)), labels].mean())


def train_model(graphs, split: SplitAssignment, config: TrainConfig, seed: int | None = None,
                out_dir=None) -> RunResult:
    """Mini-batch Adam on NLL; the best-validation-loss state is restored before testing."""
    seed = config.seed if seed is None else seed
    train_set = _select(graphs, split.train)
    val_set = _select(graphs, split.validation)
    test_set = _select(graphs, split.test)
    if not train_set or not test_set:
        raise DataError("empty train or test split")
    in_dim = train_set[0].features.shape[1]
    model = GraphClassifier(config.model_config(in_dim), stream(seed, INIT))
    opt = Adam(model.params, config.learning_rate)
    drop_rng, shuffle_rng = stream(seed, DROPOUT), stream(seed, SHUFFLE)

    monitor = val_set or train_set
    best_state = model.state()
    best_loss = evaluate_loss(model, monitor)
    best_epoch, since_best = 0, 0
    history = []
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(train_set))
        losses = []
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            if len(idx) < 2:
                continue  # trailing singleton batch
            batch = make_batch([train_set[i] for i in idx])
            out = model.forward(batch, train=True, rng=drop_rng)
            loss = nll_loss(out.log_probs, batch.labels)
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        val_loss = evaluate_loss(model, monitor)
        train_loss = float(np.mean(losses)) if losses else float("nan")
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        log.info(json.dumps({"event": "epoch", "seed": seed, "epoch": epoch,
                             "train_loss": train_loss, "val_loss": val_loss}))
        if val_loss < best_loss:
            best_loss, best_epoch, since_best = val_loss, epoch, 0
            best_state = model.state()
        else:
            since_best += 1
            if config.patience and since_best >= config.patience:
                break

    model.load_state(best_state)
    lp = model.predict_log_proba(test_set)
    labels = np.array([g.label for g in test_set])
    report = evaluate_log_probs(lp, labels)

    ckpt = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt = str(out_dir / "model.ckpt")
        save_checkpoint(model, ckpt, extra={"seed": seed, "best_epoch": best_epoch, "best_val_loss": best_loss})
    return RunResult(
        seed=seed, config=config.to_dict(), split=split.to_dict(), history=history, best_epoch=best_epoch,
        best_val_loss=best_loss, metrics=report, test_ids=[g.id for g in test_set],
        test_scores=[float(s) for s in np.exp(lp[:, 1])], test_labels=[int(v) for v in labels],
        checkpoint=ckpt, model=model,
    )


def run_once(graphs, config: TrainConfig, seed: int, out_dir=None) -> RunResult:
    """Split with ``seed`` and train with the same seed."""
    split = stratified_split(graphs, config.ratios, seed)
    return train_model(graphs, split, config, seed=seed, out_dir=out_dir)


def _run_job(args):
    graphs, config, seed, out_dir = args
    result = run_once(graphs, config, seed, out_dir)
    result.model = None
    return result


def run_replicates(graphs, config: TrainConfig, n_runs: int = 30, jobs: int = 1, out_dir=None,
                   keep_models: bool = False) -> tuple[list[RunResult], dict]:
    """Independent runs with seeds ``config.seed + k``; returns results and the aggregate."""
    if n_runs < 1:
        raise ConfigError("n_runs must be >= 1")
    tasks = [(graphs, config, config.seed + k, None if out_dir is None else Path(out_dir) / f"run_{k:03d}")
             for k in range(n_runs)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_job, tasks))
    else:
        results = [run_once(*t) for t in tasks]
        if not keep_models:
            for r in results:
                r.model = None
    return results, aggregate_runs([r.metrics for r in results])


def expand_grid(grid: dict[str, list]) -> list[dict]:
    if not grid:
        raise ConfigError("empty sweep grid")
    keys = sorted(grid)
    values = [grid[k] if isinstance(grid[k], list) else [grid[k]] for k in keys]
    return [dict(zip(keys, combo)) for combo in itertools.product(*values)]


def sweep(grid: dict[str, list], graphs, base: TrainConfig | None = None,
          split_seed: int | None = None) -> list[dict]:
    """Train every grid point on one fixed split; rank by validation accuracy (then loss)."""
    base = base or TrainConfig()
    points = expand_grid(grid)
    configs = []
    for point in points:
        merged = base.to_dict()
        merged.update(point)
        configs.append(TrainConfig.from_dict(merged))  # invalid points fail here, before any training
    seed = base.seed if split_seed is None else split_seed
    split = stratified_split(graphs, base.ratios, seed)
    rows = []
    for point, cfg in zip(points, configs):
        result = train_model(graphs, split, cfg, seed=seed)
        val = _select(graphs, split.validation)
        if val:
            val_report = evaluate_log_probs(result.model.predict_log_proba(val), [g.label for g in val])
            val_acc = val_report.accuracy
        else:
            val_acc = float("nan")
        rows.append({"params": point, "val_accuracy": val_acc, "val_loss": result.best_val_loss,
                     "test_accuracy": result.metrics.accuracy, "config": cfg.to_dict()})
    rows.sort(key=lambda r: (-r["val_accuracy"], r["val_loss"]))
    for rank, row in enumerate(rows, 1):
        row["rank"] = rank
    return rows
