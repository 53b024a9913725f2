"""Binary classification metrics. The positive class is ASD (label 1)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DataError

METRIC_NAMES = ("accuracy", "precision", "recall", "f1", "auc")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float
    confusion: ConfusionMatrix
    gain_curve: list[tuple[float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gain_curve"] = [list(p) for p in self.gain_curve]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> MetricsReport:
        return cls(d["accuracy"], d["precision"], d["recall"], d["f1"], d["auc"],
                   ConfusionMatrix(**d["confusion"]), [tuple(p) for p in d.get("gain_curve", [])])


def _binary(x, name: str) -> np.ndarray:
    x = np.asarray(x).astype(np.int64).reshape(-1)
    if not np.isin(x, (0, 1)).all():
        raise DataError(f"{name} must be binary")
    return x


def confusion(predictions, labels) -> ConfusionMatrix:
    p, y = _binary(predictions, "predictions"), _binary(labels, "labels")
    if p.shape != y.shape:
        raise DataError("predictions and labels differ in length")
    return ConfusionMatrix(
        tp=int(np.sum((p == 1) & (y == 1))),
        fp=int(np.sum((p == 1) & (y == 0))),
        tn=int(np.sum((p == 0) & (y == 0))),
        fn=int(np.sum((p == 0) & (y == 1))),
    )


def predict_from_log_probs(log_probs) -> np.ndarray:
    """Class 1 when log p1 >= log p0 (ties go to the positive class)."""
    lp = np.asarray(log_probs)
    return (lp[:, 1] >= lp[:, 0]).astype(np.int64)


def roc_auc(scores, labels) -> float:
    """P(s+ > s-) + 0.5 P(s+ == s-), by exhaustive pair comparison."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = _binary(labels, "labels")
    pos, neg = s[y == 1], s[y == 0]
    if not len(pos) or not len(neg):
        raise DataError("roc_auc needs both classes")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """(fpr, tpr) swept over distinct thresholds, from (0, 0) to (1, 1)."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = _binary(labels, "labels")
    n_pos, n_neg = int(y.sum()), int(len(y) - y.sum())
    if not n_pos or not n_neg:
        raise DataError("roc_curve needs both classes")
    fpr, tpr = [0.0], [0.0]
    for thr in np.unique(s)[::-1]:
        pred = s >= thr
        tpr.append(np.sum(pred & (y == 1)) / n_pos)
        fpr.append(np.sum(pred & (y == 0)) / n_neg)
    return np.array(fpr), np.array(tpr)


def trapezoid_auc(scores, labels) -> float:
    fpr, tpr = roc_curve(scores, labels)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


def cumulative_gain(scores, labels) -> tuple[list[tuple[float, float]], list[tuple[float, float]]]:
    """Gain curve by descending score (ties keep input order) and the random baseline."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = _binary(labels, "labels")
    if len(s) != len(y):
        raise DataError("scores and labels differ in length")
    total = int(y.sum())
    if total == 0:
        raise DataError("cumulative_gain needs at least one positive")
    order = np.argsort(-s, kind="stable")
    found = np.cumsum(y[order])
    n = len(y)
    curve = [((k + 1) / n, float(found[k]) / total) for k in range(n)]
    baseline = [((k + 1) / n, (k + 1) / n) for k in range(n)]
    return curve, baseline


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def classification_metrics(cm: ConfusionMatrix, scores, labels) -> MetricsReport:
    if cm.total == 0:
        raise DataError("no evaluated subjects")
    precision = _ratio(cm.tp, cm.tp + cm.fp)
    recall = _ratio(cm.tp, cm.tp + cm.fn)
    f1 = _ratio(2 * precision * recall, precision + recall)
    y = _binary(labels, "labels")
    auc = roc_auc(scores, y) if 0 < y.sum() < len(y) else float("nan")
    gain = cumulative_gain(scores, y)[0] if y.sum() else []
    return MetricsReport((cm.tp + cm.tn) / cm.total, precision, recall, f1, auc, cm, gain)


def evaluate_log_probs(log_probs, labels) -> MetricsReport:
    lp = np.asarray(log_probs)
    cm = confusion(predict_from_log_probs(lp), labels)
    return classification_metrics(cm, np.exp(lp[:, 1]), labels)


def aggregate_runs(reports) -> dict[str, dict[str, float]]:
    """Mean / min / max / sample std (n-1; 0 for one run) per metric."""
    reports = list(reports)
    if not reports:
        raise DataError("aggregate_runs needs at least one report")
    out = {}
    for name in METRIC_NAMES:
        v = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        out[name] = {
            "mean": float(v.mean()),
            "min": float(v.min()),
            "max": float(v.max()),
            "std": float(v.std(ddof=1)) if len(v) > 1 else 0.0,
        }
    return out


def format_table(aggregate: dict[str, dict[str, float]]) -> str:
    """Markdown table; accuracy, precision and recall as percentages, F1 and AUC as ratios."""
    lines = ["| Metric | Average | Minimum | Maximum | Standard Deviation |", "|---|---|---|---|---|"]
    for name in METRIC_NAMES:
        s = aggregate[name]
        k = 100.0 if name in ("accuracy", "precision", "recall") else 1.0
        lines.append(f"| {name.upper() if name in ('f1', 'auc') else name.capitalize()} | "
                     f"{s['mean'] * k:.2f} | {s['min'] * k:.2f} | {s['max'] * k:.2f} | {s['std'] * k:.2f} |")
    return "\n".join(lines)
