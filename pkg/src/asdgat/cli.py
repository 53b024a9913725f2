"""Command-line pipeline: synth, build-graphs, train, replicate, sweep, evaluate, explain, verify.

Everything a command writes goes under ``--out`` (default ``$ASDGAT_OUT`` or
``./asdgat-out``)::

    manifest.json, timeseries/     synth
    graphs/                        build-graphs
    train/                         train (model.ckpt, run.json, metrics.json)
    replicate/                     replicate (summary.json, table.md)
    sweep/                         sweep (sweep.json)
    evaluate/                      evaluate
    explain/                       explain
    verify/                        verify

Each command also writes the merged configuration it ran with as
``config.json`` in its output directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .connectome import (
    FEATURE_MODES,
    build_graph,
    default_region_names,
    load_cohort,
    node_features,
    pearson_matrix,
    save_cohort,
)
from .errors import AsdGatError, ConfigError, DataError, VerificationError
from .explain import attention_importance, export_rankings, kernel_shap, exact_shapley, subject_shap
from .ingest import SyntheticCohortSpec, load_manifest, load_subject, preprocess, write_synthetic_cohort
from .metrics import confusion, cumulative_gain, evaluate_log_probs, format_table, predict_from_log_probs
from .nn.checkpoint import load_checkpoint
from .nn.layers import make_batch
from .train import TrainConfig, run_replicates, sweep, train_model, stratified_split, SplitAssignment

log = logging.getLogger("asdgat")

OUT_ENV = "ASDGAT_OUT"
PRESETS = {
    "full": {},
    # narrow variant that trains in seconds on one CPU core
    "desk": {"heads": 8, "head_width": 8, "n_gat_blocks": 7, "fc_width": 64},
}


@dataclass
class PipelineConfig:
    data_dir: str = ""
    out_dir: str = ""
    threshold: float = 0.2
    feature_mode: str = "correlation-profile"
    series_length: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    shap_samples: int = 2048
    shap_level: str = "feature"
    shap_background: int = 50
    top_k: int = 5
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold must lie in [0, 1], got {self.threshold}")
        if self.feature_mode not in FEATURE_MODES:
            raise ConfigError(f"unknown feature mode {self.feature_mode!r}")
        if self.shap_level not in ("feature", "region"):
            raise ConfigError(f"unknown SHAP level {self.shap_level!r}")
        if self.shap_samples < 1 or self.shap_background < 1 or self.top_k < 1:
            raise ConfigError("shap_samples, shap_background and top_k must be positive")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["train"] = self.train.to_dict()
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> PipelineConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        raw = dict(raw)
        if "train" in raw:
            raw["train"] = TrainConfig.from_dict(raw["train"])
        try:
            cfg = cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        cfg.validate()
        return cfg


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        msg = record.getMessage()
        try:
            payload = json.loads(msg)
            if not isinstance(payload, dict):
                raise ValueError
        except ValueError:
            payload = {"event": "message", "message": msg}
        return json.dumps({"level": record.levelname.lower(), **payload})


def _setup_logging(level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter())
    root = logging.getLogger("asdgat")
    root.handlers[:] = [handler]
    root.setLevel(level.upper())
    root.propagate = False


def _event(event: str, **kw) -> None:
    log.info(json.dumps({"event": event, **kw}))


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------- arguments

_TRAIN_FLAGS = [
    ("--lr", "learning_rate", float),
    ("--batch-size", "batch_size", int),
    ("--epochs", "epochs", int),
    ("--patience", "patience", int),
    ("--model", "model", str),
    ("--heads", "heads", int),
    ("--head-width", "head_width", int),
    ("--blocks", "n_gat_blocks", int),
    ("--fc-width", "fc_width", int),
    ("--dropout-first", "dropout_first", float),
    ("--dropout-rest", "dropout_rest", float),
    ("--dropout-fc", "dropout_fc", float),
]


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", default=None,
                   help=f"workspace directory (default: ${OUT_ENV} or ./asdgat-out)")
    p.add_argument("--config", default=None, help="JSON config file; flags override its values (default: none)")
    p.add_argument("--log-level", default="info", help="stderr log level (default: info)")


def _train_args(p: argparse.ArgumentParser) -> None:
    base = TrainConfig()
    for flag, key, typ in _TRAIN_FLAGS:
        p.add_argument(flag, dest=key, type=typ, default=None, help=f"(default: {getattr(base, key)})")
    p.add_argument("--seed", type=int, default=None, help="base seed; run k uses seed+k (default: 0)")
    p.add_argument("--preset", choices=sorted(PRESETS), default=None,
                   help="architecture preset applied before other flags (default: full)")
    p.add_argument("--graphs", default=None, help="graph directory (default: <out>/graphs)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="asdgat", description="Graph attention classification of brain connectomes.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a planted-block synthetic cohort")
    _common(p)
    d = SyntheticCohortSpec()
    p.add_argument("--subjects", type=int, default=d.n_subjects_per_class, help="subjects per class (default: %(default)s)")
    p.add_argument("--regions", type=int, default=d.n_regions, help="(default: %(default)s)")
    p.add_argument("--timepoints", type=int, default=d.n_timepoints, help="(default: %(default)s)")
    p.add_argument("--block", default=",".join(map(str, d.planted_block)),
                   help="comma-separated planted region indices (default: %(default)s)")
    p.add_argument("--coupling", type=float, default=d.coupling_strength, help="(default: %(default)s)")
    p.add_argument("--noise", type=float, default=d.noise_sigma, help="(default: %(default)s)")
    p.add_argument("--seed", type=int, default=d.seed, help="(default: %(default)s)")

    p = sub.add_parser("build-graphs", help="thresholded connectivity graphs from a manifest")
    _common(p)
    p.add_argument("--manifest", default=None, help="cohort manifest (default: <out>/manifest.json)")
    p.add_argument("--threshold", type=float, default=None, help="absolute correlation cut-off (default: 0.2)")
    p.add_argument("--features", dest="feature_mode", choices=FEATURE_MODES, default=None,
                   help="node feature mode (default: correlation-profile)")
    p.add_argument("--series-length", type=int, default=None,
                   help="time points appended in correlation-plus-series mode (default: 0)")

    p = sub.add_parser("train", help="train one model on a stratified split")
    _common(p)
    _train_args(p)

    p = sub.add_parser("replicate", help="independent seeded runs and their aggregate")
    _common(p)
    _train_args(p)
    p.add_argument("--runs", type=int, default=30, help="(default: %(default)s)")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes (default: %(default)s)")

    p = sub.add_parser("sweep", help="grid search on one fixed split")
    _common(p)
    _train_args(p)
    p.add_argument("--grid", required=True, help="JSON object {param: [values]} or path to one")
    p.add_argument("--jobs", type=int, default=1, help="accepted for symmetry with replicate (default: %(default)s)")

    p = sub.add_parser("evaluate", help="score a checkpoint on the held-out subjects")
    _common(p)
    p.add_argument("--checkpoint", default=None, help="(default: <out>/train/model.ckpt)")
    p.add_argument("--graphs", default=None, help="graph directory (default: <out>/graphs)")
    p.add_argument("--all", action="store_true", help="evaluate every graph, not only the test split")

    p = sub.add_parser("explain", help="Kernel SHAP and attention region rankings")
    _common(p)
    p.add_argument("--checkpoint", default=None, help="(default: <out>/train/model.ckpt)")
    p.add_argument("--graphs", default=None, help="graph directory (default: <out>/graphs)")
    p.add_argument("--method", choices=("shap", "attention", "both"), default="both", help="(default: %(default)s)")
    p.add_argument("--top-k", dest="top_k", type=int, default=None, help="(default: 5)")
    p.add_argument("--subject", default=None, help="subject explained by SHAP (default: first test subject)")
    p.add_argument("--samples", dest="shap_samples", type=int, default=None, help="SHAP coalitions (default: 2048)")
    p.add_argument("--level", dest="shap_level", choices=("feature", "region"), default=None,
                   help="SHAP masking granularity (default: feature)")
    p.add_argument("--background", dest="shap_background", type=int, default=None,
                   help="training subjects summarised into the SHAP reference (default: 50)")
    p.add_argument("--seed", type=int, default=None, help="(default: 0)")

    p = sub.add_parser("verify", help="gradient and SHAP oracle suites")
    _common(p)
    p.add_argument("--grad-tol", type=float, default=1e-4, help="(default: %(default)s)")
    p.add_argument("--shap-tol", type=float, default=1e-6, help="(default: %(default)s)")
    p.add_argument("--grad-check", action="store_true", help="also check the full 7-block classifiers")
    return parser


def _out_dir(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or "asdgat-out")


def _load_config(args) -> PipelineConfig:
    raw = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise DataError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from None
    cfg = PipelineConfig.from_dict(raw)
    train = cfg.train.to_dict()
    preset = getattr(args, "preset", None)
    if preset:
        train.update(PRESETS[preset])
    for _, key, _ in _TRAIN_FLAGS:
        v = getattr(args, key, None)
        if v is not None:
            train[key] = v
    if getattr(args, "seed", None) is not None:
        train["seed"] = args.seed
        cfg.seed = args.seed
    cfg.train = TrainConfig.from_dict(train)
    for key in ("threshold", "feature_mode", "series_length", "top_k", "shap_samples", "shap_level",
                "shap_background"):
        v = getattr(args, key, None)
        if v is not None:
            setattr(cfg, key, v)
    cfg.out_dir = str(_out_dir(args))
    cfg.validate()
    return cfg


def _graph_dir(args, out: Path) -> Path:
    d = Path(args.graphs) if getattr(args, "graphs", None) else out / "graphs"
    if not (d / "index.json").is_file():
        raise DataError(f"no graphs at {d}; run build-graphs first")
    return d


def _checkpoint(args, out: Path) -> Path:
    p = Path(args.checkpoint) if args.checkpoint else out / "train" / "model.ckpt"
    if not p.is_file():
        raise DataError(f"checkpoint not found: {p}; run train first")
    return p


def _saved_split(ckpt: Path) -> SplitAssignment | None:
    run = ckpt.parent / "run.json"
    if not run.is_file():
        return None
    s = json.loads(run.read_text())["split"]
    return SplitAssignment(s["train"], s["validation"], s["test"], tuple(s["ratios"]), s["seed"])


# ---------------------------------------------------------------- commands


def cmd_synth(args, cfg: PipelineConfig, out: Path) -> dict:
    try:
        block = tuple(int(v) for v in args.block.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"invalid --block {args.block!r}") from None
    spec = SyntheticCohortSpec(args.subjects, args.regions, args.timepoints, block, args.coupling, args.noise,
                               args.seed)
    manifest = write_synthetic_cohort(spec, out)
    cfg.data_dir = str(out)
    _write_json(out / "synth.json", asdict(spec))
    _event("synth", subjects=len(manifest.subjects), regions=manifest.n_regions)
    return {"subjects": len(manifest.subjects), "manifest": str(out / "manifest.json")}


def cmd_build_graphs(args, cfg: PipelineConfig, out: Path) -> dict:
    mpath = Path(args.manifest) if args.manifest else out / "manifest.json"
    if not mpath.is_file():
        raise DataError(f"manifest not found: {mpath}")
    manifest = load_manifest(mpath)
    cfg.data_dir = str(mpath.parent)
    names = default_region_names(manifest.n_regions)
    graphs = []
    for s in manifest.subjects:
        ts = preprocess(load_subject(manifest, s))
        conn = pearson_matrix(ts)
        feats = node_features(conn, ts, cfg.feature_mode, cfg.series_length)
        graphs.append(build_graph(conn, cfg.threshold, feats, s.label, names, s.id))
    gdir = out / "graphs"
    save_cohort(graphs, gdir, {"threshold": cfg.threshold, "feature_mode": cfg.feature_mode,
                               "series_length": cfg.series_length})
    n_edges = [len(g.edges) for g in graphs]
    _event("build-graphs", graphs=len(graphs), mean_edges=float(np.mean(n_edges)))
    return {"graphs": len(graphs), "dir": str(gdir)}


def cmd_train(args, cfg: PipelineConfig, out: Path) -> dict:
    graphs = load_cohort(_graph_dir(args, out))
    tc = cfg.train
    split = stratified_split(graphs, tc.ratios, tc.seed)
    tdir = out / "train"
    result = train_model(graphs, split, tc, seed=tc.seed, out_dir=tdir)
    run = result.to_dict()
    run["checkpoint"] = "model.ckpt"
    _write_json(tdir / "run.json", run)
    _write_json(tdir / "metrics.json", result.metrics.to_dict())
    _event("train", accuracy=result.metrics.accuracy, auc=result.metrics.auc, best_epoch=result.best_epoch)
    return {"metrics": result.metrics.to_dict()}


def cmd_replicate(args, cfg: PipelineConfig, out: Path) -> dict:
    if args.runs < 1 or args.jobs < 1:
        raise ConfigError("--runs and --jobs must be >= 1")
    graphs = load_cohort(_graph_dir(args, out))
    rdir = out / "replicate"
    results, agg = run_replicates(graphs, cfg.train, n_runs=args.runs, jobs=args.jobs, out_dir=rdir / "runs")
    runs = []
    for k, r in enumerate(results):
        d = r.to_dict()
        d["checkpoint"] = f"runs/run_{k:03d}/model.ckpt"
        runs.append({"seed": d["seed"], "metrics": d["metrics"], "best_epoch": d["best_epoch"],
                     "best_val_loss": d["best_val_loss"], "checkpoint": d["checkpoint"]})
        _write_json(rdir / "runs" / f"run_{k:03d}" / "run.json", d)
    summary = {"n_runs": args.runs, "base_seed": cfg.train.seed, "config": cfg.train.to_dict(),
               "aggregate": agg, "runs": runs}
    _write_json(rdir / "summary.json", summary)
    (rdir / "table.md").write_text(format_table(agg))
    _event("replicate", runs=args.runs, mean_accuracy=agg["accuracy"]["mean"], mean_auc=agg["auc"]["mean"])
    return {"aggregate": agg}


def cmd_sweep(args, cfg: PipelineConfig, out: Path) -> dict:
    text = args.grid
    if Path(text).is_file():
        text = Path(text).read_text()
    try:
        grid = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--grid is not valid JSON: {exc}") from None
    if not isinstance(grid, dict):
        raise ConfigError("--grid must be a JSON object")
    graphs = load_cohort(_graph_dir(args, out))
    rows = sweep(grid, graphs, cfg.train)
    _write_json(out / "sweep" / "sweep.json", {"grid": grid, "rows": rows})
    best = rows[0]
    _event("sweep", points=len(rows), best=best["params"], val_accuracy=best["val_accuracy"])
    return {"best": best["params"]}


def cmd_evaluate(args, cfg: PipelineConfig, out: Path) -> dict:
    ckpt = _checkpoint(args, out)
    graphs = load_cohort(_graph_dir(args, out))
    model, _ = load_checkpoint(ckpt)
    split = None if args.all else _saved_split(ckpt)
    if split is not None:
        keep = set(split.test)
        graphs = [g for g in graphs if g.id in keep]
    if not graphs:
        raise DataError("no subjects to evaluate")
    labels = np.array([g.label for g in graphs])
    lp, emb = [], []
    for lo in range(0, len(graphs), 256):
        r = model.forward(make_batch(graphs[lo:lo + 256]))
        lp.append(r.log_probs.data)
        emb.append(r.embeddings)
    lp, emb = np.concatenate(lp), np.concatenate(emb)
    report = evaluate_log_probs(lp, labels)
    scores = np.exp(lp[:, 1])
    edir = out / "evaluate"
    _write_json(edir / "metrics.json", report.to_dict())
    cm = confusion(predict_from_log_probs(lp), labels)
    _write_csv(edir / "confusion.csv", ["", "predicted_0", "predicted_1"],
               [["actual_0", cm.tn, cm.fp], ["actual_1", cm.fn, cm.tp]])
    curve, base = cumulative_gain(scores, labels)
    _write_csv(edir / "gain_curve.csv", ["fraction_samples", "fraction_positives", "baseline"],
               [[x, y, b] for (x, y), (_, b) in zip(curve, base)])
    _write_csv(edir / "embeddings.csv", ["id", "label"] + [f"z{i}" for i in range(emb.shape[1])],
               [[g.id, g.label, *map(repr, row.tolist())] for g, row in zip(graphs, emb)])
    _event("evaluate", subjects=len(graphs), accuracy=report.accuracy, auc=report.auc)
    return {"metrics": report.to_dict()}


def cmd_explain(args, cfg: PipelineConfig, out: Path) -> dict:
    ckpt = _checkpoint(args, out)
    graphs = load_cohort(_graph_dir(args, out))
    model, _ = load_checkpoint(ckpt)
    split = _saved_split(ckpt)
    by_id = {g.id: g for g in graphs}
    test = [by_id[i] for i in split.test if i in by_id] if split else graphs
    train = [by_id[i] for i in split.train if i in by_id] if split else graphs
    xdir = out / "explain"
    shap, attention = None, None
    if args.method in ("shap", "both"):
        sid = args.subject or test[0].id
        if sid not in by_id:
            raise DataError(f"unknown subject {sid!r}")
        background = [g for g in train if g.id != sid][:cfg.shap_background] or [by_id[sid]]
        shap = subject_shap(model, background, by_id[sid], cfg.shap_samples, cfg.seed, cfg.shap_level)
        _write_csv(xdir / "shap.csv", ["region", "score"], [[n, repr(s)] for n, s in shap.ranking()])
        _event("shap", subject=sid, prediction=shap.prediction, expected_value=shap.expected_value)
    if args.method in ("attention", "both"):
        attention = attention_importance(model, test)
        _write_csv(xdir / "attention.csv", ["region", "score"] + [f"layer_{i}" for i in range(model.config.n_blocks)],
                   [[r.name, repr(r.score), *map(repr, r.per_layer)] for r in attention])
    k = cfg.top_k
    n_regions = graphs[0].n_nodes
    if k > n_regions:
        raise ConfigError(f"--top-k {k} exceeds {n_regions} regions")
    table = export_rankings(shap, attention, k)
    (xdir / "rankings.md").write_text(table["markdown"])
    _event("explain", method=args.method, overlap=table["overlap"])
    return {"overlap": table["overlap"]}


def _shap_oracle_error(seeds=range(3)) -> float:
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for m in (3, 5, 8):
            bg, x = rng.normal(size=(4, m)), rng.normal(size=m)
            w1, w2 = rng.normal(size=(m, 5)), rng.normal(size=5)
            w = rng.normal(size=m)
            for f in (lambda z, w=w: np.atleast_2d(z) @ w, lambda z, a=w1, b=w2: np.tanh(np.atleast_2d(z) @ a) @ b):
                phi = kernel_shap(f, bg, x)
                ref = bg.mean(axis=0)
                exact = exact_shapley(lambda mask, f=f: float(f(np.where(mask, x, ref)[None])[0]), m)
                worst = max(worst, float(np.abs(phi - exact).max()))
    return worst


def cmd_verify(args, cfg: PipelineConfig, out: Path) -> dict:
    from .gradcheck import classifier_check, primitive_suite

    t0 = time.perf_counter()
    prim = primitive_suite(range(3))
    grad_err = float(max(prim.values()))
    report = {"primitives": prim}
    if args.grad_check:
        report["classifier"] = {k: classifier_check(k) for k in ("gat", "gcn")}
        grad_err = float(max(grad_err, *report["classifier"].values()))
    shap_err = _shap_oracle_error()
    report.update(gradient_max_error=grad_err, shap_max_error=shap_err, seconds=time.perf_counter() - t0)
    ok = bool(grad_err <= args.grad_tol and shap_err <= args.shap_tol)
    report["passed"] = ok
    _write_json(out / "verify" / "verify.json", report)
    print(f"gradient-check max error {grad_err:.3e} (tol {args.grad_tol:g})")
    print(f"shap-oracle max error {shap_err:.3e} (tol {args.shap_tol:g})")
    if not ok:
        raise VerificationError(f"verification failed: gradient {grad_err:.3e}, shap {shap_err:.3e}")
    return {"gradient_max_error": grad_err, "shap_max_error": shap_err}


COMMANDS = {
    "synth": cmd_synth,
    "build-graphs": cmd_build_graphs,
    "train": cmd_train,
    "replicate": cmd_replicate,
    "sweep": cmd_sweep,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "verify": cmd_verify,
}
_CONFIG_DIRS = {"synth": "", "build-graphs": "graphs", "train": "train", "replicate": "replicate",
                "sweep": "sweep", "evaluate": "evaluate", "explain": "explain", "verify": "verify"}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _setup_logging(args.log_level)
        cfg = _load_config(args)
        out = _out_dir(args)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg, out)
        _write_json(out / _CONFIG_DIRS[args.command] / "config.json", cfg.to_dict())
        return 0
    except AsdGatError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}),
              file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        # argparse-level or numpy value problems not already classified
        print(json.dumps({"error": "ConfigError", "message": str(exc), "exit_code": 2}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
