import json

import pytest

from asdgat.cli import PipelineConfig, build_parser, main

SMALL = ["--preset", "desk", "--heads", "2", "--head-width", "4", "--blocks", "2", "--fc-width", "8",
         "--batch-size", "4"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    out = tmp_path_factory.mktemp("ws")
    assert main(["synth", "--out", str(out), "--subjects", "8", "--regions", "6", "--timepoints", "80",
                 "--block", "0,1", "--seed", "7"]) == 0
    assert main(["build-graphs", "--out", str(out), "--threshold", "0.2"]) == 0
    assert main(["train", "--out", str(out), "--epochs", "3", *SMALL]) == 0
    return out


def _error(capsys):
    line = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(line)


def test_happy_path_outputs(workspace):
    metrics = json.loads((workspace / "train" / "metrics.json").read_text())
    assert 0.0 <= metrics["accuracy"] <= 1.0
    cfg = json.loads((workspace / "train" / "config.json").read_text())
    assert cfg["train"]["epochs"] == 3 and cfg["train"]["heads"] == 2
    assert len(json.loads((workspace / "graphs" / "index.json").read_text())["graphs"]) == 16


def test_evaluate_outputs(workspace):
    assert main(["evaluate", "--out", str(workspace)]) == 0
    edir = workspace / "evaluate"
    for name in ("metrics.json", "confusion.csv", "gain_curve.csv", "embeddings.csv"):
        assert (edir / name).is_file()
    gain = (edir / "gain_curve.csv").read_text().splitlines()
    assert gain[0] == "fraction_samples,fraction_positives,baseline"
    assert gain[-1].startswith("1.0,1.0")


def test_explain_outputs(workspace):
    assert main(["explain", "--out", str(workspace), "--samples", "128", "--top-k", "3"]) == 0
    xdir = workspace / "explain"
    assert len((xdir / "shap.csv").read_text().splitlines()) == 7
    assert len((xdir / "attention.csv").read_text().splitlines()) == 7
    md = (xdir / "rankings.md").read_text().splitlines()
    assert md[0] == "| Rank | Shapley (with Score) | Attention (with Score) |" and len(md) == 5


def test_explain_attention_only(workspace):
    assert main(["explain", "--out", str(workspace), "--method", "attention"]) == 0


def test_build_graphs_is_idempotent(workspace):
    first = (workspace / "graphs" / "sub-0000.json").read_bytes()
    assert main(["build-graphs", "--out", str(workspace), "--threshold", "0.2"]) == 0
    assert (workspace / "graphs" / "sub-0000.json").read_bytes() == first


def test_replicate_summary_is_byte_identical(workspace, tmp_path):
    args = ["replicate", "--out", str(workspace), "--runs", "2", "--seed", "1", "--epochs", "2", *SMALL]
    assert main(args) == 0
    first = (workspace / "replicate" / "summary.json").read_bytes()
    assert main(args) == 0
    assert (workspace / "replicate" / "summary.json").read_bytes() == first
    summary = json.loads(first)
    assert [r["seed"] for r in summary["runs"]] == [1, 2]
    assert (workspace / "replicate" / "table.md").read_text().startswith("| Metric |")


def test_sweep(workspace):
    grid = json.dumps({"learning_rate": [1e-3, 1e-4]})
    assert main(["sweep", "--out", str(workspace), "--grid", grid, "--epochs", "1", *SMALL]) == 0
    rows = json.loads((workspace / "sweep" / "sweep.json").read_text())["rows"]
    assert len(rows) == 2


def test_unknown_flag_exits_2(capsys, tmp_path):
    assert main(["train", "--out", str(tmp_path), "--bogus"]) == 2
    assert _error(capsys)["exit_code"] == 2


def test_invalid_config_exits_2(capsys, tmp_path):
    bad = tmp_path / "c.json"
    bad.write_text(json.dumps({"train": {"batch_size": 0}}))
    assert main(["train", "--out", str(tmp_path), "--config", str(bad)]) == 2
    bad.write_text(json.dumps({"nonsense": 1}))
    assert main(["train", "--out", str(tmp_path), "--config", str(bad)]) == 2
    assert main(["build-graphs", "--out", str(tmp_path), "--threshold", "1.5"]) == 2


def test_missing_inputs_exit_3(capsys, tmp_path):
    assert main(["train", "--out", str(tmp_path / "empty")]) == 3
    err = _error(capsys)
    assert err["error"] == "DataError" and "build-graphs" in err["message"]
    assert main(["evaluate", "--out", str(tmp_path / "empty")]) == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_exits_4(workspace, capsys):
    assert main(["train", "--out", str(workspace / "nan"), "--graphs", str(workspace / "graphs"),
                 "--lr", "1e300", "--epochs", "5", *SMALL]) == 4
    assert _error(capsys)["error"] == "NumericError"


def test_verify(capsys, tmp_path):
    assert main(["verify", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "gradient-check max error" in out and "shap-oracle max error" in out
    report = json.loads((tmp_path / "verify" / "verify.json").read_text())
    assert report["gradient_max_error"] <= 1e-4 and report["shap_max_error"] <= 1e-6
    assert main(["verify", "--out", str(tmp_path), "--grad-tol", "0"]) == 5


def test_config_file_and_flag_precedence(tmp_path):
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps({"threshold": 0.3, "train": {"epochs": 7, "learning_rate": 0.01}}))
    args = build_parser().parse_args(["train", "--config", str(cfg_path), "--epochs", "9", "--out", str(tmp_path)])
    from asdgat.cli import _load_config

    cfg = _load_config(args)
    assert cfg.threshold == 0.3
    assert cfg.train.epochs == 9 and cfg.train.learning_rate == 0.01
    assert PipelineConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_env_var_sets_output_dir(monkeypatch, tmp_path):
    monkeypatch.setenv("ASDGAT_OUT", str(tmp_path / "envout"))
    assert main(["synth", "--subjects", "3", "--regions", "4", "--timepoints", "20", "--block", "0,1"]) == 0
    assert (tmp_path / "envout" / "manifest.json").is_file()


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["train", "--help"])
    text = capsys.readouterr().out
    for token in ("--lr", "0.0001", "--batch-size", "16", "--epochs", "150", "--patience", "30", "--heads",
                  "--head-width", "256", "--fc-width", "1024", "--preset"):
        assert token in text
