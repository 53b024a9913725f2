import math
from types import SimpleNamespace

import numpy as np
import pytest

from asdgat import autodiff as ad
from asdgat.errors import ConfigError, DataError, NumericError
from asdgat.ingest import SyntheticCohortSpec
from asdgat.nn.layers import make_batch
from asdgat.train import (
    Adam,
    TrainConfig,
    adam_step,
    evaluate_loss,
    nll_loss,
    run_replicates,
    stratified_split,
    sweep,
    train_model,
)

from conftest import cohort_graphs

TINY = dict(heads=2, head_width=4, n_gat_blocks=2, fc_width=8)


def _subjects(n_pos, n_neg):
    return [SimpleNamespace(id=f"a{i}", label=1) for i in range(n_pos)] + \
        [SimpleNamespace(id=f"c{i}", label=0) for i in range(n_neg)]


def test_split_exact_arithmetic():
    s = stratified_split(_subjects(50, 50), (0.8, 0.1, 0.1), seed=0)
    for part, expected in ((s.train, 40), (s.validation, 5), (s.test, 5)):
        assert sum(x.startswith("a") for x in part) == expected
        assert sum(x.startswith("c") for x in part) == expected


def test_split_deterministic():
    subs = _subjects(30, 20)
    assert stratified_split(subs, seed=5) == stratified_split(subs, seed=5)
    assert stratified_split(subs, seed=5).train != stratified_split(subs, seed=6).train


def test_split_on_1035_subject_cohort():
    # 505 ASD / 530 controls
    s = stratified_split(_subjects(505, 530), seed=0)
    assert len(s.test) in (103, 104)
    n_asd = sum(x.startswith("a") for x in s.test)
    assert abs(n_asd - len(s.test) * 505 / 1035) <= 1
    assert abs((len(s.test) - n_asd) - len(s.test) * 530 / 1035) <= 1


@pytest.mark.parametrize("seed", range(5))
def test_split_is_a_stratified_partition(seed):
    rng = np.random.default_rng(seed)
    n_pos, n_neg = int(rng.integers(3, 80)), int(rng.integers(3, 80))
    subs = _subjects(n_pos, n_neg)
    s = stratified_split(subs, (0.8, 0.1, 0.1), seed)
    parts = [s.train, s.validation, s.test]
    flat = [x for p in parts for x in p]
    assert sorted(flat) == sorted(x.id for x in subs)
    for part, r in zip(parts, (0.8, 0.1, 0.1)):
        assert abs(sum(x.startswith("a") for x in part) - r * n_pos) < 1
        assert abs(sum(x.startswith("c") for x in part) - r * n_neg) < 1


def test_split_needs_enough_per_class():
    with pytest.raises(DataError):
        stratified_split(_subjects(2, 10))


def test_nll_examples():
    perfect = ad.Tensor([[0.0, -1e30]])
    assert float(nll_loss(perfect, [0]).data) == 0.0
    uniform = ad.Tensor(np.log([[0.5, 0.5], [0.5, 0.5]]))
    assert float(nll_loss(uniform, [0, 1]).data) == pytest.approx(math.log(2))
    mixed = ad.Tensor(np.log([[0.9, 0.1], [0.2, 0.8]]))
    assert float(nll_loss(mixed, [0, 1]).data) == pytest.approx((0.1053605157 + 0.2231435513) / 2, abs=1e-9)
    with pytest.raises(DataError):
        nll_loss(uniform, [0, 2])


def test_adam_zero_gradient_keeps_parameters():
    p, m, v = adam_step([np.array([1.0, -2.0])], [np.zeros(2)], [np.zeros(2)], [np.zeros(2)], 1, 0.1)
    np.testing.assert_array_equal(p[0], [1.0, -2.0])


def test_adam_first_step_bounded_by_lr():
    g = np.array([3.0, -1e-3, 50.0])
    p, _, _ = adam_step([np.zeros(3)], [g], [np.zeros(3)], [np.zeros(3)], 1, 0.01)
    assert np.all(np.abs(p[0]) <= 0.01 * (1 + 1e-6))
    np.testing.assert_array_equal(np.sign(p[0]), -np.sign(g))


def test_adam_converges_on_quadratic():
    theta = ad.parameter(1.0)
    opt = Adam({"theta": theta}, lr=0.1)
    for _ in range(200):
        opt.zero_grad()
        ad.multiply(theta, theta).backward()
        opt.step()
    # recorded oracle run: theta = -7.218e-06 after 200 steps
    assert abs(float(theta.data)) < 0.05


def test_adam_rejects_non_finite():
    with pytest.raises(NumericError):
        adam_step([np.zeros(1)], [np.array([np.nan])], [np.zeros(1)], [np.zeros(1)], 1, 0.1)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=1)
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"bogus": 1})
    c = TrainConfig.from_dict(TrainConfig(seed=4).to_dict())
    assert c == TrainConfig(seed=4)


@pytest.fixture(scope="module")
def cohort():
    return cohort_graphs(SyntheticCohortSpec(10, 8, 120, (0, 1, 2), 0.8, 1.0, seed=1))


def test_zero_epochs_runs(cohort):
    cfg = TrainConfig(epochs=0, **TINY)
    r = train_model(cohort, stratified_split(cohort, seed=0), cfg)
    assert r.history == [] and r.best_epoch == 0
    assert 0.0 <= r.metrics.accuracy <= 1.0


def test_training_is_deterministic(cohort, tmp_path):
    cfg = TrainConfig(epochs=4, learning_rate=1e-3, batch_size=4, **TINY)
    split = stratified_split(cohort, seed=2)
    a = train_model(cohort, split, cfg, seed=2, out_dir=tmp_path / "a")
    b = train_model(cohort, split, cfg, seed=2, out_dir=tmp_path / "b")
    assert a.to_dict()["history"] == b.to_dict()["history"]
    assert a.metrics.to_dict() == b.metrics.to_dict()
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()


def test_restored_checkpoint_reproduces_validation_loss(cohort):
    cfg = TrainConfig(epochs=15, learning_rate=3e-3, batch_size=4, patience=5, **TINY)
    split = stratified_split(cohort, seed=3)
    r = train_model(cohort, split, cfg, seed=3)
    val = [g for g in cohort if g.id in set(split.validation)]
    assert abs(evaluate_loss(r.model, val) - r.best_val_loss) <= 1e-9
    assert len(r.history) <= cfg.epochs


def test_early_stopping(cohort):
    cfg = TrainConfig(epochs=200, learning_rate=1e-6, batch_size=4, patience=2, **TINY)
    r = train_model(cohort, stratified_split(cohort, seed=0), cfg)
    assert len(r.history) < 200


def test_overfits_ten_subjects():
    graphs = cohort_graphs(SyntheticCohortSpec(5, 6, 60, (0, 1), 0.5, 1.0, seed=9))
    cfg = TrainConfig(learning_rate=3e-3, batch_size=10, dropout_first=0.0, dropout_rest=0.0, dropout_fc=0.0, **TINY)
    from asdgat.nn.models import GraphClassifier

    model = GraphClassifier(cfg.model_config(6), 0)
    opt = Adam(model.params, cfg.learning_rate)
    batch = make_batch(graphs)
    rng = np.random.default_rng(0)
    for epoch in range(300):
        loss = nll_loss(model.forward(batch, train=True, rng=rng).log_probs, batch.labels)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if float(loss.data) <= 0.05:
            break
    assert float(loss.data) <= 0.05


def test_replicates(cohort):
    cfg = TrainConfig(epochs=2, learning_rate=1e-3, batch_size=4, seed=10, **TINY)
    results, agg = run_replicates(cohort, cfg, n_runs=1)
    assert agg["accuracy"]["std"] == 0.0
    assert agg["accuracy"]["mean"] == results[0].metrics.accuracy
    results2, agg2 = run_replicates(cohort, cfg, n_runs=2)
    assert [r.seed for r in results2] == [10, 11]
    assert agg2 == run_replicates(cohort, cfg, n_runs=2)[1]


def test_parallel_replicates_match_sequential(cohort):
    cfg = TrainConfig(epochs=2, learning_rate=1e-3, batch_size=4, **TINY)
    _, seq = run_replicates(cohort, cfg, n_runs=2, jobs=1)
    _, par = run_replicates(cohort, cfg, n_runs=2, jobs=2)
    assert seq == par


def test_sweep(cohort):
    base = TrainConfig(epochs=2, batch_size=4, **TINY)
    rows = sweep({"learning_rate": [1e-3, 1e-4]}, cohort, base)
    assert len(rows) == 2
    assert {r["params"]["learning_rate"] for r in rows} == {1e-3, 1e-4}
    accs = [r["val_accuracy"] for r in rows]
    assert accs == sorted(accs, reverse=True)
    single = sweep({"learning_rate": [1e-3]}, cohort, base)
    assert single[0]["params"] == {"learning_rate": 1e-3}
    with pytest.raises(ConfigError):
        sweep({"batch_size": [1, 4]}, cohort, base)
