import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from asdgat.connectome import pearson_matrix
from asdgat.errors import ConfigError, DataError
from asdgat.ingest import (
    SyntheticCohortSpec,
    generate_synthetic_cohort,
    impute_missing,
    load_manifest,
    load_subject,
    read_timeseries,
    write_synthetic_cohort,
    zscore_normalize,
)


def _write_manifest(tmp_path, subjects, n_regions=2):
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps({"n_regions": n_regions, "subjects": subjects}))
    return path


def test_load_minimal_manifest(tmp_path):
    m = load_manifest(_write_manifest(tmp_path, [{"id": "a", "label": 0, "path": "a.csv"},
                                                 {"id": "b", "label": 1, "path": "b.csv"}]))
    assert len(m.subjects) == 2
    assert m.label_counts == {0: 1, 1: 1}


def test_duplicate_subject_rejected(tmp_path):
    path = _write_manifest(tmp_path, [{"id": "a", "label": 0, "path": "a.csv"}, {"id": "a", "label": 1, "path": "b.csv"}])
    with pytest.raises(DataError, match="duplicate subject"):
        load_manifest(path)


def test_unknown_label_rejected(tmp_path):
    with pytest.raises(DataError, match="unknown label"):
        load_manifest(_write_manifest(tmp_path, [{"id": "a", "label": 2, "path": "a.csv"}]))


def test_missing_manifest(tmp_path):
    with pytest.raises(DataError):
        load_manifest(tmp_path / "nope.json")


def test_benchmark_sized_manifest(tmp_path):
    # an 871-subject cohort
    subjects = [{"id": f"s{k}", "label": k % 2, "path": f"s{k}.csv"} for k in range(871)]
    assert len(load_manifest(_write_manifest(tmp_path, subjects, 116)).subjects) == 871


def test_region_count_mismatch(tmp_path):
    (tmp_path / "a.csv").write_text("1,2,3\n4,5,6\n")
    m = load_manifest(_write_manifest(tmp_path, [{"id": "a", "label": 0, "path": "a.csv"}], n_regions=2))
    with pytest.raises(DataError, match="expected 2 regions"):
        load_subject(m, m.subjects[0])


def test_nan_token_is_case_insensitive(tmp_path):
    p = tmp_path / "ts.csv"
    p.write_text("1,NaN\n2,nan\n3,NAN\n")
    ts = read_timeseries(p)
    assert np.isnan(ts[:, 1]).all()


def test_impute_examples():
    np.testing.assert_array_equal(impute_missing(np.array([[1, np.nan], [2, 3]])), [[1, 0], [2, 3]])
    clean = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(impute_missing(clean), clean)
    np.testing.assert_array_equal(impute_missing(np.array([[np.nan], [np.nan]])), [[0.0], [0.0]])


def test_zscore_examples():
    # (x - 2) / sqrt(2/3)
    np.testing.assert_allclose(zscore_normalize(np.array([[1.0], [2.0], [3.0]]))[:, 0],
                               [-1.2247448713915890, 0.0, 1.2247448713915890], atol=1e-12)
    np.testing.assert_array_equal(zscore_normalize(np.array([[5.0], [5.0], [5.0]]))[:, 0], [0, 0, 0])
    np.testing.assert_allclose(zscore_normalize(np.array([[-1.0], [1.0]]))[:, 0], [-1, 1])


finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 30), st.integers(1, 6)), elements=finite | st.just(np.nan)))
def test_pipeline_has_no_missing_and_zero_means(ts):
    out = zscore_normalize(impute_missing(ts))
    assert not np.isnan(out).any()
    spread = out.std(axis=0)
    assert np.all(np.abs(out.mean(axis=0)[spread > 0]) <= 1e-9)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 30), st.integers(1, 6)), elements=finite))
def test_zscore_idempotent(ts):
    once = zscore_normalize(ts)
    np.testing.assert_allclose(zscore_normalize(once), once, atol=1e-9)


def _block_abs_r(series, block):
    r = pearson_matrix(zscore_normalize(series))
    return np.mean([abs(r[i, j]) for i in block for j in block if i < j])


def test_synthetic_planted_block_separates_classes():
    spec = SyntheticCohortSpec(50, 20, 200, (0, 1, 2, 3, 4), 0.8, 1.0, seed=0)
    manifest, series = generate_synthetic_cohort(spec)
    by_class = {lab: np.mean([_block_abs_r(series[s.id], spec.planted_block) for s in manifest.subjects
                              if s.label == lab]) for lab in (0, 1)}
    # recorded at build time: 0.3826 (ASD) vs 0.0561 (control)
    gap = by_class[1] - by_class[0]
    assert gap >= 0.2
    assert gap == pytest.approx(0.32655, abs=1e-4)


def test_weak_coupling_makes_classes_indistinguishable():
    spec = SyntheticCohortSpec(50, 20, 2000, (0, 1, 2, 3, 4), 0.02, 1.0, seed=0)
    manifest, series = generate_synthetic_cohort(spec)
    by_class = [np.mean([_block_abs_r(series[s.id], spec.planted_block) for s in manifest.subjects
                         if s.label == lab]) for lab in (0, 1)]
    assert abs(by_class[1] - by_class[0]) < 0.005


def test_synthetic_is_deterministic(tmp_path):
    spec = SyntheticCohortSpec(3, 5, 20, (0, 1), 0.5, 1.0, seed=11)
    a = generate_synthetic_cohort(spec)[1]
    b = generate_synthetic_cohort(spec)[1]
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()
    write_synthetic_cohort(spec, tmp_path / "x")
    write_synthetic_cohort(spec, tmp_path / "y")
    for f in (tmp_path / "x").rglob("*.*"):
        assert f.read_bytes() == (tmp_path / "y" / f.relative_to(tmp_path / "x")).read_bytes()


def test_written_series_round_trip(tmp_path):
    spec = SyntheticCohortSpec(2, 4, 15, (0, 1), 0.5, 1.0, seed=2)
    manifest = write_synthetic_cohort(spec, tmp_path)
    raw = generate_synthetic_cohort(spec)[1]
    loaded = load_manifest(tmp_path / "manifest.json")
    for s in loaded.subjects:
        assert read_timeseries(loaded.resolve(s)).tobytes() == raw[s.id].tobytes()
    assert manifest.label_counts == {0: 2, 1: 2}


@pytest.mark.parametrize("kwargs", [dict(planted_block=(0, 25)), dict(coupling_strength=1.0),
                                    dict(noise_sigma=0.0), dict(n_subjects_per_class=0)])
def test_invalid_synthetic_spec(kwargs):
    with pytest.raises(ConfigError):
        generate_synthetic_cohort(SyntheticCohortSpec(**{"n_regions": 20, **kwargs}))
