import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pareto_lowrank.tensorio import (
    BLOB_NAME,
    MANIFEST_NAME,
    CalibrationRecord,
    ContainerError,
    Covariance,
    WeightTensor,
    covariance_from_activations,
    read_calibration,
    read_container,
    write_calibration,
    write_container,
)


def test_identity_entry_byte_length(tmp_path):
    m = write_container([("eye", np.eye(2))], tmp_path / "c")
    assert m.entries[0].byte_length == 32
    doc = json.loads((tmp_path / "c" / MANIFEST_NAME).read_text())
    assert set(doc) == {"format_version", "entries"}
    assert set(doc["entries"][0]) == {"name", "rows", "cols", "dtype", "group", "byte_offset", "byte_length"}


def test_empty_container(tmp_path):
    m = write_container([], tmp_path / "c")
    assert m.entries == ()
    assert read_container(tmp_path / "c") == []


def test_roundtrip_random_matrices(tmp_path):
    rng = np.random.default_rng(1)
    mats = [rng.standard_normal((3, 5)), rng.standard_normal((7, 2)).astype(np.float32), rng.standard_normal((1, 1))]
    write_container([(f"m{i}", m, "g") for i, m in enumerate(mats)], tmp_path / "c")
    back = read_container(tmp_path / "c")
    assert [t.name for t in back] == ["m0", "m1", "m2"]
    for t, m in zip(back, mats):
        assert t.matrix.dtype == m.dtype
        assert t.matrix.tobytes() == m.tobytes()


def test_blob_is_little_endian_row_major(tmp_path):
    a = np.arange(6, dtype=np.float64).reshape(2, 3)
    write_container([("a", a)], tmp_path / "c")
    raw = (tmp_path / "c" / BLOB_NAME).read_bytes()
    assert np.array_equal(np.frombuffer(raw, dtype="<f8"), a.ravel())


@settings(max_examples=40, deadline=None)
@given(
    shapes=st.lists(st.tuples(st.integers(1, 6), st.integers(1, 6)), max_size=4),
    use_f32=st.lists(st.booleans(), min_size=4, max_size=4),
    seed=st.integers(0, 2**32 - 1),
)
def test_roundtrip_property(tmp_path_factory, shapes, use_f32, seed):
    rng = np.random.default_rng(seed)
    mats = []
    for (r, c), f32 in zip(shapes, use_f32):
        m = rng.standard_normal((r, c)) * 10.0 ** rng.integers(-30, 30)
        mats.append(m.astype(np.float32) if f32 else m)
    path = tmp_path_factory.mktemp("rt")
    write_container([(f"t{i}", m) for i, m in enumerate(mats)], path)
    for t, m in zip(read_container(path), mats):
        assert t.matrix.tobytes() == m.tobytes()


def test_duplicate_name_rejected(tmp_path):
    with pytest.raises(ContainerError, match="duplicate"):
        write_container([("a", np.eye(2)), ("a", np.eye(3))], tmp_path / "c")


def test_nonfinite_rejected(tmp_path):
    with pytest.raises(ValueError, match="non-finite"):
        write_container([("a", np.array([[np.nan]]))], tmp_path / "c")


def test_truncated_blob(tmp_path):
    write_container([("a", np.eye(2))], tmp_path / "c")
    blob = tmp_path / "c" / BLOB_NAME
    blob.write_bytes(blob.read_bytes()[:-1])
    with pytest.raises(ContainerError, match="truncated blob"):
        read_container(tmp_path / "c")


def _rewrite_manifest(path, edit):
    doc = json.loads((path / MANIFEST_NAME).read_text())
    edit(doc)
    (path / MANIFEST_NAME).write_text(json.dumps(doc))


def test_overlapping_entries(tmp_path):
    path = tmp_path / "c"
    write_container([("a", np.eye(2)), ("b", np.eye(2))], path)
    _rewrite_manifest(path, lambda d: d["entries"][1].update(byte_offset=16))
    with pytest.raises(ContainerError, match="overlapping entries"):
        read_container(path)


def test_version_mismatch(tmp_path):
    path = tmp_path / "c"
    write_container([("a", np.eye(2))], path)
    _rewrite_manifest(path, lambda d: d.update(format_version=99))
    with pytest.raises(ContainerError, match="version mismatch"):
        read_container(path)


def test_length_inconsistency(tmp_path):
    path = tmp_path / "c"
    write_container([("a", np.eye(2))], path)
    _rewrite_manifest(path, lambda d: d["entries"][0].update(byte_length=24))
    with pytest.raises(ContainerError, match="inconsistency"):
        read_container(path)


def test_covariance_single_sample():
    c = covariance_from_activations(np.array([[1.0], [0.0]]))
    assert np.array_equal(c.matrix, [[1.0, 0.0], [0.0, 0.0]])
    assert c.sample_count == 1


def test_covariance_identity():
    assert np.array_equal(covariance_from_activations(np.eye(3)).matrix, np.eye(3))


def test_covariance_matches_triple_loop():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((5, 64))
    expected = np.zeros((5, 5))
    for i in range(5):
        for j in range(5):
            for b in range(64):
                expected[i, j] += X[i, b] * X[j, b]
    c = covariance_from_activations(X)
    assert np.max(np.abs(c.matrix - expected)) <= 1e-12 * np.abs(expected).max()
    assert np.array_equal(c.matrix, c.matrix.T)
    assert c.sample_count == 64


def test_covariance_rejects_nonfinite():
    with pytest.raises(ValueError):
        covariance_from_activations(np.array([[np.inf, 1.0]]))


@settings(max_examples=50, deadline=None)
@given(m=st.integers(1, 8), b=st.integers(1, 8), seed=st.integers(0, 2**32 - 1))
def test_covariance_is_psd(m, b, seed):
    X = np.random.default_rng(seed).standard_normal((m, b)) * 100
    c = covariance_from_activations(X)
    Covariance(c.matrix, c.sample_count).validate()
    w = np.linalg.eigvalsh(c.matrix)
    assert w[0] >= -1e-8 * max(w[-1], 0.0)


def test_calibration_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    X = rng.standard_normal((4, 9))
    cov = covariance_from_activations(rng.standard_normal((3, 5)))
    write_calibration(
        [CalibrationRecord("a", activations=X), CalibrationRecord("b", covariance=cov)], tmp_path / "cal"
    )
    recs = read_calibration(tmp_path / "cal")
    assert np.array_equal(recs["a"].activations, X)
    assert recs["b"].covariance.sample_count == 5
    assert np.array_equal(recs["a"].to_covariance().matrix, covariance_from_activations(X).matrix)
    assert np.array_equal(recs["b"].to_covariance().matrix, cov.matrix)


def test_calibration_validation():
    with pytest.raises(ValueError, match="symmetric"):
        Covariance(np.array([[1.0, 2.0], [0.0, 1.0]]), 2).validate()
    with pytest.raises(ValueError, match="PSD"):
        Covariance(np.diag([1.0, -1.0]), 2).validate()
    with pytest.raises(ValueError):
        CalibrationRecord("x")
    with pytest.raises(ValueError):
        WeightTensor("", np.eye(2)).validate()
