import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from concept_forgetting.features import (AlignmentError, FeatureMatrix, LabelRangeError,
                                         LengthMismatchError, NonFiniteError, SchemaVersionError,
                                         align_pair, layout_dir, load_bundle, load_features,
                                         load_layout, save_bundle, save_features)
from conftest import make_matrix


def test_blob_size_is_row_major_f32(tmp_path):
    m = make_matrix(np.arange(12).reshape(4, 3))
    save_features(m, tmp_path)
    raw = (tmp_path / "features.f32").read_bytes()
    assert len(raw) == 48
    # little-endian binary32, row-major
    assert np.array_equal(np.frombuffer(raw, dtype="<f4"), np.arange(12, dtype=np.float32))


def test_round_trip_bitwise(tmp_path, rng):
    data = rng.standard_normal((7, 5)).astype(np.float32)
    labels = rng.integers(0, 3, 7)
    m = make_matrix(data, labels, task_id=2, checkpoint_id=3, split="test", label_count=3, seed_note="x")
    loaded = load_features(save_features(m, tmp_path))
    assert loaded.data.tobytes() == m.data.tobytes()
    assert np.array_equal(loaded.labels, labels)
    assert loaded.manifest == m.manifest


finite_f32 = arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 5)),
                    elements=st.floats(width=32, allow_nan=False, allow_infinity=False))


@settings(max_examples=40, deadline=None)
@given(data=finite_f32)
def test_round_trip_property(tmp_path_factory, data):
    d = tmp_path_factory.mktemp("rt")
    loaded = load_features(save_features(make_matrix(data), d))
    assert loaded.data.tobytes() == np.ascontiguousarray(data).tobytes()


def test_nan_rejected():
    with pytest.raises(NonFiniteError):
        make_matrix([[0.0, np.nan]])


def test_matrix_is_read_only(rng):
    m = make_matrix(rng.standard_normal((3, 2)))
    with pytest.raises(ValueError):
        m.data[0, 0] = 1.0


def _write_manual(tmp_path, n_bytes, labels=None, label_count=0, **overrides):
    manifest = {"schema_version": 1, "task_id": 0, "checkpoint_id": 0, "split": "train", "n_samples": 4,
                "dim": 3, "label_count": label_count, "blob_file": "features.f32", "labels_file": None,
                "seed_note": ""}
    manifest.update(overrides)
    (tmp_path / "features.f32").write_bytes(np.zeros(n_bytes // 4, dtype="<f4").tobytes())
    if labels is not None:
        (tmp_path / "labels.u32").write_bytes(np.asarray(labels, dtype="<u4").tobytes())
        manifest["labels_file"] = "labels.u32"
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    return tmp_path / "manifest.json"


def test_manifest_shapes_blob(tmp_path):
    assert load_features(_write_manual(tmp_path, 48)).data.shape == (4, 3)


def test_short_blob_is_length_mismatch(tmp_path):
    with pytest.raises(LengthMismatchError):
        load_features(_write_manual(tmp_path, 44))


def test_label_out_of_range(tmp_path):
    with pytest.raises(LabelRangeError):
        load_features(_write_manual(tmp_path, 48, labels=[0, 1, 7, 2], label_count=5))


def test_unknown_schema_version(tmp_path):
    with pytest.raises(SchemaVersionError):
        load_features(_write_manual(tmp_path, 48, schema_version=2))


def test_missing_blob_names_path(tmp_path):
    path = _write_manual(tmp_path, 48)
    (tmp_path / "features.f32").unlink()
    with pytest.raises(FileNotFoundError, match="features.f32"):
        load_features(path)


def test_layout(tmp_path, rng):
    m = make_matrix(rng.standard_normal((3, 2)), task_id=1, checkpoint_id=2, split="test")
    save_features(m, layout_dir(tmp_path, 1, 2, "test"))
    assert (tmp_path / "task1" / "ckpt2" / "test" / "manifest.json").exists()
    assert load_layout(tmp_path, 1, 2, "test").data.tobytes() == m.data.tobytes()


def test_align_pair(rng):
    y = np.array([0, 1, 1, 0])
    a = make_matrix(rng.standard_normal((4, 3)), y, split="test")
    b = make_matrix(rng.standard_normal((4, 3)), y, split="test", checkpoint_id=1)
    pair = align_pair(a, b)
    assert pair.first is a and pair.second is b and pair.n_samples == 4


@pytest.mark.parametrize("change", ["rows", "labels", "task", "split"])
def test_align_pair_mismatch_is_symmetric(rng, change):
    y = np.array([0, 1, 1, 0])
    a = make_matrix(rng.standard_normal((4, 3)), y, split="test")
    if change == "rows":
        b = make_matrix(rng.standard_normal((3, 3)), y[:3], split="test")
    elif change == "labels":
        b = make_matrix(rng.standard_normal((4, 3)), 1 - y, split="test")
    elif change == "task":
        b = make_matrix(rng.standard_normal((4, 3)), y, split="test", task_id=1)
    else:
        b = make_matrix(rng.standard_normal((4, 3)), y, split="train")
    for first, second in ((a, b), (b, a)):
        with pytest.raises(AlignmentError):
            align_pair(first, second)


def test_with_data_keeps_labels(rng):
    y = np.array([0, 1, 2])
    m = make_matrix(rng.standard_normal((3, 2)), y)
    out = m.with_data(np.zeros((3, 2)), checkpoint_id=5)
    assert np.array_equal(out.labels, y) and out.manifest.checkpoint_id == 5
    assert isinstance(out, FeatureMatrix)


def test_bundle_round_trip(tmp_path, rng):
    arrays_in = {"W": rng.standard_normal((3, 4)).astype(np.float32), "idx": np.array([0, 3, 9])}
    save_bundle(tmp_path, "thing", arrays_in, {"a": 1})
    arrays_out, meta = load_bundle(tmp_path, kind="thing")
    assert arrays_out["W"].tobytes() == arrays_in["W"].tobytes()
    assert np.array_equal(arrays_out["idx"], arrays_in["idx"]) and meta == {"a": 1}


def test_failed_write_leaves_no_partial_file(tmp_path, monkeypatch):
    from concept_forgetting import features

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(features.os, "replace", boom)
    with pytest.raises(OSError):
        features.atomic_write_text(tmp_path / "x.json", "{}")
    assert list(tmp_path.iterdir()) == []
