"""On-disk feature dumps: a JSON manifest next to a raw little-endian float32 blob.

Layout under a features root::

    <root>/task<t>/ckpt<s>/<split>/manifest.json
                                   features.f32
                                   labels.u32      (optional)

Checkpoint 0 is the representation right after training on task ``t``;
checkpoint ``s`` is the same task's data after ``s`` further tasks.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "features.f32"
LABELS_NAME = "labels.u32"
SPLITS = ("train", "test")

_F32 = np.dtype("<f4")
_U32 = np.dtype("<u4")


class FeatureStoreError(ValueError):
    """Base class for malformed or inconsistent feature dumps."""


class NonFiniteError(FeatureStoreError):
    pass


class LengthMismatchError(FeatureStoreError):
    pass


class LabelRangeError(FeatureStoreError):
    pass


class SchemaVersionError(FeatureStoreError):
    pass


class AlignmentError(FeatureStoreError):
    pass


@dataclass(frozen=True)
class FeatureManifest:
    schema_version: int
    task_id: int
    checkpoint_id: int
    split: str
    n_samples: int
    dim: int
    label_count: int
    blob_file: str = BLOB_NAME
    labels_file: str | None = None
    seed_note: str = ""

    def __post_init__(self):
        if self.task_id < 0 or self.checkpoint_id < 0:
            raise FeatureStoreError("task_id and checkpoint_id must be >= 0")
        if self.split not in SPLITS:
            raise FeatureStoreError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.n_samples <= 0 or self.dim <= 0:
            raise FeatureStoreError("n_samples and dim must be positive")
        if self.label_count < 0:
            raise FeatureStoreError("label_count must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureManifest":
        version = d.get("schema_version")
        if version != SCHEMA_VERSION:
            raise SchemaVersionError(f"unknown schema_version {version!r} (expected {SCHEMA_VERSION})")
        try:
            return cls(
                schema_version=int(d["schema_version"]),
                task_id=int(d["task_id"]),
                checkpoint_id=int(d["checkpoint_id"]),
                split=str(d["split"]),
                n_samples=int(d["n_samples"]),
                dim=int(d["dim"]),
                label_count=int(d["label_count"]),
                blob_file=str(d["blob_file"]),
                labels_file=d.get("labels_file"),
                seed_note=str(d.get("seed_note", "")),
            )
        except KeyError as exc:
            raise FeatureStoreError(f"manifest missing field {exc.args[0]!r}") from None


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """Immutable ``n_samples x dim`` float32 matrix of backbone activations.

    Row ``i`` is the same input across all checkpoints of a task/split.
    """

    data: np.ndarray
    manifest: FeatureManifest
    labels: np.ndarray | None = field(default=None)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 2:
            raise FeatureStoreError(f"feature data must be 2-D, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise NonFiniteError("feature matrix contains NaN or Inf")
        m = self.manifest
        if data.shape != (m.n_samples, m.dim):
            raise LengthMismatchError(f"data shape {data.shape} != manifest ({m.n_samples}, {m.dim})")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        if self.labels is not None:
            labels = np.ascontiguousarray(self.labels, dtype=np.int64)
            _check_labels(labels, m.n_samples, m.label_count)
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)

    @classmethod
    def from_array(cls, data, labels=None, *, task_id: int = 0, checkpoint_id: int = 0,
                   split: str = "train", label_count: int | None = None,
                   seed_note: str = "") -> "FeatureMatrix":
        data = np.asarray(data)
        if data.ndim != 2:
            raise FeatureStoreError(f"feature data must be 2-D, got shape {data.shape}")
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
            if label_count is None:
                label_count = int(labels.max()) + 1 if labels.size else 0
        manifest = FeatureManifest(
            schema_version=SCHEMA_VERSION,
            task_id=task_id,
            checkpoint_id=checkpoint_id,
            split=split,
            n_samples=data.shape[0],
            dim=data.shape[1],
            label_count=label_count or 0,
            blob_file=BLOB_NAME,
            labels_file=LABELS_NAME if labels is not None else None,
            seed_note=seed_note,
        )
        return cls(data=data, manifest=manifest, labels=labels)

    def with_data(self, data, *, checkpoint_id: int | None = None, seed_note: str | None = None) -> "FeatureMatrix":
        """Same sample rows and labels, new feature values (e.g. translated or ablated)."""
        data = np.asarray(data)
        m = self.manifest
        manifest = FeatureManifest(
            schema_version=m.schema_version,
            task_id=m.task_id,
            checkpoint_id=m.checkpoint_id if checkpoint_id is None else checkpoint_id,
            split=m.split,
            n_samples=data.shape[0],
            dim=data.shape[1],
            label_count=m.label_count,
            blob_file=m.blob_file,
            labels_file=m.labels_file,
            seed_note=m.seed_note if seed_note is None else seed_note,
        )
        return FeatureMatrix(data=data, manifest=manifest, labels=self.labels)

    @property
    def n_samples(self) -> int:
        return self.manifest.n_samples

    @property
    def dim(self) -> int:
        return self.manifest.dim


def _check_labels(labels: np.ndarray, n_samples: int, label_count: int) -> None:
    if labels.shape != (n_samples,):
        raise LengthMismatchError(f"expected {n_samples} labels, got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= label_count):
        bad = labels[(labels < 0) | (labels >= label_count)][0]
        raise LabelRangeError(f"label {bad} outside [0, {label_count})")


def layout_dir(root, task_id: int, checkpoint_id: int, split: str) -> Path:
    return Path(root) / f"task{task_id}" / f"ckpt{checkpoint_id}" / split


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def save_features(matrix: FeatureMatrix, directory) -> Path:
    """Write manifest, blob and (optional) labels into ``directory``; returns the manifest path."""
    directory = Path(directory)
    if not np.isfinite(matrix.data).all():
        raise NonFiniteError("refusing to save non-finite features")
    m = matrix.manifest
    labels_file = LABELS_NAME if matrix.labels is not None else None
    manifest = FeatureManifest(**{**m.to_dict(), "blob_file": BLOB_NAME, "labels_file": labels_file})
    atomic_write_bytes(directory / BLOB_NAME, matrix.data.astype(_F32, copy=False).tobytes(order="C"))
    if matrix.labels is not None:
        atomic_write_bytes(directory / LABELS_NAME, matrix.labels.astype(_U32).tobytes())
    manifest_path = directory / MANIFEST_NAME
    atomic_write_text(manifest_path, dump_json(manifest.to_dict()))
    return manifest_path


def read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FeatureStoreError(f"cannot parse manifest {path}: {exc}") from None


def load_features(manifest_path) -> FeatureMatrix:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    manifest = FeatureManifest.from_dict(read_manifest(manifest_path))
    base = manifest_path.parent
    blob_path = base / manifest.blob_file
    if not blob_path.exists():
        raise FileNotFoundError(f"feature blob not found: {blob_path}")
    raw = blob_path.read_bytes()
    expected = manifest.n_samples * manifest.dim * 4
    if len(raw) != expected:
        raise LengthMismatchError(f"{blob_path}: {len(raw)} bytes, manifest implies {expected}")
    data = np.frombuffer(raw, dtype=_F32).reshape(manifest.n_samples, manifest.dim).astype(np.float32)
    labels = None
    if manifest.labels_file:
        labels_path = base / manifest.labels_file
        if not labels_path.exists():
            raise FileNotFoundError(f"labels file not found: {labels_path}")
        raw_labels = labels_path.read_bytes()
        if len(raw_labels) != manifest.n_samples * 4:
            raise LengthMismatchError(f"{labels_path}: {len(raw_labels)} bytes, expected {manifest.n_samples * 4}")
        labels = np.frombuffer(raw_labels, dtype=_U32).astype(np.int64)
    return FeatureMatrix(data=data, manifest=manifest, labels=labels)


def load_layout(root, task_id: int, checkpoint_id: int, split: str) -> FeatureMatrix:
    return load_features(layout_dir(root, task_id, checkpoint_id, split) / MANIFEST_NAME)


@dataclass(frozen=True)
class FeaturePair:
    """Row-aligned pair: row ``i`` of ``first`` and ``second`` describe the same sample."""

    first: FeatureMatrix
    second: FeatureMatrix

    @property
    def n_samples(self) -> int:
        return self.first.n_samples


def align_pair(a: FeatureMatrix, b: FeatureMatrix) -> FeaturePair:
    ma, mb = a.manifest, b.manifest
    if ma.task_id != mb.task_id:
        raise AlignmentError(f"task mismatch: {ma.task_id} vs {mb.task_id}")
    if ma.split != mb.split:
        raise AlignmentError(f"split mismatch: {ma.split} vs {mb.split}")
    if ma.n_samples != mb.n_samples:
        raise AlignmentError(f"n_samples mismatch: {ma.n_samples} vs {mb.n_samples}")
    if (a.labels is None) != (b.labels is None):
        raise AlignmentError("labels present on one side only")
    if a.labels is not None and not np.array_equal(a.labels, b.labels):
        raise AlignmentError("label vectors differ; rows are not the same samples")
    return FeaturePair(a, b)


# Generic manifest + binary32 bundles, used for model checkpoints and synthetic ground truth.

def save_bundle(directory, kind: str, arrays: dict[str, np.ndarray], meta: dict) -> Path:
    directory = Path(directory)
    entries = {}
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype.kind in "iu":
            dtype, suffix = _U32, "u32"
            if arr.size and arr.min() < 0:
                raise FeatureStoreError(f"array {name!r} has negative entries; cannot store as u32")
        else:
            dtype, suffix = _F32, "f32"
            if not np.isfinite(arr).all():
                raise NonFiniteError(f"array {name!r} contains NaN or Inf")
        fname = f"{name}.{suffix}"
        atomic_write_bytes(directory / fname, arr.astype(dtype).tobytes(order="C"))
        entries[name] = {"file": fname, "shape": list(arr.shape), "dtype": suffix}
    manifest = {"schema_version": SCHEMA_VERSION, "kind": kind, "arrays": entries, "meta": meta}
    path = directory / MANIFEST_NAME
    atomic_write_text(path, dump_json(manifest))
    return path


def load_bundle(directory, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    if directory.name == MANIFEST_NAME:
        directory = directory.parent
    manifest = read_manifest(directory / MANIFEST_NAME)
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionError(f"unknown schema_version {manifest.get('schema_version')!r}")
    if kind is not None and manifest.get("kind") != kind:
        raise FeatureStoreError(f"{directory}: expected a {kind!r} bundle, found {manifest.get('kind')!r}")
    arrays = {}
    for name, entry in manifest["arrays"].items():
        path = directory / entry["file"]
        if not path.exists():
            raise FileNotFoundError(f"array blob not found: {path}")
        dtype = _U32 if entry["dtype"] == "u32" else _F32
        shape = tuple(entry["shape"])
        raw = path.read_bytes()
        expected = int(np.prod(shape, dtype=np.int64)) * 4
        if len(raw) != expected:
            raise LengthMismatchError(f"{path}: {len(raw)} bytes, expected {expected}")
        arr = np.frombuffer(raw, dtype=dtype).reshape(shape)
        arrays[name] = arr.astype(np.int64 if dtype == _U32 else np.float32)
    return arrays, manifest["meta"]
