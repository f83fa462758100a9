"""Synthetic multi-checkpoint features with planted sparse concepts and controlled drift.

Anchor features are sparse non-negative combinations of a random unit-norm
dictionary plus isotropic noise.  Drifted features are a deterministic
function of the anchor features, so every row keeps its sample identity and
label; the drift family decides what a linear map can undo.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .features import FeatureMatrix, layout_dir, load_bundle, save_bundle, save_features

DRIFT_KINDS = ("identity", "rotation", "rotation_scaling", "affine", "erasure", "nonlinear")
INVERTIBLE_KINDS = ("identity", "rotation", "rotation_scaling", "affine")


@dataclass
class DriftSpec:
    kind: str = "identity"
    scale_range: tuple[float, float] = (0.5, 2.0)
    erased_atoms: tuple[int, ...] = ()
    bias_norm: float = 0.0
    rotate: bool = False  # erasure only: rotate after projecting

    def __post_init__(self):
        if self.kind not in DRIFT_KINDS:
            raise ValueError(f"drift kind must be one of {DRIFT_KINDS}, got {self.kind!r}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("scale_range must satisfy 0 < lo <= hi")
        if self.bias_norm < 0:
            raise ValueError("bias_norm must be non-negative")
        self.scale_range = (float(lo), float(hi))
        self.erased_atoms = tuple(int(a) for a in self.erased_atoms)


@dataclass
class SynthSpec:
    d: int = 32
    n_atoms: int = 32
    k_true: int = 3
    n_train: int = 2000
    n_test: int = 1000
    noise_sigma: float = 0.01
    n_classes: int = 4
    drift: DriftSpec = field(default_factory=DriftSpec)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.drift, dict):
            self.drift = DriftSpec(**self.drift)
        if not 1 <= self.k_true <= self.n_atoms:
            raise ValueError("need 1 <= k_true <= n_atoms")
        if self.n_classes < 1 or self.n_atoms % self.n_classes:
            raise ValueError("n_classes must divide n_atoms")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if min(self.d, self.n_train, self.n_test) < 1:
            raise ValueError("d, n_train and n_test must be positive")
        bad = [a for a in self.drift.erased_atoms if not 0 <= a < self.n_atoms]
        if bad:
            raise ValueError(f"erased atoms {bad} outside [0, {self.n_atoms})")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["drift"]["scale_range"] = list(self.drift.scale_range)
        out["drift"]["erased_atoms"] = list(self.drift.erased_atoms)
        return out


@dataclass
class SynthData:
    spec: SynthSpec
    dictionary: np.ndarray  # d x n_atoms, unit-norm columns
    codes: dict  # split -> n x n_atoms
    anchor: dict  # split -> float64 features
    drifted: dict  # split -> float64 features
    labels: dict  # split -> int labels
    drift_params: dict

    def matrix(self, split: str, drifted: bool = False, task_id: int = 0) -> FeatureMatrix:
        data = self.drifted[split] if drifted else self.anchor[split]
        return FeatureMatrix.from_array(
            data, self.labels[split], task_id=task_id, checkpoint_id=1 if drifted else 0,
            split=split, label_count=self.spec.n_classes,
            seed_note=f"synthetic seed={self.spec.seed} drift={self.spec.drift.kind}",
        )

    @property
    def erased(self) -> tuple[int, ...]:
        return self.spec.drift.erased_atoms if self.spec.drift.kind == "erasure" else ()


def random_rotation(d: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def _codes(n: int, spec: SynthSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    S = np.zeros((n, spec.n_atoms))
    picks = np.argsort(rng.random((n, spec.n_atoms)), axis=1)[:, :spec.k_true]
    mags = rng.uniform(0.5, 1.5, size=(n, spec.k_true))
    np.put_along_axis(S, picks, mags, axis=1)
    dominant = picks[np.arange(n), np.argmax(mags, axis=1)]
    group = spec.n_atoms // spec.n_classes
    return S, dominant // group


def _gelu_like(x):
    return x + 0.5 * np.tanh(x)


def _drift_fn(spec: SynthSpec, dictionary: np.ndarray, rng: np.random.Generator):
    drift, d = spec.drift, spec.d
    lo, hi = drift.scale_range
    params: dict = {}
    if drift.kind == "identity":
        return (lambda h: h.copy()), params
    if drift.kind == "rotation":
        R = random_rotation(d, rng)
        params["A"] = R
        return (lambda h: h @ R.T), params
    if drift.kind == "rotation_scaling":
        R = random_rotation(d, rng)
        c = rng.uniform(lo, hi, size=d)
        A = R * c  # R @ diag(c)
        params["A"] = A
        return (lambda h: h @ A.T), params
    if drift.kind == "affine":
        R1, R2 = random_rotation(d, rng), random_rotation(d, rng)
        A = (R1 * rng.uniform(lo, hi, size=d)) @ R2.T
        b = rng.standard_normal(d)
        b *= drift.bias_norm / max(np.linalg.norm(b), 1e-300)
        params.update(A=A, b=b)
        return (lambda h: h @ A.T + b), params
    if drift.kind == "erasure":
        atoms = dictionary[:, list(drift.erased_atoms)]
        Q, _ = np.linalg.qr(atoms) if atoms.shape[1] else (np.zeros((d, 0)), None)
        P = np.eye(d) - Q @ Q.T
        A = random_rotation(d, rng) @ P if drift.rotate else P
        params["A"] = A
        return (lambda h: h @ A.T), params
    # nonlinear: rotate, bend each coordinate monotonically, rotate again
    R1, R2 = random_rotation(d, rng), random_rotation(d, rng)
    params.update(R1=R1, R2=R2)
    return (lambda h: _gelu_like(h @ R1.T) @ R2.T), params


def generate(spec: SynthSpec) -> SynthData:
    rng = np.random.default_rng(spec.seed)
    D = rng.standard_normal((spec.d, spec.n_atoms))
    D /= np.linalg.norm(D, axis=0, keepdims=True)
    codes, anchor, labels = {}, {}, {}
    for split, n in (("train", spec.n_train), ("test", spec.n_test)):
        S, y = _codes(n, spec, rng)
        codes[split] = S
        labels[split] = y
        anchor[split] = S @ D.T + spec.noise_sigma * rng.standard_normal((n, spec.d))
    fn, params = _drift_fn(spec, D, rng)
    drifted = {split: fn(h) for split, h in anchor.items()}
    return SynthData(spec, D, codes, anchor, drifted, labels, params)


def oracle_expectations(spec: SynthSpec) -> dict:
    """Metric bounds that hold by construction for ``spec``'s drift family."""
    kind = spec.drift.kind
    bounds: dict = {}
    if kind == "identity":
        bounds["deletion_ratio"] = {"max": 0.0}
        bounds["taxonomy"] = {"all": "retained"}
    if kind in INVERTIBLE_KINDS:
        bounds["translated_probe_gap_points"] = {"max": 2.0}
        bounds["lost_count"] = {"max": 0}
    if kind in INVERTIBLE_KINDS and kind != "identity":
        bounds["regained_count_ratio"] = {"min": 0.9}
    if kind == "erasure" and spec.drift.erased_atoms:
        bounds["erased_aligned_min_f1"] = {"max": 0.2}
        bounds["erased_aligned_non_recovered"] = {"min": 1}
        bounds["surviving_aligned_lost"] = {"max": 0}
    return bounds


def align_latents_to_atoms(W_dec: np.ndarray, dictionary: np.ndarray, threshold: float = 0.7) -> dict[int, int]:
    """Map latent index -> atom index by max cosine between decoder columns and atoms."""
    W = np.asarray(W_dec, dtype=np.float64)
    norms = np.linalg.norm(W, axis=0)
    cos = (W.T @ dictionary) / np.maximum(norms, 1e-12)[:, None]
    best = np.argmax(cos, axis=1)
    out = {}
    for latent, atom in enumerate(best):
        if norms[latent] > 0 and cos[latent, atom] >= threshold:
            out[latent] = int(atom)
    return out


def write_synth(root, data: SynthData, task_id: int = 0) -> Path:
    """Write anchor (ckpt0) and drifted (ckpt1) splits plus a ground-truth sidecar."""
    root = Path(root)
    for split in ("train", "test"):
        save_features(data.matrix(split, task_id=task_id), layout_dir(root, task_id, 0, split))
        save_features(data.matrix(split, drifted=True, task_id=task_id), layout_dir(root, task_id, 1, split))
    arrays = {
        "dictionary": data.dictionary,
        "codes_train": data.codes["train"],
        "codes_test": data.codes["test"],
        "erased": np.asarray(data.erased, dtype=np.int64),
    }
    return save_bundle(root / f"task{task_id}" / "ground_truth", "synth_ground_truth", arrays,
                       {"spec": data.spec.to_dict()})


def load_ground_truth(root, task_id: int = 0) -> tuple[dict, dict]:
    return load_bundle(Path(root) / f"task{task_id}" / "ground_truth", kind="synth_ground_truth")
