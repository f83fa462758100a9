import numpy as np
import pytest

from concept_forgetting.features import load_layout
from concept_forgetting.synth import (DriftSpec, SynthSpec, align_latents_to_atoms, generate, load_ground_truth,
                                      oracle_expectations, random_rotation, write_synth)
from concept_forgetting.translator import fit_linear_closed_form


def test_identity_bitwise():
    data = generate(SynthSpec(drift={"kind": "identity"}))
    assert data.drifted["test"].tobytes() == data.anchor["test"].tobytes()


def test_rotation_preserves_norms():
    data = generate(SynthSpec(drift={"kind": "rotation"}))
    R = data.drift_params["A"]
    assert np.max(np.abs(R @ R.T - np.eye(32))) <= 1e-10
    n0 = np.linalg.norm(data.anchor["test"], axis=1)
    assert np.max(np.abs(np.linalg.norm(data.drifted["test"], axis=1) - n0)) <= 1e-10


def test_erasure_removes_atom():
    data = generate(SynthSpec(noise_sigma=0.0, drift={"kind": "erasure", "erased_atoms": (3,)}))
    atom = data.dictionary[:, 3]
    assert np.max(np.abs(data.drifted["train"] @ atom)) <= 1e-6


def test_codes_and_labels():
    spec = SynthSpec(d=8, n_atoms=8, k_true=3, n_train=200, n_test=50, n_classes=4)
    data = generate(spec)
    S = data.codes["train"]
    assert np.all((S > 0).sum(axis=1) == 3)
    assert S[S > 0].min() >= 0.5 and S.max() <= 1.5
    assert np.allclose(np.linalg.norm(data.dictionary, axis=0), 1.0)
    assert np.array_equal(data.labels["train"], np.argmax(S, axis=1) // 2)


def test_determinism_and_labels_shared():
    a = generate(SynthSpec(drift={"kind": "affine", "bias_norm": 1.0}, seed=4))
    b = generate(SynthSpec(drift={"kind": "affine", "bias_norm": 1.0}, seed=4))
    assert a.drifted["train"].tobytes() == b.drifted["train"].tobytes()
    m0, m1 = a.matrix("test"), a.matrix("test", drifted=True)
    assert np.array_equal(m0.labels, m1.labels)


def test_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(n_atoms=8, k_true=9)
    with pytest.raises(ValueError):
        SynthSpec(n_atoms=9, n_classes=4)
    with pytest.raises(ValueError):
        SynthSpec(drift={"kind": "erasure", "erased_atoms": (40,)})
    with pytest.raises(ValueError):
        DriftSpec(kind="shear")


def test_noiseless_identity_closed_form():
    data = generate(SynthSpec(noise_sigma=0.0, n_train=500, n_test=100))
    t = fit_linear_closed_form((data.drifted["train"], data.anchor["train"]), ridge_lambda=1e-10)
    assert np.mean((t.transform(data.drifted["test"]) - data.anchor["test"]) ** 2) <= 1e-8


def test_random_rotation(rng):
    R = random_rotation(6, rng)
    assert np.max(np.abs(R.T @ R - np.eye(6))) <= 1e-10


def test_align_latents():
    D = np.eye(4)[:, :2]
    W = np.array([[1.0, 0.1, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]])
    # latent 0 -> atom 0, latent 1 -> nothing (orthogonal to both), latent 2 -> atom 1
    assert align_latents_to_atoms(W, D) == {0: 0, 2: 1}


def test_expectations():
    assert oracle_expectations(SynthSpec())["deletion_ratio"] == {"max": 0.0}
    e = oracle_expectations(SynthSpec(drift={"kind": "erasure", "erased_atoms": (1,)}))
    assert e["erased_aligned_min_f1"] == {"max": 0.2}


def test_write_and_load(tmp_path):
    data = generate(SynthSpec(d=4, n_atoms=4, k_true=1, n_train=20, n_test=10, drift={"kind": "rotation"}))
    write_synth(tmp_path, data, task_id=2)
    m = load_layout(tmp_path, 2, 1, "test")
    assert np.array_equal(m.data, data.drifted["test"].astype(m.data.dtype))
    arrays, meta = load_ground_truth(tmp_path, 2)
    assert np.array_equal(arrays["dictionary"], data.dictionary.astype(np.float32))
    assert meta["spec"]["drift"]["kind"] == "rotation"
