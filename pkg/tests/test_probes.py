import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from concept_forgetting.probes import (CONCEPT_BINARY, ProbeConfig, ProbeError, classification_metrics,
                                       concept_decodability, concept_labels, evaluate, fit_probe, objective,
                                       predict, sample_weights, task_probe_panel)
from concept_forgetting.synth import SynthSpec, generate


def test_confusion_example():
    # TP=2, FP=1, FN=1, TN=6
    y = np.array([1, 1, 1, 0, 0, 0, 0, 0, 0, 0])
    p = np.array([1, 1, 0, 1, 0, 0, 0, 0, 0, 0])
    m = classification_metrics(y, p)
    assert m["f1"] == pytest.approx(2 / 3, abs=1e-15)
    assert m["balanced_accuracy"] == pytest.approx((2 / 3 + 6 / 7) / 2, abs=1e-15)
    assert m["accuracy"] == 0.8


def test_all_negative_and_perfect():
    y = np.array([0, 1] * 5)
    m = classification_metrics(y, np.zeros(10, dtype=int))
    assert m["balanced_accuracy"] == 0.5 and m["f1"] == 0.0
    assert classification_metrics(y, y) == {"accuracy": 1.0, "balanced_accuracy": 1.0, "f1": 1.0}


def test_f1_zero_when_nothing_positive():
    z = np.zeros(6, dtype=int)
    assert classification_metrics(z, z)["f1"] == 0.0


@pytest.mark.parametrize("C", [2, 3, 5])
def test_constant_predictor_balanced_accuracy(C):
    y = np.repeat(np.arange(C), [3 + i for i in range(C)])
    assert classification_metrics(y, np.zeros_like(y))["balanced_accuracy"] == pytest.approx(1 / C, abs=1e-15)


def test_balanced_accuracy_relabel_invariant(rng):
    y, p = rng.integers(0, 3, 50), rng.integers(0, 3, 50)
    perm = np.array([2, 0, 1])
    assert classification_metrics(y, p)["balanced_accuracy"] == pytest.approx(
        classification_metrics(perm[y], perm[p])["balanced_accuracy"], abs=1e-15)


def test_concept_labels():
    assert concept_labels(np.array([[0.0], [0.1], [0.0]]), 0).tolist() == [0, 1, 0]
    assert concept_labels(np.zeros((3, 1)), 0).tolist() == [0, 0, 0]
    with pytest.raises(IndexError):
        concept_labels(np.zeros((3, 1)), 1)


def test_concept_label_fraction_matches_incidence():
    data = generate(SynthSpec(d=8, n_atoms=8, k_true=3, n_train=500, n_test=10))
    S = data.codes["train"]
    for j in range(8):
        assert concept_labels(S, j).mean() == np.mean(S[:, j] > 0)


def _blobs(rng, n=400, d=8):
    y = np.repeat([0, 1], n // 2)
    X = rng.standard_normal((n, d)) + np.where(y[:, None] == 1, 3.0, -3.0)
    return X, y


def test_separable_blobs(rng):
    X, y = _blobs(rng)
    m = fit_probe(X, y)
    assert np.mean(predict(m, X) == y) >= 0.99
    d = m.train_diagnostics
    assert d["loss"] <= d["initial_loss"]
    if m.converged:
        assert d["grad_norm"] <= ProbeConfig().tol


def test_multiclass_converges(rng):
    X = rng.standard_normal((300, 5))
    y = np.argmax(X[:, :3], axis=1)
    m = fit_probe(X, y)
    assert m.converged and m.train_diagnostics["grad_norm"] <= 1e-6
    assert evaluate(m, X, y)["f1"] is None


@pytest.mark.parametrize("C", [2, 3])
def test_objective_gradient(rng, C):
    X = rng.standard_normal((12, 4))
    y = np.arange(12) % C
    w = sample_weights(y, C, "balanced")
    n_out = 1 if C == 2 else C
    p = rng.standard_normal(n_out * 4 + n_out)
    _, g = objective(p, X, y, C, w, 0.7)
    eps = 1e-6
    num = np.array([(objective(p + eps * e, X, y, C, w, 0.7)[0] - objective(p - eps * e, X, y, C, w, 0.7)[0])
                    / (2 * eps) for e in np.eye(p.size)])
    assert np.max(np.abs(num - g) / np.maximum(np.abs(num), 1e-6)) <= 1e-4


def test_balanced_weights_equal_duplication(rng):
    # minority class 1 has 2 rows, majority 6; duplicate minority x3 for parity
    X = rng.standard_normal((8, 3))
    y = np.array([0, 0, 0, 0, 0, 0, 1, 1])
    Xd = np.vstack([X, X[6:], X[6:]])
    yd = np.concatenate([y, [1, 1, 1, 1]])
    p = rng.standard_normal(4)
    weighted = objective(p, X, y, 2, sample_weights(y, 2, "balanced"), 0.0)[0]
    dup = objective(p, Xd, yd, 2, np.ones(12), 0.0)[0]
    assert weighted == pytest.approx(dup, abs=1e-8)


def test_probe_argmax_invariance(rng):
    X, y = _blobs(rng, n=100, d=3)
    m = fit_probe(X, y)
    m2 = fit_probe(X, y)
    m2.weights = m2.weights * 5.0
    m2.bias = m2.bias * 5.0
    assert np.array_equal(predict(m, X), predict(m2, X))


def test_errors(rng):
    with pytest.raises(ProbeError):
        fit_probe(rng.standard_normal((5, 2)), np.zeros(5))
    X = rng.standard_normal((5, 2))
    X[0, 0] = np.nan
    with pytest.raises(ProbeError):
        fit_probe(X, np.array([0, 1, 0, 1, 0]))
    m = fit_probe(rng.standard_normal((6, 2)), np.array([0, 1] * 3))
    with pytest.raises(ProbeError):
        predict(m, np.zeros((2, 3)))
    with pytest.raises(ValueError):
        ProbeConfig(tol=0)


def test_default_caps():
    assert ProbeConfig().max_iters == 1500
    c = ProbeConfig(kind=CONCEPT_BINARY)
    assert c.max_iters == 1000 and c.class_weighting == "balanced"


def test_no_signal_concept():
    X = np.ones((40, 3))
    z = np.zeros((40, 1))
    z[::2, 0] = 1.0
    out = concept_decodability([0], z, X, X, z)
    assert out["scores"][0]["balanced_accuracy"] == pytest.approx(0.5, abs=1e-12)


def test_single_class_concept_is_skipped():
    X = np.random.default_rng(0).standard_normal((20, 3))
    out = concept_decodability([0], np.ones((20, 1)), X, X, np.zeros((20, 1)))
    assert 0 in out["skipped"] and out["scores"][0]["f1"] == 0.0


def test_identity_panel_equal():
    data = generate(SynthSpec(d=16, n_atoms=16, k_true=3, n_train=600, n_test=300))
    te = data.matrix("test")
    panel = task_probe_panel(data.matrix("train"), te, data.matrix("test", drifted=True), te)
    assert panel["at_t"] == panel["raw_after"] == panel["translated"]


def test_readable_concept_under_rotation():
    data = generate(SynthSpec(d=16, n_atoms=16, k_true=3, n_train=2000, n_test=1000, drift={"kind": "rotation"}))
    out = concept_decodability([0], data.codes["test"], data.drifted["test"], data.drifted["train"],
                               data.codes["train"])
    assert out["scores"][0]["f1"] >= 0.9


def test_projected_out_concept():
    """A rare concept carried by its own direction, which the drift removes entirely.

    With balanced weighting a signal-free probe flags about half the rows, so
    chance F1 is near 2p / (1 + 2p) for incidence p; p = 0.05 puts that near 0.09.
    """
    rng = np.random.default_rng(3)
    n, d = 3000, 8
    present = rng.random(n) < 0.05
    H = rng.standard_normal((n, d))
    H[:, 0] = np.where(present, 3.0, 0.0) + 0.01 * rng.standard_normal(n)
    drifted = H.copy()
    drifted[:, 0] = 0.0
    z = present[:, None].astype(float)
    half = n // 2
    out = concept_decodability([0], z[half:], drifted[half:], drifted[:half], z[:half])
    assert out["scores"][0]["f1"] < 0.2
