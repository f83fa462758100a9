import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from concept_forgetting.monosemanticity import (MonosemanticityError, evaluable_neurons, monosemanticity_score,
                                                permutation_baseline)
from concept_forgetting.synth import random_rotation


def pairwise(w, E):
    """Direct double loop over i != j."""
    U = E / np.linalg.norm(E, axis=1, keepdims=True)
    num = den = 0.0
    for i in range(len(w)):
        for j in range(len(w)):
            if i != j:
                num += w[i] * w[j] * U[i] @ U[j]
                den += w[i] * w[j]
    return num / den


def test_identical_embeddings():
    z = np.array([[1.0], [2.0], [0.5]])
    assert monosemanticity_score(z, np.ones((3, 4)), 0) == pytest.approx(1.0, abs=1e-12)


def test_orthogonal_pair():
    z = np.array([[1.0], [1.0], [0.0]])
    E = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    assert monosemanticity_score(z, E, 0) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_matches_pairwise_loop(seed):
    r = np.random.default_rng(seed)
    z = np.maximum(r.standard_normal((12, 1)), 0)
    z[:2, 0] = [0.3, 1.2]
    E = r.standard_normal((12, 5))
    pos = z[:, 0] > 0
    assert monosemanticity_score(z, E, 0) == pytest.approx(pairwise(z[pos, 0], E[pos]), abs=1e-10)


def test_invariances(rng):
    z = np.abs(rng.standard_normal((20, 2)))
    E = rng.standard_normal((20, 6))
    ms = monosemanticity_score(z, E, 1)
    assert -1.0 <= ms <= 1.0
    assert monosemanticity_score(7.5 * z, E, 1) == pytest.approx(ms, abs=1e-12)
    assert monosemanticity_score(z, E @ random_rotation(6, rng).T, 1) == pytest.approx(ms, abs=1e-12)


def test_self_similarity_excluded():
    # one dominant sample: including i == j would pull MS toward 1
    z = np.array([[100.0], [1.0]])
    E = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert monosemanticity_score(z, E, 0) == pytest.approx(0.0, abs=1e-12)


def test_zero_norm_rows_excluded():
    z = np.array([[1.0], [1.0], [1.0]])
    E = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 0.0]])
    assert monosemanticity_score(z, E, 0) == pytest.approx(1.0)


def test_errors():
    with pytest.raises(MonosemanticityError):
        monosemanticity_score(np.array([[1.0], [0.0]]), np.ones((2, 2)), 0)
    with pytest.raises(IndexError):
        monosemanticity_score(np.ones((2, 1)), np.ones((2, 2)), 3)


def test_identity_permutation(rng):
    z = np.abs(rng.standard_normal((15, 3)))
    E = rng.standard_normal((15, 4))
    res = permutation_baseline(z, E, [0, 2], permutation=np.arange(15))
    assert np.array_equal(res.baseline_ms, res.per_concept_ms) and res.permutation_seed is None


def test_identical_corpus_baseline():
    z = np.abs(np.random.default_rng(0).standard_normal((10, 2)))
    res = permutation_baseline(z, np.tile([1.0, 2.0, 3.0], (10, 1)), [0, 1], seed=5)
    assert all(b == pytest.approx(1.0) for b in res.baseline_ms)
    assert res.to_dict()["mean_baseline_ms"] == pytest.approx(1.0)


def test_bad_permutation():
    with pytest.raises(ValueError):
        permutation_baseline(np.ones((3, 1)), np.ones((3, 2)), [0], permutation=np.array([0, 0, 1]))


def test_evaluable_neurons():
    z = np.array([[1.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 2.0]])
    assert evaluable_neurons(z, [0, 1, 2]) == [0]
