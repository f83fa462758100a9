import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from concept_forgetting.concepts import (ActiveConceptSet, AnchorStats, ablate_inactive, active_concepts,
                                         binarize, compute_anchor_stats, latent_variants, top_activating)
from concept_forgetting.sae import LatentMatrix, SaeModel, SaeConfig, decode, encode, train_sae
from concept_forgetting.synth import SynthSpec, generate


def stats(mu):
    return AnchorStats(mu=np.asarray(mu, dtype=float))


def test_anchor_mean_examples():
    z = LatentMatrix(np.array([[0, 0], [0, 0], [2, 0], [2, 0]], dtype=float), split="train")
    assert compute_anchor_stats(z).mu.tolist() == [1.0, 0.0]


def test_anchor_mean_matches_two_pass(rng):
    Z = rng.random((100, 8)) * 10
    mu = compute_anchor_stats(LatentMatrix(Z, split="train")).mu
    # two-pass: mean of deviations from a first-pass estimate
    first = [math.fsum(col) / len(col) for col in Z.T]
    second = [f + math.fsum(c - f for c in col) / len(col) for f, col in zip(first, Z.T)]
    assert np.max(np.abs(mu - np.array(second))) <= 1e-12


def test_anchor_stats_need_anchor_variant():
    with pytest.raises(ValueError):
        compute_anchor_stats(LatentMatrix(np.ones((2, 2)), variant="raw_after"))


def test_binarize_strict():
    assert binarize(np.array([[0.5]]), stats([0.2])).tolist() == [[True]]
    assert binarize(np.array([[0.2]]), stats([0.2])).tolist() == [[False]]
    assert not binarize(np.zeros((3, 1)), stats([0.0])).any()


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), c=st.floats(1e-3, 1e3))
def test_binarize_scale_invariant(seed, c):
    r = np.random.default_rng(seed)
    Z = np.maximum(r.standard_normal((20, 5)), 0)
    mu = Z.mean(axis=0)
    assert np.array_equal(binarize(Z, stats(mu)), binarize(c * Z, stats(c * mu)))


def test_active_concepts_inclusive():
    # frequencies 0.04, 0.05, 0.30 over 100 rows
    A = np.zeros((100, 3), dtype=bool)
    A[:4, 0] = True
    A[:5, 1] = True
    A[:30, 2] = True
    act = active_concepts(A, 0.05)
    assert act.indices == (1, 2) and 1 in act and 0 not in act
    assert len(active_concepts(A, 0.0)) == 3


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), t1=st.floats(0, 1), t2=st.floats(0, 1))
def test_active_sets_nested_in_tau(seed, t1, t2):
    A = np.random.default_rng(seed).random((30, 10)) < 0.2
    lo, hi = sorted((t1, t2))
    assert active_concepts(A, hi).as_set() <= active_concepts(A, lo).as_set()


def test_default_tau():
    from concept_forgetting.concepts import DEFAULT_TAU, DEFAULT_TOP_M
    assert DEFAULT_TAU == 0.05 and DEFAULT_TOP_M == 9


def _model(rng, d=4, L=8, k=3):
    return SaeModel(rng.standard_normal((L, d)), rng.standard_normal(L), rng.standard_normal((d, L)),
                    rng.standard_normal(d), SaeConfig(input_dim=d, expansion=L / d, k=k))


def _all(L):
    return ActiveConceptSet(tuple(range(L)), 0.0, "anchor", np.ones(L))


def test_ablation_with_full_set_is_identity(rng):
    m = _model(rng)
    H = rng.standard_normal((10, 4))
    assert np.max(np.abs(ablate_inactive(H, m, _all(8)) - H)) <= 1e-6


def test_ablation_with_empty_set(rng):
    m = _model(rng)
    H = rng.standard_normal((10, 4))
    z = encode(m, H).data
    empty = ActiveConceptSet((), 0.05, "anchor", np.zeros(8))
    expected = H - (decode(m, z) - decode(m, np.zeros_like(z)))
    assert np.allclose(ablate_inactive(H, m, empty), expected, atol=1e-12)


def test_ablation_dim_mismatch(rng):
    with pytest.raises(ValueError):
        ablate_inactive(np.zeros((2, 5)), _model(rng), _all(8))


def test_top_activating():
    z = np.array([[0.0], [5.0], [3.0]])
    assert top_activating(z, 0, m=2) == [1, 2]
    assert top_activating(np.ones((4, 1)), 0, m=3) == [0, 1, 2]
    with pytest.raises(IndexError):
        top_activating(z, 1, m=1)
    with pytest.raises(ValueError):
        top_activating(z, 0, m=4)


def test_variants_share_anchor_stats():
    data = generate(SynthSpec(d=8, n_atoms=8, k_true=2, n_train=300, n_test=100, drift={"kind": "rotation"}))
    m = train_sae(data.matrix("train"), SaeConfig(input_dim=8, k=3, epochs=2))
    v = latent_variants(m, data.matrix("test"), data.matrix("test", drifted=True),
                        data.matrix("test", drifted=True), checkpoint=1)
    assert [x.variant for x in v.values()] == ["anchor", "raw_after", "translated"]
    st_ = compute_anchor_stats(encode(m, data.matrix("train")))
    sets = {name: active_concepts(binarize(z, st_), 0.05, name) for name, z in v.items()}
    assert all(s.tau == 0.05 for s in sets.values())
