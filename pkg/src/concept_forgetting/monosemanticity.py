"""Activation-weighted monosemanticity score and its permuted-embedding baseline.

For a neuron k with positive activations w_i on samples with unit embeddings
e_i, the score is the w_i w_j weighted mean of cos(e_i, e_j) over pairs i != j.
Since sum_{i!=j} w_i w_j e_i.e_j = |sum w_i e_i|^2 - sum w_i^2, it costs O(n d).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MonosemanticityError(ValueError):
    pass


@dataclass
class MsResult:
    neurons: list
    per_concept_ms: np.ndarray
    baseline_ms: np.ndarray
    permutation_seed: int | None

    def to_dict(self) -> dict:
        return {
            "neurons": [int(k) for k in self.neurons],
            "per_concept_ms": [float(v) for v in self.per_concept_ms],
            "baseline_ms": [float(v) for v in self.baseline_ms],
            "permutation_seed": self.permutation_seed,
            "mean_ms": float(np.mean(self.per_concept_ms)) if len(self.neurons) else None,
            "mean_baseline_ms": float(np.mean(self.baseline_ms)) if len(self.neurons) else None,
        }


def _arr(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def _unit_rows(E: np.ndarray):
    norms = np.linalg.norm(E, axis=1)
    ok = norms > 0
    U = np.zeros_like(E)
    U[ok] = E[ok] / norms[ok, None]
    return U, ok


def _ms(w: np.ndarray, U: np.ndarray) -> float:
    # for unit rows, sum_{i!=j} w_i w_j cos_ij = den - W * sum_i w_i |u_i - u_bar|^2 with u_bar the
    # weighted mean; the spread form stays exact for tight clusters where the dot-product form cancels
    W = float(np.sum(w))
    den = W * W - float(np.sum(w * w))
    if not den > 0:
        raise MonosemanticityError("pairwise weights sum to zero")
    spread = float(w @ np.sum((U - (w @ U) / W) ** 2, axis=1))
    return float(np.clip(1.0 - W * spread / den, -1.0, 1.0))


def monosemanticity_score(z, embeddings, neuron: int) -> float:
    Z, E = _arr(z), _arr(embeddings)
    if Z.shape[0] != E.shape[0]:
        raise MonosemanticityError(f"{Z.shape[0]} latent rows vs {E.shape[0]} embedding rows")
    if not 0 <= neuron < Z.shape[1]:
        raise IndexError(f"neuron {neuron} out of range [0, {Z.shape[1]})")
    U, ok = _unit_rows(E)
    sel = (Z[:, neuron] > 0) & ok
    if sel.sum() < 2:
        raise MonosemanticityError(f"neuron {neuron} has fewer than 2 activating samples")
    return _ms(Z[sel, neuron], U[sel])


def permutation_baseline(z, embeddings, neurons, seed: int | None = 0,
                         permutation: np.ndarray | None = None) -> MsResult:
    """Scores for ``neurons`` against original and row-permuted embeddings.

    ``permutation`` overrides the seeded shuffle (used to force the identity).
    """
    E = _arr(embeddings)
    if permutation is None:
        permutation = np.random.default_rng(seed).permutation(E.shape[0])
    else:
        permutation = np.asarray(permutation)
        if sorted(permutation.tolist()) != list(range(E.shape[0])):
            raise ValueError("permutation must be a rearrangement of the embedding rows")
        seed = None
    neurons = [int(k) for k in neurons]
    ms = np.array([monosemanticity_score(z, E, k) for k in neurons])
    base = np.array([monosemanticity_score(z, E[permutation], k) for k in neurons])
    return MsResult(neurons=neurons, per_concept_ms=ms, baseline_ms=base, permutation_seed=seed)


def evaluable_neurons(z, active) -> list[int]:
    """Active neurons with at least two positively activating samples."""
    Z = _arr(z)
    idx = active.indices if hasattr(active, "indices") else active
    return [int(k) for k in idx if np.count_nonzero(Z[:, k] > 0) >= 2]
