"""Turning SAE latents into concept proxies: binarisation, active sets, ablation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import FeatureMatrix
from .sae import LatentMatrix, SaeModel, decode, encode

DEFAULT_TAU = 0.05
DEFAULT_TOP_M = 9


@dataclass(frozen=True, eq=False)
class AnchorStats:
    """Per-latent mean activation over the task's anchor train latents.

    Computed once per task and reused for every checkpoint and variant.
    """

    mu: np.ndarray
    task_id: int = 0
    source: str = "train"


@dataclass(frozen=True)
class ActiveConceptSet:
    indices: tuple[int, ...]
    tau: float
    variant: str
    frequencies: np.ndarray

    def __contains__(self, k) -> bool:
        return k in self._set

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def _set(self) -> frozenset:
        return frozenset(self.indices)

    def as_set(self) -> set[int]:
        return set(self.indices)


def _latents(z) -> np.ndarray:
    return np.asarray(z.data if hasattr(z, "data") else z, dtype=np.float64)


def compute_anchor_stats(z_train: LatentMatrix) -> AnchorStats:
    Z = _latents(z_train)
    if Z.ndim != 2 or Z.shape[0] == 0:
        raise ValueError("anchor statistics need a non-empty latent matrix")
    if isinstance(z_train, LatentMatrix) and z_train.variant != "anchor":
        raise ValueError("anchor statistics must come from anchor-variant latents")
    mu = Z.mean(axis=0)
    mu.setflags(write=False)
    return AnchorStats(mu=mu, task_id=getattr(z_train, "source_task", 0),
                       source=getattr(z_train, "split", "train"))


def binarize(z, stats: AnchorStats) -> np.ndarray:
    """a_k(x) = 1[z_k(x) > mu_k]; strict inequality."""
    Z = _latents(z)
    if Z.shape[1] != stats.mu.shape[0]:
        raise ValueError(f"latent dim {Z.shape[1]} != anchor stats dim {stats.mu.shape[0]}")
    return Z > stats.mu


def active_concepts(binary, tau: float = DEFAULT_TAU, variant: str = "anchor") -> ActiveConceptSet:
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    A = np.asarray(binary)
    freq = A.mean(axis=0, dtype=np.float64) if A.shape[0] else np.zeros(A.shape[1])
    idx = tuple(int(i) for i in np.flatnonzero(freq >= tau))
    return ActiveConceptSet(indices=idx, tau=float(tau), variant=variant, frequencies=freq)


def ablate_inactive(h: FeatureMatrix, model: SaeModel, active: ActiveConceptSet) -> FeatureMatrix:
    """Zero non-active latents and move ``h`` by the resulting change in the decoding.

    Only the difference is applied, so the SAE's own reconstruction error is
    never pushed into the features.
    """
    H = np.asarray(h.data if hasattr(h, "data") else h, dtype=np.float64)
    if H.shape[1] != model.input_dim:
        raise ValueError("feature dim does not match SAE")
    z = encode(model, H).data
    keep = np.zeros(model.latent_dim, dtype=bool)
    keep[list(active.indices)] = True
    z_masked = np.where(keep[None, :], z, 0.0)
    # decode(z_masked) - decode(z) == (z_masked - z) @ W_dec^T; the bias cancels
    delta = (z_masked - z) @ model.W_dec.T.astype(np.float64)
    out = H + delta
    if isinstance(h, FeatureMatrix):
        return h.with_data(out)
    return out


def top_activating(z, neuron: int, m: int = DEFAULT_TOP_M) -> list[int]:
    """Sample indices of the ``m`` largest activations of ``neuron``; ties go to lower index."""
    Z = _latents(z)
    if not 0 <= neuron < Z.shape[1]:
        raise IndexError(f"neuron {neuron} out of range [0, {Z.shape[1]})")
    if not 0 <= m <= Z.shape[0]:
        raise ValueError(f"m={m} must lie in [0, n_samples={Z.shape[0]}]")
    order = np.argsort(-Z[:, neuron], kind="stable")
    return [int(i) for i in order[:m]]


def latent_variants(model: SaeModel, anchor, raw_after, translated, task_id: int = 0,
                    checkpoint: int = 0) -> dict[str, LatentMatrix]:
    """Encode the three test-time views of a task with the same anchored SAE."""
    return {
        "anchor": encode(model, anchor, source_task=task_id, eval_checkpoint=0, variant="anchor"),
        "raw_after": encode(model, raw_after, source_task=task_id, eval_checkpoint=checkpoint,
                            variant="raw_after"),
        "translated": encode(model, translated, source_task=task_id, eval_checkpoint=checkpoint,
                             variant="translated"),
    }
