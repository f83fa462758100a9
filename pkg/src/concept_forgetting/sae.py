"""Task-anchored BatchTopK sparse autoencoders in plain numpy.

Training keeps the ``n_rows * k`` largest post-ReLU pre-activations of each
mini-batch (batch-global selection); inference keeps the ``k`` largest per
row so that encodings do not depend on how rows are batched.  Ties go to the
lower (flattened) index.

The training objective is reconstruction MSE plus a weighted auxiliary term
that makes dead latents explain what the live ones miss::

    loss = mean((h_hat - h)^2) + w_dead * sum((h - h_hat - h_aux)^2) / sum((h - mean(h))^2)

where ``h_aux`` decodes (without bias) the ``aux_k`` largest raw
pre-activations among latents that have not won a per-row top-K slot for
``dead_window_steps`` optimizer steps.  The auxiliary term is zero when
nothing is dead.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .features import FeatureMatrix, load_bundle, save_bundle
from .optim import Adam

VARIANTS = ("anchor", "raw_after", "translated")
PARAM_NAMES = ("W_enc", "b_enc", "W_dec", "b_dec")


class SaeTrainingError(FloatingPointError):
    """Raised when the loss becomes non-finite during training."""


@dataclass
class SaeConfig:
    input_dim: int
    expansion: float = 2.0
    k: int = 10
    epochs: int = 10
    lr: float = 5e-3
    batch_size: int = 16
    dead_loss_weight: float = 1e-2
    dead_window_steps: int = 50
    aux_k: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.input_dim <= 0:
            raise ValueError("input_dim must be positive")
        if self.expansion <= 0:
            raise ValueError("expansion must be positive")
        if self.aux_k is None:
            self.aux_k = self.k
        if not 1 <= self.k <= self.latent_dim:
            raise ValueError(f"k={self.k} must lie in [1, latent_dim={self.latent_dim}]")
        if not 1 <= self.aux_k <= self.latent_dim:
            raise ValueError(f"aux_k={self.aux_k} must lie in [1, latent_dim={self.latent_dim}]")
        if self.epochs < 1 or self.batch_size < 1 or self.dead_window_steps < 1:
            raise ValueError("epochs, batch_size and dead_window_steps must be >= 1")
        if self.lr <= 0 or self.dead_loss_weight < 0:
            raise ValueError("lr must be positive and dead_loss_weight non-negative")

    @property
    def latent_dim(self) -> int:
        return int(math.floor(self.expansion * self.input_dim + 0.5))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SaeModel:
    W_enc: np.ndarray  # latent x d
    b_enc: np.ndarray
    W_dec: np.ndarray  # d x latent
    b_dec: np.ndarray
    config: SaeConfig
    diagnostics: dict = field(default_factory=dict)

    @property
    def latent_dim(self) -> int:
        return self.W_enc.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_enc.shape[1]

    def params(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}


@dataclass(frozen=True, eq=False)
class LatentMatrix:
    data: np.ndarray  # n x latent, non-negative
    source_task: int = 0
    eval_checkpoint: int = 0
    variant: str = "anchor"
    split: str = "test"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")

    @property
    def n_samples(self) -> int:
        return self.data.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.data.shape[1]


def _as_array(x) -> np.ndarray:
    return np.asarray(x.data if hasattr(x, "data") else x, dtype=np.float64)


def topk_mask_rows(values: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the ``k`` largest entries of each row (lower index wins ties)."""
    n, m = values.shape
    mask = np.zeros((n, m), dtype=bool)
    if k >= m:
        mask[:] = True
        return mask
    order = np.argsort(-values, axis=1, kind="stable")[:, :k]
    np.put_along_axis(mask, order, True, axis=1)
    return mask


def topk_mask_global(values: np.ndarray, count: int) -> np.ndarray:
    """Boolean mask of the ``count`` largest entries of the whole array (row-major ties)."""
    flat = values.ravel()
    mask = np.zeros(flat.size, dtype=bool)
    if count >= flat.size:
        mask[:] = True
    else:
        mask[np.argsort(-flat, kind="stable")[:count]] = True
    return mask.reshape(values.shape)


def _preacts(params: dict, H: np.ndarray) -> np.ndarray:
    return H @ params["W_enc"].T.astype(np.float64) + params["b_enc"]


def encode(model: SaeModel, features, mode: str = "inference", *, source_task=None,
           eval_checkpoint=None, variant: str = "anchor") -> LatentMatrix:
    H = _as_array(features)
    if H.ndim != 2 or H.shape[1] != model.input_dim:
        raise ValueError(f"feature dim {H.shape[-1]} does not match SAE input dim {model.input_dim}")
    p = np.maximum(_preacts(model.params(), H), 0.0)
    k = model.config.k
    if mode == "inference":
        mask = topk_mask_rows(p, k)
    elif mode == "train_batch":
        mask = topk_mask_global(p, H.shape[0] * k)
    else:
        raise ValueError(f"unknown encode mode {mode!r}")
    z = np.where(mask, p, 0.0)
    manifest = getattr(features, "manifest", None)
    if source_task is None:
        source_task = manifest.task_id if manifest else 0
    if eval_checkpoint is None:
        eval_checkpoint = manifest.checkpoint_id if manifest else 0
    split = manifest.split if manifest else "test"
    return LatentMatrix(z, source_task=source_task, eval_checkpoint=eval_checkpoint, variant=variant, split=split)


def decode(model: SaeModel, latents) -> np.ndarray:
    Z = _as_array(latents)
    if Z.ndim != 2 or Z.shape[1] != model.latent_dim:
        raise ValueError(f"latent dim {Z.shape[-1]} does not match SAE latent dim {model.latent_dim}")
    return Z @ model.W_dec.T.astype(np.float64) + model.b_dec


def r2_score(H, H_hat) -> float:
    H = np.asarray(H, dtype=np.float64)
    H_hat = np.asarray(H_hat, dtype=np.float64)
    denom = np.sum((H - H.mean(axis=0)) ** 2)
    if denom == 0:
        raise ValueError("features have zero variance; R^2 undefined")
    return float(1.0 - np.sum((H - H_hat) ** 2) / denom)


def r2(model: SaeModel, features) -> float:
    H = _as_array(features)
    return r2_score(H, decode(model, encode(model, H)))


def dead_rate(model: SaeModel, features) -> float:
    """Fraction of latents that never fire (inference mode) on ``features``."""
    z = encode(model, features).data
    return float(np.mean(~(z > 0).any(axis=0)))


def loss_and_gradient(params: dict, H: np.ndarray, k: int, *, dead_mask=None, aux_k=None,
                      dead_loss_weight=0.0, need_grad=True):
    """Full SAE loss on a batch and its analytic gradient.

    Selection masks (top-K, ReLU support, dead-latent top-``aux_k``) are held
    fixed inside the step.  Returns ``(loss, grads, info)``; ``grads`` is None
    when ``need_grad`` is False.
    """
    H = np.asarray(H, dtype=np.float64)
    W_dec, b_dec = params["W_dec"], params["b_dec"]
    n, d = H.shape
    n_el = n * d
    pre = _preacts(params, H)
    relu = pre > 0
    p = np.where(relu, pre, 0.0)
    keep = topk_mask_global(p, n * k) & relu
    Z = np.where(keep, pre, 0.0)
    H_hat = Z @ W_dec.T + b_dec
    E = H_hat - H
    loss = float(np.sum(E * E) / n_el)

    aux_active = dead_mask is not None and dead_loss_weight > 0 and bool(np.any(dead_mask))
    if aux_active:
        # raw (possibly negative) pre-activations so latents stuck below zero still get a gradient
        p_dead = np.where(dead_mask[None, :], pre, -np.inf)
        keep_aux = topk_mask_rows(p_dead, min(aux_k or k, int(dead_mask.sum()))) & dead_mask[None, :]
        Z_aux = np.where(keep_aux, pre, 0.0)
        F = -E - Z_aux @ W_dec.T
        # normalised by the batch's total variance: a fraction of unexplained variance
        scale = max(float(np.sum((H - H.mean(axis=0)) ** 2)), 1e-12)
        loss += dead_loss_weight * float(np.sum(F * F) / scale)

    # firing is tracked with the per-row rule used at inference
    info = {"fired": (topk_mask_rows(p, k) & relu).any(axis=0), "H_hat": H_hat}
    if not need_grad:
        return loss, None, info

    G_hat = (2.0 / n_el) * E
    if aux_active:
        G_aux = (-2.0 * dead_loss_weight / scale) * F
        G_hat = G_hat + G_aux
    grads = {
        "W_dec": G_hat.T @ Z,
        "b_dec": G_hat.sum(axis=0),
    }
    d_pre = np.where(keep, G_hat @ W_dec, 0.0)
    if aux_active:
        grads["W_dec"] += G_aux.T @ Z_aux
        d_pre += np.where(keep_aux, G_aux @ W_dec, 0.0)
    grads["W_enc"] = d_pre.T @ H
    grads["b_enc"] = d_pre.sum(axis=0)
    return loss, grads, info


def sae_loss_gradient(model: SaeModel, batch, dead_mask=None):
    """Loss and analytic parameter gradients of ``model`` on ``batch``."""
    H = _as_array(batch)
    if H.shape[0] == 0:
        raise ValueError("empty batch")
    if H.shape[1] != model.input_dim:
        raise ValueError("batch dim does not match SAE input dim")
    params = {name: np.asarray(v, dtype=np.float64) for name, v in model.params().items()}
    cfg = model.config
    loss, grads, _ = loss_and_gradient(params, H, cfg.k, dead_mask=dead_mask, aux_k=cfg.aux_k,
                                       dead_loss_weight=cfg.dead_loss_weight)
    return loss, grads


def init_params(H: np.ndarray, config: SaeConfig, rng: np.random.Generator) -> dict:
    d, L = config.input_dim, config.latent_dim
    W_enc = rng.standard_normal((L, d))
    W_enc /= np.linalg.norm(W_enc, axis=1, keepdims=True)
    W_enc /= math.sqrt(d)
    mean = H.mean(axis=0)
    return {
        "W_enc": W_enc,
        "b_enc": -W_enc @ mean,  # centres pre-activations on the data mean
        "W_dec": W_enc.T.copy(),
        "b_dec": mean,
    }


def train_sae(features, config: SaeConfig) -> SaeModel:
    H = _as_array(features)
    manifest = getattr(features, "manifest", None)
    if manifest is not None and manifest.split != "train":
        raise ValueError("SAEs are trained on the train split only")
    n, d = H.shape
    if d != config.input_dim:
        raise ValueError(f"feature dim {d} does not match config.input_dim {config.input_dim}")
    if n < config.batch_size:
        raise ValueError(f"need at least batch_size={config.batch_size} samples, got {n}")

    rng = np.random.default_rng(config.seed)
    params = init_params(H, config, rng)
    opt = Adam(lr=config.lr)
    since_fired = np.zeros(config.latent_dim, dtype=np.int64)
    B = config.batch_size
    epoch_loss = float("nan")
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n - B + 1, B):
            batch = H[order[start:start + B]]
            dead = since_fired >= config.dead_window_steps
            loss, grads, info = loss_and_gradient(params, batch, config.k, dead_mask=dead,
                                                  aux_k=config.aux_k,
                                                  dead_loss_weight=config.dead_loss_weight)
            if not math.isfinite(loss):
                raise SaeTrainingError(f"non-finite SAE loss at epoch {epoch}, step offset {start}")
            opt.step(params, grads)
            fired = info["fired"]
            since_fired[fired] = 0
            since_fired[~fired] += 1
            total += loss
            count += 1
        epoch_loss = total / count

    model = SaeModel(
        W_enc=params["W_enc"].astype(np.float32),
        b_enc=params["b_enc"].astype(np.float32),
        W_dec=params["W_dec"].astype(np.float32),
        b_dec=params["b_dec"].astype(np.float32),
        config=config,
    )
    if not all(np.isfinite(v).all() for v in model.params().values()):
        raise SaeTrainingError("SAE parameters became non-finite")
    model.diagnostics = {
        "r2": r2(model, H),
        "dead_rate": dead_rate(model, H),
        "final_loss": float(epoch_loss),
    }
    return model


def save_sae(model: SaeModel, directory) -> Path:
    meta = {"config": model.config.to_dict(), "diagnostics": model.diagnostics}
    return save_bundle(directory, "sae", model.params(), meta)


def load_sae(directory) -> SaeModel:
    arrays, meta = load_bundle(directory, kind="sae")
    return SaeModel(**{name: arrays[name] for name in PARAM_NAMES},
                    config=SaeConfig(**meta["config"]), diagnostics=dict(meta["diagnostics"]))
