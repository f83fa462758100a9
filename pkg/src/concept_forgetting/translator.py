"""Maps from post-task features back into the anchor feature space.

``fit_linear`` trains an affine map by mini-batch AdamW on squared error;
``fit_linear_closed_form`` solves the same problem with a ridge penalty
exactly and serves as its oracle.  ``fit_nonlinear`` is the small
three-layer GELU baseline.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import erf

from .features import FeatureMatrix, FeaturePair, load_bundle, save_bundle
from .optim import Adam


class TranslatorDivergence(FloatingPointError):
    pass


@dataclass
class TranslatorConfig:
    epochs: int = 100
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 128
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("invalid translator optimisation settings")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LinearTranslator:
    W: np.ndarray  # d_out x d_in
    b: np.ndarray
    train_mse: float = float("nan")
    val_mse: float | None = None
    fit_config: dict = field(default_factory=dict)

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return X @ self.W.T.astype(np.float64) + self.b


@dataclass
class NonlinearTranslator:
    layers: list  # [(W, b)] * 3, W is out x in
    train_mse: float = float("nan")
    val_mse: float | None = None
    fit_config: dict = field(default_factory=dict)

    def transform(self, X) -> np.ndarray:
        return _mlp_forward(_layer_params(self.layers), np.asarray(X, dtype=np.float64))[0]


def _xy(paired) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(paired, FeaturePair):
        X, Y = paired.first.data, paired.second.data
    else:
        X, Y = paired
    X = np.asarray(getattr(X, "data", X), dtype=np.float64)
    Y = np.asarray(getattr(Y, "data", Y), dtype=np.float64)
    if X.shape[0] != Y.shape[0]:
        raise ValueError("paired matrices must have the same number of rows")
    if X.shape[0] < 2:
        raise ValueError("need at least 2 paired samples")
    return X, Y


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """(train, val) row positions: the last ``val_fraction`` of a seeded shuffle is validation."""
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(val_fraction * n))
    n_val = min(n_val, n - 1)
    return perm[: n - n_val], perm[n - n_val:]


def mse(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean((pred - target) ** 2))


def _run_adamw(params: dict, loss_grad, X, Y, config: TranslatorConfig, decay_names, rng):
    opt = Adam(lr=config.lr, weight_decay=config.weight_decay, decay_names=decay_names)
    n = X.shape[0]
    B = config.batch_size
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, B):
            idx = order[start:start + B]
            loss, grads = loss_grad(params, X[idx], Y[idx])
            if not math.isfinite(loss):
                raise TranslatorDivergence(f"non-finite translation loss at epoch {epoch}")
            opt.step(params, grads)


def linear_loss_gradient(params: dict, X: np.ndarray, Y: np.ndarray):
    """Mean-squared-error (over all entries) of ``X W^T + b`` against ``Y`` and its gradient."""
    R = X @ params["W"].T + params["b"] - Y
    scale = 2.0 / R.size
    return float(np.mean(R * R)), {"W": scale * (R.T @ X), "b": scale * R.sum(axis=0)}


def fit_linear(paired, config: TranslatorConfig | None = None) -> LinearTranslator:
    config = config or TranslatorConfig()
    X, Y = _xy(paired)
    tr, va = split_indices(X.shape[0], config.val_fraction, config.seed)
    d_in, d_out = X.shape[1], Y.shape[1]
    # identity start: "no drift" is the natural prior when dimensions agree
    W0 = np.eye(d_out, d_in) if d_in == d_out else np.zeros((d_out, d_in))
    params = {"W": W0, "b": np.zeros(d_out)}
    rng = np.random.default_rng(config.seed + 1)
    _run_adamw(params, linear_loss_gradient, X[tr], Y[tr], config, ("W",), rng)
    t = LinearTranslator(W=params["W"].astype(np.float32), b=params["b"].astype(np.float32),
                         fit_config={"method": "adamw", **config.to_dict()})
    if not (np.isfinite(t.W).all() and np.isfinite(t.b).all()):
        raise TranslatorDivergence("translator parameters became non-finite")
    t.train_mse = mse(t.transform(X[tr]), Y[tr])
    t.val_mse = mse(t.transform(X[va]), Y[va]) if va.size else None
    return t


def fit_linear_closed_form(paired, ridge_lambda: float = 1e-4, val_fraction: float = 0.0,
                           seed: int = 0) -> LinearTranslator:
    """Exact ridge solution; the bias column is not penalised."""
    if ridge_lambda < 0:
        raise ValueError("ridge_lambda must be non-negative")
    X, Y = _xy(paired)
    tr, va = split_indices(X.shape[0], val_fraction, seed)
    Xa = np.hstack([X[tr], np.ones((tr.size, 1))])
    G = Xa.T @ Xa
    reg = np.full(G.shape[0], ridge_lambda)
    reg[-1] = 0.0
    G[np.diag_indices_from(G)] += reg
    rhs = Xa.T @ Y[tr]
    try:
        if ridge_lambda == 0 and np.linalg.matrix_rank(G) < G.shape[0]:
            raise np.linalg.LinAlgError("singular normal equations")
        sol = np.linalg.solve(G, rhs)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"closed-form fit failed: {exc}; use ridge_lambda > 0") from None
    t = LinearTranslator(W=sol[:-1].T.astype(np.float32), b=sol[-1].astype(np.float32),
                         fit_config={"method": "closed_form", "ridge_lambda": ridge_lambda,
                                     "val_fraction": val_fraction, "seed": seed})
    t.train_mse = mse(t.transform(X[tr]), Y[tr])
    t.val_mse = mse(t.transform(X[va]), Y[va]) if va.size else None
    return t


def apply(translator, features):
    """Row-wise translation; keeps sample order, labels and manifest of ``features``."""
    X = np.asarray(getattr(features, "data", features), dtype=np.float64)
    d_in = translator.W.shape[1] if isinstance(translator, LinearTranslator) else translator.layers[0][0].shape[1]
    if X.shape[1] != d_in:
        raise ValueError(f"feature dim {X.shape[1]} != translator input dim {d_in}")
    out = translator.transform(X)
    if isinstance(features, FeatureMatrix):
        return features.with_data(out)
    return out


# --- three-layer GELU translator -------------------------------------------

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _layer_params(layers) -> dict:
    out = {}
    for i, (W, b) in enumerate(layers):
        out[f"W{i}"] = np.asarray(W, dtype=np.float64)
        out[f"b{i}"] = np.asarray(b, dtype=np.float64)
    return out


def _mlp_forward(params: dict, X: np.ndarray):
    a0 = X @ params["W0"].T + params["b0"]
    h0 = gelu(a0)
    a1 = h0 @ params["W1"].T + params["b1"]
    h1 = gelu(a1)
    out = h1 @ params["W2"].T + params["b2"]
    return out, (a0, h0, a1, h1)


def nonlinear_loss_gradient(params: dict, X: np.ndarray, Y: np.ndarray):
    out, (a0, h0, a1, h1) = _mlp_forward(params, X)
    R = out - Y
    g_out = (2.0 / R.size) * R
    grads = {"W2": g_out.T @ h1, "b2": g_out.sum(axis=0)}
    g_a1 = (g_out @ params["W2"]) * gelu_grad(a1)
    grads["W1"] = g_a1.T @ h0
    grads["b1"] = g_a1.sum(axis=0)
    g_a0 = (g_a1 @ params["W1"]) * gelu_grad(a0)
    grads["W0"] = g_a0.T @ X
    grads["b0"] = g_a0.sum(axis=0)
    return float(np.mean(R * R)), grads


def init_nonlinear(d_in: int, d_out: int, rng: np.random.Generator) -> list:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every layer; hidden width = input width."""
    dims = [(d_in, d_in), (d_in, d_in), (d_out, d_in)]
    layers = []
    for out_dim, in_dim in dims:
        bound = 1.0 / math.sqrt(in_dim)
        layers.append((rng.uniform(-bound, bound, (out_dim, in_dim)), rng.uniform(-bound, bound, out_dim)))
    return layers


def fit_nonlinear(paired, config: TranslatorConfig | None = None) -> NonlinearTranslator:
    config = config or TranslatorConfig()
    X, Y = _xy(paired)
    tr, va = split_indices(X.shape[0], config.val_fraction, config.seed)
    rng = np.random.default_rng(config.seed + 1)
    params = _layer_params(init_nonlinear(X.shape[1], Y.shape[1], rng))
    _run_adamw(params, nonlinear_loss_gradient, X[tr], Y[tr], config, ("W0", "W1", "W2"), rng)
    layers = [(params[f"W{i}"].astype(np.float32), params[f"b{i}"].astype(np.float32)) for i in range(3)]
    t = NonlinearTranslator(layers=layers, fit_config={"method": "adamw_mlp", **config.to_dict()})
    if not all(np.isfinite(W).all() and np.isfinite(b).all() for W, b in layers):
        raise TranslatorDivergence("nonlinear translator parameters became non-finite")
    t.train_mse = mse(t.transform(X[tr]), Y[tr])
    t.val_mse = mse(t.transform(X[va]), Y[va]) if va.size else None
    return t


def save_translator(translator, directory):
    meta = {"train_mse": translator.train_mse, "val_mse": translator.val_mse,
            "fit_config": translator.fit_config}
    if isinstance(translator, LinearTranslator):
        return save_bundle(directory, "linear_translator", {"W": translator.W, "b": translator.b}, meta)
    arrays = {}
    for i, (W, b) in enumerate(translator.layers):
        arrays[f"W{i}"], arrays[f"b{i}"] = W, b
    return save_bundle(directory, "nonlinear_translator", arrays, meta)


def load_translator(directory):
    arrays, meta = load_bundle(directory)
    if "W" in arrays:
        return LinearTranslator(W=arrays["W"], b=arrays["b"], **meta)
    layers = [(arrays[f"W{i}"], arrays[f"b{i}"]) for i in range(3)]
    return NonlinearTranslator(layers=layers, **meta)
