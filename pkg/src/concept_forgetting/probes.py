"""L2-regularised logistic probes for task labels and per-concept decodability.

The objective is the (optionally class-balanced) mean cross-entropy plus
``l2_strength / (2 N) * ||W||^2`` -- the usual ``C * sum(loss) + ||w||^2 / 2``
form with ``C = 1 / l2_strength``, divided by ``N``.  The bias is not
penalised.  L-BFGS (scipy) minimises it; ``converged`` means the gradient
norm at the returned parameters is at most ``tol``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, log_expit, logsumexp

TASK_MULTICLASS = "task_multiclass"
CONCEPT_BINARY = "concept_binary"


class ProbeError(ValueError):
    pass


@dataclass
class ProbeConfig:
    kind: str = TASK_MULTICLASS
    l2_strength: float = 1.0
    max_iters: int | None = None
    tol: float = 1e-6
    class_weighting: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in (TASK_MULTICLASS, CONCEPT_BINARY):
            raise ValueError(f"unknown probe kind {self.kind!r}")
        if self.max_iters is None:
            self.max_iters = 1500 if self.kind == TASK_MULTICLASS else 1000
        if self.class_weighting is None:
            self.class_weighting = "none" if self.kind == TASK_MULTICLASS else "balanced"
        if self.class_weighting not in ("none", "balanced"):
            raise ValueError("class_weighting must be 'none' or 'balanced'")
        if self.tol <= 0 or self.max_iters <= 0 or self.l2_strength < 0:
            raise ValueError("need tol > 0, max_iters > 0, l2_strength >= 0")

    def to_dict(self) -> dict:
        return dict(kind=self.kind, l2_strength=self.l2_strength, max_iters=self.max_iters,
                    tol=self.tol, class_weighting=self.class_weighting, seed=self.seed)


@dataclass
class ProbeModel:
    weights: np.ndarray  # C x D (C = 1 for binary)
    bias: np.ndarray
    classes: np.ndarray
    converged: bool
    train_diagnostics: dict = field(default_factory=dict)

    @property
    def binary(self) -> bool:
        return self.weights.shape[0] == 1


def sample_weights(y_idx: np.ndarray, n_classes: int, scheme: str) -> np.ndarray:
    if scheme == "none":
        return np.ones(y_idx.shape[0])
    counts = np.bincount(y_idx, minlength=n_classes).astype(np.float64)
    return (y_idx.shape[0] / (n_classes * counts))[y_idx]


def objective(params: np.ndarray, X: np.ndarray, y_idx: np.ndarray, n_classes: int,
              w: np.ndarray, l2: float):
    """Loss and gradient for flattened ``[W (C x D), b (C)]`` parameters."""
    n, D = X.shape
    C = 1 if n_classes == 2 else n_classes
    W = params[: C * D].reshape(C, D)
    b = params[C * D:]
    scores = X @ W.T + b
    if C == 1:
        s = scores[:, 0]
        t = (y_idx == 1).astype(np.float64)
        # -[t log sig(s) + (1-t) log sig(-s)]
        losses = -(t * log_expit(s) + (1.0 - t) * log_expit(-s))
        G = (w * (expit(s) - t))[:, None] / n
    else:
        lse = logsumexp(scores, axis=1)
        losses = lse - scores[np.arange(n), y_idx]
        P = np.exp(scores - lse[:, None])
        P[np.arange(n), y_idx] -= 1.0
        G = (w[:, None] * P) / n
    loss = float(np.dot(w, losses) / n + 0.5 * l2 * np.sum(W * W) / n)
    gW = G.T @ X + (l2 / n) * W
    gb = G.sum(axis=0)
    return loss, np.concatenate([gW.ravel(), gb])


def _prepare(X, y):
    X = np.asarray(getattr(X, "data", X), dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ProbeError(f"X shape {X.shape} does not match {y.shape[0]} labels")
    if not np.isfinite(X).all():
        raise ProbeError("probe features contain NaN or Inf")
    return X, y


def fit_probe(X, y, config: ProbeConfig | None = None) -> ProbeModel:
    config = config or ProbeConfig()
    X, y = _prepare(X, y)
    classes, y_idx = np.unique(y, return_inverse=True)
    if classes.size < 2:
        raise ProbeError(f"probe needs at least two classes, got {classes.tolist()}")
    n_classes = classes.size
    C = 1 if n_classes == 2 else n_classes
    D = X.shape[1]
    w = sample_weights(y_idx, n_classes, config.class_weighting)
    x0 = np.zeros(C * D + C)
    args = (X, y_idx, n_classes, w, config.l2_strength)
    n_params = x0.size
    res = minimize(objective, x0, args=args, jac=True, method="L-BFGS-B",
                   options={"maxiter": config.max_iters, "gtol": config.tol / np.sqrt(n_params),
                            "ftol": 1e-15, "maxcor": 20})
    loss, grad = objective(res.x, *args)
    gnorm = float(np.linalg.norm(grad))
    return ProbeModel(
        weights=res.x[: C * D].reshape(C, D).copy(),
        bias=res.x[C * D:].copy(),
        classes=classes,
        converged=gnorm <= config.tol,
        train_diagnostics={"loss": loss, "grad_norm": gnorm, "iterations": int(res.nit),
                           "initial_loss": float(objective(x0, *args)[0])},
    )


def decision_function(model: ProbeModel, X) -> np.ndarray:
    X = np.asarray(getattr(X, "data", X), dtype=np.float64)
    if X.shape[1] != model.weights.shape[1]:
        raise ProbeError(f"feature dim {X.shape[1]} != probe dim {model.weights.shape[1]}")
    return X @ model.weights.T + model.bias


def predict_proba(model: ProbeModel, X) -> np.ndarray:
    s = decision_function(model, X)
    if model.binary:
        p = expit(s[:, 0])
        return np.column_stack([1.0 - p, p])
    return np.exp(s - logsumexp(s, axis=1, keepdims=True))


def predict(model: ProbeModel, X) -> np.ndarray:
    s = decision_function(model, X)
    if model.binary:
        return model.classes[(s[:, 0] > 0).astype(int)]
    return model.classes[np.argmax(s, axis=1)]


def classification_metrics(y_true, y_pred, positive=1) -> dict:
    """accuracy, balanced accuracy (mean recall over classes present in ``y_true``) and
    F1 of ``positive`` (0 when precision and recall are both undefined or zero)."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ProbeError("y_true and y_pred differ in shape")
    acc = float(np.mean(y_true == y_pred))
    recalls = [np.mean(y_pred[y_true == c] == c) for c in np.unique(y_true)]
    bal = float(np.mean(recalls))
    tp = int(np.sum((y_pred == positive) & (y_true == positive)))
    fp = int(np.sum((y_pred == positive) & (y_true != positive)))
    fn = int(np.sum((y_pred != positive) & (y_true == positive)))
    f1 = 0.0 if tp == 0 else 2.0 * tp / (2.0 * tp + fp + fn)
    return {"accuracy": acc, "balanced_accuracy": bal, "f1": f1}


def evaluate(model: ProbeModel, X, y) -> dict:
    X, y = _prepare(X, y)
    out = classification_metrics(y, predict(model, X))
    if not model.binary:
        out["f1"] = None
    return out


def concept_labels(z_anchor, neuron: int) -> np.ndarray:
    """y_k(x) = 1[z_k(x) > 0] on the anchor latents."""
    Z = np.asarray(getattr(z_anchor, "data", z_anchor))
    if not 0 <= neuron < Z.shape[1]:
        raise IndexError(f"neuron {neuron} out of range [0, {Z.shape[1]})")
    return (Z[:, neuron] > 0).astype(np.int64)


def _labels_of(obj, given):
    if given is not None:
        return np.asarray(given)
    labels = getattr(obj, "labels", None)
    if labels is None:
        raise ProbeError("labels required: none given and the matrix carries none")
    return labels


def task_probe_panel(anchor_train, anchor_test, raw_after_test, translated_test,
                     train_labels=None, test_labels=None, space: str = "features",
                     config: ProbeConfig | None = None) -> dict:
    """Fit on anchor train data only; score the three test-time views."""
    if space not in ("features", "latents"):
        raise ValueError("space must be 'features' or 'latents'")
    config = config or ProbeConfig(kind=TASK_MULTICLASS)
    y_tr = _labels_of(anchor_train, train_labels)
    y_te = _labels_of(anchor_test, test_labels)
    model = fit_probe(anchor_train, y_tr, config)
    out = {"space": space, "converged": model.converged}
    for name, X in (("at_t", anchor_test), ("raw_after", raw_after_test), ("translated", translated_test)):
        out[name] = float(np.mean(predict(model, X) == y_te))
    return out


def _quantiles(values) -> dict:
    if not values:
        return {"min": None, "q1": None, "median": None, "q3": None, "max": None}
    q = np.quantile(np.asarray(values, dtype=np.float64), [0.0, 0.25, 0.5, 0.75, 1.0])
    return dict(zip(("min", "q1", "median", "q3", "max"), (float(v) for v in q)))


def concept_decodability(deleted, z_anchor_test, X_after_test, X_after_train, z_anchor_train,
                         config: ProbeConfig | None = None, workers: int = 1) -> dict:
    """One balanced binary probe per concept, trained on post-task train features.

    Concepts whose train labels hold a single class get no probe; they are
    listed under ``skipped`` and scored with the constant predictor the
    degenerate fit reduces to, so every concept still has a score.
    """
    config = config or ProbeConfig(kind=CONCEPT_BINARY)
    concepts = sorted(int(k) for k in deleted)

    def one(k):
        y_tr = concept_labels(z_anchor_train, k)
        y_te = concept_labels(z_anchor_test, k)
        if np.unique(y_tr).size < 2:
            constant = np.full_like(y_te, y_tr[0])
            scores = classification_metrics(y_te, constant)
            return k, {"balanced_accuracy": scores["balanced_accuracy"], "f1": scores["f1"],
                       "constant": True}, f"single-class train labels ({int(y_tr[0])})"
        model = fit_probe(X_after_train, y_tr, config)
        scores = classification_metrics(y_te, predict(model, X_after_test))
        return k, {"balanced_accuracy": scores["balanced_accuracy"], "f1": scores["f1"],
                   "constant": False}, None

    if workers > 1 and len(concepts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, concepts))
    else:
        results = [one(k) for k in concepts]

    scores = {k: s for k, s, _ in results}
    skipped = {k: reason for k, _, reason in results if reason is not None}
    bal = [s["balanced_accuracy"] for s in scores.values()]
    f1 = [s["f1"] for s in scores.values()]
    return {
        "scores": scores,
        "skipped": skipped,
        "summary": {
            "n_concepts": len(concepts),
            "mean_balanced_accuracy": float(np.mean(bal)) if bal else None,
            "mean_f1": float(np.mean(f1)) if f1 else None,
            "balanced_accuracy": _quantiles(bal),
            "f1": _quantiles(f1),
        },
    }
