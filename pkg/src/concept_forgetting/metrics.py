"""Deletion, retention and recovery statistics and the five-way concept taxonomy."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .sae import LatentMatrix

RETAINED = "retained"
SEEMINGLY_DELETED = "seemingly_deleted"
RECOVERED = "recovered"
DECODABLE = "decodable"
LOST = "lost"
CATEGORIES = (RETAINED, SEEMINGLY_DELETED, RECOVERED, DECODABLE, LOST)


class TaxonomyError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ActivationTriple:
    z_t: LatentMatrix
    z_ts: LatentMatrix
    z_T: LatentMatrix

    def __post_init__(self):
        shapes = {np.shape(m.data) for m in (self.z_t, self.z_ts, self.z_T)}
        if len(shapes) != 1:
            raise ValueError(f"activation triple has mismatched shapes {shapes}")


@dataclass
class TaxonomyRecord:
    concept: int
    category: str
    decodability: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricsBundle:
    active_count_t: int
    active_count_ts: int
    active_count_T: int
    deletion_ratio: float | None
    retained_ratio: float | None
    deletion_ratio_translated: float | None
    regained_count_ratio: float | None
    regained_activation_mass: float | None
    taxonomy: list = field(default_factory=list)
    active_t: list = field(default_factory=list)
    active_ts: list = field(default_factory=list)
    active_T: list = field(default_factory=list)

    def category_counts(self) -> dict:
        counts = dict.fromkeys(CATEGORIES, 0)
        for rec in self.taxonomy:
            counts[rec.category] += 1
        counts[SEEMINGLY_DELETED] = counts[RECOVERED] + counts[DECODABLE] + counts[LOST]
        return counts

    def to_dict(self) -> dict:
        out = asdict(self)
        out["category_counts"] = self.category_counts()
        return out


def _s(x) -> set:
    return set(int(i) for i in (x.indices if hasattr(x, "indices") else x))


def deletion_ratio(active_t, active_ts) -> float | None:
    """|active_t minus active_ts| / |active_t|; None when nothing was active at t."""
    a, b = _s(active_t), _s(active_ts)
    if not a:
        return None
    return len(a - b) / len(a)


def retained_ratio(active_t, active_ts) -> float | None:
    ratio = deletion_ratio(active_t, active_ts)
    return None if ratio is None else 1.0 - ratio


def regained_count_ratio(deleted, active_T) -> float | None:
    deleted = _s(deleted)
    if not deleted:
        return None
    return len(deleted & _s(active_T)) / len(deleted)


def regained_activation_mass(triple: ActivationTriple, deleted) -> float | None:
    """Clipped translation recovery over the activation lost between t and t+s, on deleted concepts."""
    cols = sorted(_s(deleted))
    if not cols:
        return None
    z_t = np.asarray(triple.z_t.data, dtype=np.float64)[:, cols]
    z_ts = np.asarray(triple.z_ts.data, dtype=np.float64)[:, cols]
    z_T = np.asarray(triple.z_T.data, dtype=np.float64)[:, cols]
    loss = np.maximum(0.0, z_t - z_ts)
    recovery = np.minimum(np.maximum(0.0, z_T - z_ts), loss)
    total = loss.sum()
    if total == 0:
        return None
    return float(recovery.sum() / total)


def classify_taxonomy(active_t, active_ts, active_T, decodability_scores: dict,
                      skipped: dict | None = None) -> list[TaxonomyRecord]:
    """Assign each concept active at t one of retained / recovered / decodable / lost.

    (Seemingly deleted is the union of the last three.)  ``decodability_scores``
    maps concept -> {"balanced_accuracy", "f1", ...} and must cover every
    seemingly deleted, non-recovered concept not listed in ``skipped``.
    """
    a_t, a_ts, a_T = _s(active_t), _s(active_ts), _s(active_T)
    skipped = skipped or {}
    records = []
    for k in sorted(a_t):
        if k in a_ts:
            records.append(TaxonomyRecord(k, RETAINED, _score(decodability_scores, k)))
        elif k in a_T:
            records.append(TaxonomyRecord(k, RECOVERED, _score(decodability_scores, k)))
        else:
            score = _score(decodability_scores, k)
            if score is None:
                if k in skipped:
                    records.append(TaxonomyRecord(k, LOST, {"f1": 0.0, "balanced_accuracy": None,
                                                            "skipped": skipped[k]}))
                    continue
                raise TaxonomyError(f"no decodability score for deleted, non-recovered concept {k}")
            category = DECODABLE if score["f1"] > 0 else LOST
            records.append(TaxonomyRecord(k, category, score))
    return records


def _score(scores: dict, k: int):
    s = scores.get(k, scores.get(str(k)))
    return None if s is None else dict(s)


def check_partition(records, active_t, active_ts, active_T) -> None:
    """Raise if the records do not partition active_t as the taxonomy requires."""
    a_t, a_ts, a_T = _s(active_t), _s(active_ts), _s(active_T)
    seen = [r.concept for r in records]
    if sorted(seen) != sorted(a_t) or len(set(seen)) != len(seen):
        raise TaxonomyError("taxonomy does not list every active concept exactly once")
    for r in records:
        if r.category == RETAINED and r.concept not in a_ts:
            raise TaxonomyError(f"concept {r.concept} retained but inactive at t+s")
        if r.category != RETAINED and r.concept in a_ts:
            raise TaxonomyError(f"concept {r.concept} active at t+s but not retained")
        if r.category == RECOVERED and r.concept not in a_T:
            raise TaxonomyError(f"concept {r.concept} recovered but inactive after translation")
        if r.category == LOST and r.decodability and r.decodability.get("f1", 0.0) != 0:
            raise TaxonomyError(f"concept {r.concept} lost with non-zero F1")
        if r.category == DECODABLE and not r.decodability["f1"] > 0:
            raise TaxonomyError(f"concept {r.concept} decodable with zero F1")


def forgetting_delta(acc_at_t: float, acc_after: float) -> float:
    """Accuracy drop; both operands must use the same unit (fraction or percent)."""
    for a in (acc_at_t, acc_after):
        if a < 0 or a > 100:
            raise ValueError(f"accuracy {a} outside [0, 100]")
    if (acc_at_t <= 1) != (acc_after <= 1) and max(acc_at_t, acc_after) > 1:
        raise ValueError(f"unit mismatch: {acc_at_t} and {acc_after} look like fraction vs percent")
    # accuracies carry at most a few decimals; drop binary-representation noise
    return round(acc_at_t - acc_after, 12)


def compute_metrics_bundle(active_t, active_ts, active_T, triple: ActivationTriple,
                           decodability_scores: dict, skipped: dict | None = None) -> MetricsBundle:
    a_t, a_ts, a_T = _s(active_t), _s(active_ts), _s(active_T)
    deleted = a_t - a_ts
    taxonomy = classify_taxonomy(a_t, a_ts, a_T, decodability_scores, skipped)
    check_partition(taxonomy, a_t, a_ts, a_T)
    dr = deletion_ratio(a_t, a_ts)
    return MetricsBundle(
        active_count_t=len(a_t),
        active_count_ts=len(a_ts),
        active_count_T=len(a_T),
        deletion_ratio=dr,
        retained_ratio=None if dr is None else 1.0 - dr,
        deletion_ratio_translated=deletion_ratio(a_t, a_T),
        regained_count_ratio=regained_count_ratio(deleted, a_T),
        regained_activation_mass=regained_activation_mass(triple, deleted),
        taxonomy=taxonomy,
        active_t=sorted(a_t),
        active_ts=sorted(a_ts),
        active_T=sorted(a_T),
    )
