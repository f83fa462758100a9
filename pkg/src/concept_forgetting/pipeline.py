"""End-to-end orchestration: SAEs, binarisation, translation, probes, metrics, MS.

``run_analysis`` produces one JSON report per configuration; ``run_sweep``
repeats the per-pair work over (K, batch) cells, seeds and tau points.
Reports are validated against ``report.schema.json`` before they are
written, and every file goes through a temp-file-plus-rename.
"""

from __future__ import annotations

import csv
import io
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .concepts import (DEFAULT_TAU, ablate_inactive, active_concepts, binarize,
                       compute_anchor_stats, latent_variants)
from .features import (align_pair, atomic_write_text, dump_json, load_layout)
from .metrics import ActivationTriple, compute_metrics_bundle
from .monosemanticity import evaluable_neurons, permutation_baseline
from .probes import (CONCEPT_BINARY, TASK_MULTICLASS, ProbeConfig, concept_decodability, fit_probe,
                     predict, task_probe_panel)
from .sae import SaeConfig, encode, train_sae
from .translator import TranslatorConfig, apply, fit_linear, fit_linear_closed_form, fit_nonlinear

REPORT_SCHEMA_VERSION = 1
REPORT_NAME = "report.json"
SWEEP_REPORT_NAME = "sweep.json"
WORKERS_ENV = "CONCEPT_FORGETTING_WORKERS"

TAU_GRID = (0.00625, 0.0125, 0.025, 0.05, 0.1, 0.2)
K_GRID = (10, 16, 32, 64)
BATCH_GRID = (16, 32, 64, 128, 256)
PROBE_SCOPES = ("required", "deleted", "active")
TRANSLATOR_KINDS = ("linear", "closed_form", "nonlinear")


@dataclass
class RunConfig:
    features_root: str = "features"
    pairs: list = field(default_factory=lambda: [[0, 1]])
    tau: float = DEFAULT_TAU
    sae: dict = field(default_factory=dict)  # SaeConfig fields except input_dim
    translator: dict = field(default_factory=dict)
    translator_kind: str = "linear"
    task_probe: dict = field(default_factory=dict)
    concept_probe: dict = field(default_factory=dict)
    probe_scope: str = "required"
    ms: bool = True
    tau_grid: list = field(default_factory=lambda: list(TAU_GRID))
    k_grid: list = field(default_factory=lambda: list(K_GRID))
    batch_grid: list = field(default_factory=lambda: list(BATCH_GRID))
    n_runs: int = 1
    seed: int = 0
    out_dir: str = "out"
    workers: int | None = None

    def __post_init__(self):
        self.pairs = [[int(t), int(c)] for t, c in self.pairs]
        if not self.pairs:
            raise ValueError("at least one (task, checkpoint) pair is required")
        for t, c in self.pairs:
            if c < t:
                raise ValueError(f"pair ({t}, {c}): the later checkpoint must not precede the task")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.probe_scope not in PROBE_SCOPES:
            raise ValueError(f"probe_scope must be one of {PROBE_SCOPES}")
        if self.translator_kind not in TRANSLATOR_KINDS:
            raise ValueError(f"translator_kind must be one of {TRANSLATOR_KINDS}")
        if self.n_runs < 1:
            raise ValueError("n_runs must be >= 1")
        if "input_dim" in self.sae:
            raise ValueError("sae.input_dim is taken from the features")
        if self.workers is None:
            self.workers = int(os.environ.get(WORKERS_ENV, "1"))

    def check_grids(self) -> None:
        for name in ("tau_grid", "k_grid", "batch_grid"):
            if not getattr(self, name):
                raise ValueError(f"{name} must be non-empty for a sweep")
        if any(not 0.0 <= t <= 1.0 for t in self.tau_grid):
            raise ValueError("tau grid values must lie in [0, 1]")
        if any(int(k) < 1 for k in self.k_grid) or any(int(b) < 1 for b in self.batch_grid):
            raise ValueError("K and batch grid values must be positive")

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("workers")  # execution detail, not part of the result
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def synthetic_reference_config(features_root, out_dir, **overrides) -> RunConfig:
    """The settings used for the synthetic end-to-end checks (k=4 on 64 latents)."""
    base = dict(features_root=str(features_root), out_dir=str(out_dir), pairs=[[0, 1]],
                sae={"k": 4})
    base.update(overrides)
    return RunConfig(**base)


# --- per-pair work ----------------------------------------------------------


def _sae_config(config: RunConfig, dim: int, seed: int, **extra) -> SaeConfig:
    fields = dict(config.sae)
    fields.update(extra)
    fields["seed"] = seed
    return SaeConfig(input_dim=dim, **fields)


def _fit_translator(config: RunConfig, pair, seed: int):
    tcfg = dict(config.translator)
    if config.translator_kind == "closed_form":
        return fit_linear_closed_form(pair, ridge_lambda=tcfg.get("ridge_lambda", 1e-4),
                                      val_fraction=tcfg.get("val_fraction", 0.2), seed=seed)
    tcfg.pop("ridge_lambda", None)
    tcfg["seed"] = seed
    fit = fit_nonlinear if config.translator_kind == "nonlinear" else fit_linear
    return fit(pair, TranslatorConfig(**tcfg))


class _Timer:
    def __init__(self):
        self.marks = {}

    def __call__(self, name):
        timer = self

        class _Span:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.marks[name] = timer.marks.get(name, 0.0) + time.perf_counter() - self.t0

        return _Span()


@dataclass
class PairContext:
    """Everything about one (task, checkpoint) pair that does not depend on tau."""

    task: int
    checkpoint: int
    model: object
    anchor_train: object
    anchor_test: object
    after_train: object
    after_test: object
    translated_test: object
    translator: object
    z_train: object
    variants: dict
    stats: object


def load_pair_inputs(root, task: int, checkpoint: int) -> dict:
    anchor_train = load_layout(root, task, task, "train")
    anchor_test = load_layout(root, task, task, "test")
    after_train = load_layout(root, task, checkpoint, "train")
    after_test = load_layout(root, task, checkpoint, "test")
    return {
        "train": align_pair(after_train, anchor_train),
        "test": align_pair(after_test, anchor_test),
    }


def prepare_pair(config: RunConfig, task: int, checkpoint: int, seed: int, timer=None,
                 model=None, **sae_overrides) -> PairContext:
    timer = timer or _Timer()
    with timer("load"):
        inputs = load_pair_inputs(config.features_root, task, checkpoint)
    after_train, anchor_train = inputs["train"].first, inputs["train"].second
    after_test, anchor_test = inputs["test"].first, inputs["test"].second
    if model is None:
        with timer("sae"):
            model = train_sae(anchor_train, _sae_config(config, anchor_train.dim, seed + task, **sae_overrides))
    with timer("translate"):
        tr = _fit_translator(config, inputs["train"], seed)
        translated_test = apply(tr, after_test)
    with timer("encode"):
        z_train = encode(model, anchor_train, source_task=task, eval_checkpoint=task, variant="anchor")
        stats = compute_anchor_stats(z_train)
        variants = latent_variants(model, anchor_test, after_test, translated_test, task, checkpoint)
    return PairContext(task, checkpoint, model, anchor_train, anchor_test, after_train, after_test,
                       translated_test, tr, z_train, variants, stats)


def _active_sets(ctx: PairContext, tau: float) -> dict:
    return {v: active_concepts(binarize(z, ctx.stats), tau, v) for v, z in ctx.variants.items()}


def _probe_targets(scope: str, a_t: set, a_ts: set, a_T: set) -> set:
    if scope == "active":
        return set(a_t)
    deleted = a_t - a_ts
    return deleted if scope == "deleted" else deleted - a_T


def evaluate_metrics(ctx: PairContext, config: RunConfig, tau: float, timer=None) -> tuple:
    """MetricsBundle plus the decodability table for one tau."""
    timer = timer or _Timer()
    act = _active_sets(ctx, tau)
    a_t, a_ts, a_T = (act[v].as_set() for v in ("anchor", "raw_after", "translated"))
    targets = _probe_targets(config.probe_scope, a_t, a_ts, a_T)
    with timer("concept_probes"):
        dec = concept_decodability(targets, ctx.variants["anchor"], ctx.after_test, ctx.after_train,
                                   ctx.z_train, ProbeConfig(kind=CONCEPT_BINARY, **config.concept_probe),
                                   workers=config.workers)
    triple = ActivationTriple(ctx.variants["anchor"], ctx.variants["raw_after"], ctx.variants["translated"])
    bundle = compute_metrics_bundle(a_t, a_ts, a_T, triple, dec["scores"], dec["skipped"])
    train_active = active_concepts(binarize(ctx.z_train, ctx.stats), tau, "anchor")
    return bundle, dec, act, len(train_active)


def _panel(ctx: PairContext, config: RunConfig, space: str) -> dict:
    pcfg = ProbeConfig(kind=TASK_MULTICLASS, **config.task_probe)
    if space == "features":
        return task_probe_panel(ctx.anchor_train, ctx.anchor_test, ctx.after_test, ctx.translated_test,
                                space="features", config=pcfg)
    v = ctx.variants
    return task_probe_panel(ctx.z_train.data, v["anchor"].data, v["raw_after"].data, v["translated"].data,
                            train_labels=ctx.anchor_train.labels, test_labels=ctx.anchor_test.labels,
                            space="latents", config=pcfg)


def _ablation(ctx: PairContext, config: RunConfig, active) -> dict:
    """Task probe accuracy on anchor test data before and after zeroing non-active latents."""
    pcfg = ProbeConfig(kind=TASK_MULTICLASS, **config.task_probe)
    probe = fit_probe(ctx.anchor_train, ctx.anchor_train.labels, pcfg)
    ablated = ablate_inactive(ctx.anchor_test, ctx.model, active)
    y = ctx.anchor_test.labels
    return {
        "accuracy_full": float(np.mean(predict(probe, ctx.anchor_test) == y)),
        "accuracy_ablated": float(np.mean(predict(probe, ablated) == y)),
        "n_active": len(active),
    }


def _ms_table(ctx: PairContext, active, seed: int) -> dict:
    neurons = evaluable_neurons(ctx.variants["anchor"], active)
    res = permutation_baseline(ctx.variants["anchor"], ctx.anchor_test, neurons, seed=seed)
    return res.to_dict()


def _dec_rows(dec: dict) -> list:
    return [{"concept": int(k), **dec["scores"][k], "skipped": dec["skipped"].get(k)}
            for k in sorted(dec["scores"])]


def _finite(x):
    return None if x is None or not np.isfinite(x) else float(x)


def analyze_pair(config: RunConfig, task: int, checkpoint: int, seed: int, timer=None,
                 models: dict | None = None) -> dict:
    """Report entry for one pair; ``models`` caches the task's SAE across pairs."""
    timer = timer or _Timer()
    models = {} if models is None else models
    ctx = prepare_pair(config, task, checkpoint, seed, timer, model=models.get(task))
    models[task] = ctx.model
    bundle, dec, act, train_count = evaluate_metrics(ctx, config, config.tau, timer)
    with timer("task_probes"):
        panels = {space: _panel(ctx, config, space) for space in ("features", "latents")}
        ablation = _ablation(ctx, config, act["anchor"])
    with timer("ms"):
        ms = _ms_table(ctx, act["anchor"], seed) if config.ms else None
    metrics = bundle.to_dict()
    metrics["taxonomy"] = [r.to_dict() for r in bundle.taxonomy]
    return {
        "task": task,
        "checkpoint": checkpoint,
        "s": checkpoint - task,
        "tau": config.tau,
        "metrics": metrics,
        "active_count_t_train": train_count,
        "probe_panels": panels,
        "decodability": {"scope": config.probe_scope, "rows": _dec_rows(dec), "summary": dec["summary"]},
        "ablation": ablation,
        "monosemanticity": ms,
        "translator": {"kind": config.translator_kind, "train_mse": _finite(ctx.translator.train_mse),
                       "val_mse": _finite(ctx.translator.val_mse)},
        "sae": {"latent_dim": ctx.model.latent_dim, "config": ctx.model.config.to_dict(),
                **{k: _finite(v) for k, v in ctx.model.diagnostics.items()}},
    }


# --- reports -----------------------------------------------------------------


def report_schema() -> dict:
    return json.loads(resources.files(__package__).joinpath("report.schema.json").read_text())


def validate_report(report: dict) -> None:
    """Raise jsonschema.ValidationError if ``report`` breaks the analysis report schema."""
    jsonschema.validate(report, report_schema())


def run_analysis(config: RunConfig, write: bool = True) -> dict:
    timer = _Timer()
    t0 = time.perf_counter()
    models: dict = {}
    pairs = [analyze_pair(config, t, c, config.seed, timer, models) for t, c in config.pairs]
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "kind": "analysis",
        "version": __version__,
        "seed": config.seed,
        "config": config.to_dict(),
        "pairs": pairs,
    }
    timer.marks["total"] = time.perf_counter() - t0
    report["timing"] = {k: round(v, 6) for k, v in sorted(timer.marks.items())}
    validate_report(report)
    if write:
        out = Path(config.out_dir)
        emit_plot_tables(report, out / "tables")
        atomic_write_text(out / REPORT_NAME, dump_json(report))  # last: its presence marks success
    return report


def without_timing(report: dict) -> str:
    return dump_json({k: v for k, v in report.items() if k != "timing"})


# --- sweeps -----------------------------------------------------------------


def cell_seed(base_seed: int, cell_index: int) -> int:
    return base_seed * 10007 + cell_index


def _quartiles(values) -> dict:
    vals = [v for v in values if v is not None]
    if not vals:
        return {"n": 0, "min": None, "q1": None, "median": None, "q3": None, "max": None, "iqr": None}
    q = np.quantile(np.asarray(vals, dtype=np.float64), [0.0, 0.25, 0.5, 0.75, 1.0])
    return {"n": len(vals), "min": float(q[0]), "q1": float(q[1]), "median": float(q[2]),
            "q3": float(q[3]), "max": float(q[4]), "iqr": float(q[3] - q[1])}


SWEEP_METRICS = ("active_count_t", "active_count_ts", "active_count_T", "deletion_ratio",
                 "deletion_ratio_translated", "regained_count_ratio", "regained_activation_mass")


def _check_monotone(rows: list) -> None:
    """Active counts may not increase with tau (frequency thresholding is nested)."""
    rows = sorted(rows, key=lambda r: r["tau"])
    for key in ("active_count_t", "active_count_ts", "active_count_T"):
        counts = [r["metrics"][key] for r in rows]
        if any(b > a for a, b in zip(counts, counts[1:])):
            raise AssertionError(f"{key} increases with tau: {counts}")


def _run_cell(args) -> dict:
    config, index, k, batch = args
    seed0 = cell_seed(config.seed, index)
    cell = {"cell_index": index, "k": int(k), "batch_size": int(batch), "seed": seed0, "runs": [],
            "error": None}
    try:
        for run in range(config.n_runs):
            seed = seed0 + run
            rows, models = [], {}
            for t, c in config.pairs:
                ctx = prepare_pair(config, t, c, seed, model=models.get(t), k=int(k), batch_size=int(batch))
                models[t] = ctx.model
                nnz = np.count_nonzero(ctx.variants["anchor"].data, axis=1)
                if nnz.max(initial=0) > int(k):
                    raise AssertionError(f"latent rows exceed K={k} nonzeros")
                pair_rows = []
                for tau in config.tau_grid:
                    bundle, _, _, _ = evaluate_metrics(ctx, config, float(tau))
                    m = bundle.to_dict()
                    pair_rows.append({"task": t, "checkpoint": c, "tau": float(tau),
                                      "metrics": {key: m[key] for key in SWEEP_METRICS},
                                      "category_counts": m["category_counts"]})
                _check_monotone(pair_rows)
                for r in pair_rows:
                    r["rows_with_k_nonzeros"] = float(np.mean(nnz == int(k)))
                rows.extend(pair_rows)
            cell["runs"].append({"run_index": run, "seed": seed, "points": rows})
    except Exception as exc:  # recorded; the sweep carries on with the other cells
        cell["error"] = f"{type(exc).__name__}: {exc}"
    return cell


def _summarise_cell(cell: dict, config: RunConfig) -> list:
    out = []
    for t, c in config.pairs:
        for tau in config.tau_grid:
            pts = [p for r in cell["runs"] for p in r["points"]
                   if p["task"] == t and p["checkpoint"] == c and p["tau"] == float(tau)]
            out.append({"task": t, "checkpoint": c, "tau": float(tau),
                        "quartiles": {m: _quartiles([p["metrics"][m] for p in pts]) for m in SWEEP_METRICS}})
    return out


def run_sweep(config: RunConfig, write: bool = True) -> dict:
    config.check_grids()
    t0 = time.perf_counter()
    jobs = [(config, i, k, b) for i, (k, b) in
            enumerate((k, b) for k in config.k_grid for b in config.batch_grid)]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            cells = list(pool.map(_run_cell, jobs))
    else:
        cells = [_run_cell(j) for j in jobs]
    cells.sort(key=lambda c: c["cell_index"])
    for cell in cells:
        cell["summary"] = _summarise_cell(cell, config) if cell["error"] is None else []
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "kind": "sweep",
        "version": __version__,
        "seed": config.seed,
        "config": config.to_dict(),
        "cells": cells,
        "failed_cells": [c["cell_index"] for c in cells if c["error"] is not None],
        "timing": {"total": round(time.perf_counter() - t0, 6)},
    }
    validate_report(report)
    if write:
        out = Path(config.out_dir)
        emit_sweep_table(report, out / "tables")
        atomic_write_text(out / SWEEP_REPORT_NAME, dump_json(report))
    return report


# --- plot tables -------------------------------------------------------------


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_table(path: Path, header: list, rows: list) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(row.get(h)) for h in header])
    atomic_write_text(path, buf.getvalue())
    return path


def read_table(path) -> list[dict]:
    """Parse an emitted table back: empty cells are None, numbers become int/float."""
    def parse(s):
        if s == "":
            return None
        if s in ("true", "false"):
            return s == "true"
        for cast in (int, float):
            try:
                return cast(s)
            except ValueError:
                pass
        return s

    with open(path, newline="") as fh:
        return [{k: parse(v) for k, v in row.items()} for row in csv.DictReader(fh)]


TABLE_HEADERS = {
    "active_counts": ["task", "checkpoint", "s", "variant", "active_count"],
    "deletion": ["task", "checkpoint", "s", "variant", "deletion_ratio"],
    "regained": ["task", "checkpoint", "s", "regained_count_ratio", "regained_activation_mass"],
    "trajectories": ["task", "checkpoint", "s", "active_count_t", "active_count_ts", "active_count_T",
                     "deletion_ratio", "retained_ratio", "deletion_ratio_translated",
                     "regained_count_ratio", "regained_activation_mass"],
    "taxonomy": ["task", "checkpoint", "concept", "category", "balanced_accuracy", "f1"],
    "decodability": ["task", "checkpoint", "concept", "balanced_accuracy", "f1", "constant", "skipped"],
    "probe_panels": ["task", "checkpoint", "space", "variant", "accuracy"],
    "monosemanticity": ["task", "checkpoint", "concept", "ms", "baseline_ms"],
}


def emit_plot_tables(report: dict, directory) -> dict:
    """Flat CSV tables, one per figure family; returns {name: path}."""
    directory = Path(directory)
    rows = {name: [] for name in TABLE_HEADERS}
    for p in report["pairs"]:
        key = {"task": p["task"], "checkpoint": p["checkpoint"], "s": p["s"]}
        m = p["metrics"]
        for variant, count in (("anchor", m["active_count_t"]), ("raw_after", m["active_count_ts"]),
                               ("translated", m["active_count_T"])):
            rows["active_counts"].append({**key, "variant": variant, "active_count": count})
        rows["deletion"].append({**key, "variant": "raw_after", "deletion_ratio": m["deletion_ratio"]})
        rows["deletion"].append({**key, "variant": "translated",
                                 "deletion_ratio": m["deletion_ratio_translated"]})
        rows["regained"].append({**key, "regained_count_ratio": m["regained_count_ratio"],
                                 "regained_activation_mass": m["regained_activation_mass"]})
        rows["trajectories"].append({**key, **{h: m[h] for h in TABLE_HEADERS["trajectories"] if h in m}})
        for rec in m["taxonomy"]:
            d = rec["decodability"] or {}
            rows["taxonomy"].append({**key, "concept": rec["concept"], "category": rec["category"],
                                     "balanced_accuracy": d.get("balanced_accuracy"), "f1": d.get("f1")})
        for r in p["decodability"]["rows"]:
            rows["decodability"].append({**key, **r})
        for space, panel in p["probe_panels"].items():
            for variant in ("at_t", "raw_after", "translated"):
                rows["probe_panels"].append({**key, "space": space, "variant": variant,
                                             "accuracy": panel[variant]})
        ms = p.get("monosemanticity")
        if ms:
            for k, a, b in zip(ms["neurons"], ms["per_concept_ms"], ms["baseline_ms"]):
                rows["monosemanticity"].append({**key, "concept": k, "ms": a, "baseline_ms": b})
    return {name: _write_table(directory / f"{name}.csv", TABLE_HEADERS[name], rows[name])
            for name in TABLE_HEADERS}


SWEEP_HEADER = ["cell_index", "k", "batch_size", "task", "checkpoint", "tau", "metric",
                "n", "min", "q1", "median", "q3", "max", "iqr"]


def emit_sweep_table(report: dict, directory) -> Path:
    rows = []
    for cell in report["cells"]:
        for s in cell["summary"]:
            for metric, q in s["quartiles"].items():
                rows.append({"cell_index": cell["cell_index"], "k": cell["k"], "batch_size": cell["batch_size"],
                             "task": s["task"], "checkpoint": s["checkpoint"], "tau": s["tau"],
                             "metric": metric, **q})
    return _write_table(Path(directory) / "sweep.csv", SWEEP_HEADER, rows)
