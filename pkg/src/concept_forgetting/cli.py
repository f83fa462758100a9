"""Command line entry point: ``concept-forgetting <subcommand> ...``.

Exit codes: 0 success, 2 input error, 3 numerical failure, 4 schema error.
Every subcommand prints one JSON object on stdout; errors go to stderr as
``{"error": kind, "message": ...}``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import pipeline
from .features import (AlignmentError, FeatureStoreError, SchemaVersionError, align_pair, dump_json,
                       load_layout)
from .sae import SaeConfig, SaeTrainingError, save_sae, train_sae
from .synth import DRIFT_KINDS, DriftSpec, SynthSpec, generate, write_synth
from .translator import (TranslatorConfig, TranslatorDivergence, fit_linear, fit_linear_closed_form,
                         fit_nonlinear, save_translator)

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_SCHEMA = 0, 2, 3, 4


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _pairs(text: str) -> list[list[int]]:
    """``0:1,0:2`` -> [[0, 1], [0, 2]]"""
    out = []
    for item in text.split(","):
        t, c = item.split(":")
        out.append([int(t), int(c)])
    return out


def _add_sae_flags(p):
    g = p.add_argument_group("SAE")
    g.add_argument("--expansion", type=float)
    g.add_argument("--k", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--dead-loss-weight", type=float)
    g.add_argument("--dead-window-steps", type=int)
    g.add_argument("--aux-k", type=int)


SAE_FLAGS = ("expansion", "k", "epochs", "lr", "batch_size", "dead_loss_weight", "dead_window_steps", "aux_k")


def _sae_fields(args) -> dict:
    return {name: getattr(args, name) for name in SAE_FLAGS if getattr(args, name) is not None}


def _add_run_flags(p):
    p.add_argument("--config", help="JSON file with RunConfig fields; flags override it")
    p.add_argument("--features", dest="features_root")
    p.add_argument("--pairs", type=_pairs, help="task:checkpoint list, e.g. 0:1,0:2")
    p.add_argument("--tau", type=float)
    p.add_argument("--translator-kind", choices=pipeline.TRANSLATOR_KINDS)
    p.add_argument("--probe-scope", choices=pipeline.PROBE_SCOPES,
                   help="which concepts get decodability probes (default: deleted and not recovered)")
    p.add_argument("--no-ms", dest="ms", action="store_false", default=None)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", dest="out_dir")
    p.add_argument("--workers", type=int)
    _add_sae_flags(p)


def _run_config(args) -> pipeline.RunConfig:
    fields = {}
    if args.config:
        fields.update(json.loads(Path(args.config).read_text()))
    for name in ("features_root", "pairs", "tau", "translator_kind", "probe_scope", "ms", "seed", "out_dir",
                 "workers", "tau_grid", "k_grid", "batch_grid", "n_runs"):
        value = getattr(args, name, None)
        if value is not None:
            fields[name] = value
    sae = dict(fields.get("sae", {}))
    sae.update(_sae_fields(args))
    fields["sae"] = sae
    return pipeline.RunConfig.from_dict(fields)


def cmd_synth(args) -> dict:
    drift = DriftSpec(kind=args.drift, scale_range=tuple(args.scale_range), erased_atoms=tuple(args.erased),
                      bias_norm=args.bias_norm, rotate=args.rotate)
    spec = SynthSpec(d=args.d, n_atoms=args.n_atoms, k_true=args.k_true, n_train=args.n_train,
                     n_test=args.n_test, noise_sigma=args.noise_sigma, n_classes=args.n_classes,
                     drift=drift, seed=args.seed)
    path = write_synth(args.out, generate(spec), task_id=args.task)
    return {"features_root": str(args.out), "ground_truth": str(path), "spec": spec.to_dict()}


def cmd_train_sae(args) -> dict:
    ckpt = args.task if args.checkpoint is None else args.checkpoint
    feats = load_layout(args.features_root, args.task, ckpt, "train")
    model = train_sae(feats, SaeConfig(input_dim=feats.dim, seed=args.seed, **_sae_fields(args)))
    path = save_sae(model, args.out)
    return {"model": str(path), "latent_dim": model.latent_dim, "diagnostics": model.diagnostics}


def cmd_translate(args) -> dict:
    target = args.task if args.to_checkpoint is None else args.to_checkpoint
    pair = align_pair(load_layout(args.features_root, args.task, args.from_checkpoint, "train"),
                      load_layout(args.features_root, args.task, target, "train"))
    cfg = TranslatorConfig(epochs=args.epochs, lr=args.lr, weight_decay=args.weight_decay,
                           batch_size=args.batch_size, val_fraction=args.val_fraction, seed=args.seed)
    if args.kind == "closed_form":
        tr = fit_linear_closed_form(pair, ridge_lambda=args.ridge_lambda, val_fraction=args.val_fraction,
                                    seed=args.seed)
    elif args.kind == "nonlinear":
        tr = fit_nonlinear(pair, cfg)
    else:
        tr = fit_linear(pair, cfg)
    path = save_translator(tr, args.out)
    return {"translator": str(path), "kind": args.kind, "train_mse": tr.train_mse, "val_mse": tr.val_mse}


def _summary(report: dict) -> dict:
    keys = ("deletion_ratio", "deletion_ratio_translated", "regained_count_ratio", "regained_activation_mass")
    return {"pairs": [{"task": p["task"], "checkpoint": p["checkpoint"],
                       **{k: p["metrics"][k] for k in keys},
                       "category_counts": p["metrics"]["category_counts"]} for p in report["pairs"]]}


def cmd_analyze(args) -> dict:
    config = _run_config(args)
    report = pipeline.run_analysis(config)
    return {"report": str(Path(config.out_dir) / pipeline.REPORT_NAME), **_summary(report)}


def cmd_sweep(args) -> dict:
    config = _run_config(args)
    report = pipeline.run_sweep(config)
    return {"report": str(Path(config.out_dir) / pipeline.SWEEP_REPORT_NAME),
            "cells": len(report["cells"]), "failed_cells": report["failed_cells"]}


def cmd_report(args) -> dict:
    path = Path(args.report)
    if not path.exists():
        raise FileNotFoundError(f"report not found: {path}")
    report = json.loads(path.read_text())
    pipeline.validate_report(report)
    out = Path(args.out) if args.out else path.parent / "tables"
    if report["kind"] == "sweep":
        tables = {"sweep": str(pipeline.emit_sweep_table(report, out))}
        return {"kind": "sweep", "tables": tables, "failed_cells": report["failed_cells"]}
    tables = {k: str(v) for k, v in pipeline.emit_plot_tables(report, out).items()}
    return {"kind": "analysis", "tables": tables, **_summary(report)}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="concept-forgetting",
                                     description="Concept-level forgetting analysis with anchored SAEs.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic drift dataset in the feature layout")
    p.add_argument("--out", required=True)
    p.add_argument("--drift", default="identity", choices=DRIFT_KINDS)
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--n-atoms", type=int, default=32)
    p.add_argument("--k-true", type=int, default=3)
    p.add_argument("--n-train", type=int, default=10000)
    p.add_argument("--n-test", type=int, default=2000)
    p.add_argument("--noise-sigma", type=float, default=0.01)
    p.add_argument("--n-classes", type=int, default=4)
    p.add_argument("--erased", type=_ints, default=[])
    p.add_argument("--scale-range", type=_floats, default=[0.5, 2.0])
    p.add_argument("--bias-norm", type=float, default=0.0)
    p.add_argument("--rotate", action="store_true", help="rotate after erasure")
    p.add_argument("--task", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-sae", help="train one SAE on a task's anchor train features")
    p.add_argument("--features", dest="features_root", required=True)
    p.add_argument("--task", type=int, default=0)
    p.add_argument("--checkpoint", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_sae_flags(p)
    p.set_defaults(func=cmd_train_sae)

    p = sub.add_parser("translate", help="fit a map from a later checkpoint back to the task's own")
    p.add_argument("--features", dest="features_root", required=True)
    p.add_argument("--task", type=int, default=0)
    p.add_argument("--from-checkpoint", type=int, required=True)
    p.add_argument("--to-checkpoint", type=int)
    p.add_argument("--kind", choices=pipeline.TRANSLATOR_KINDS, default="linear")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--ridge-lambda", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("analyze", help="full analysis for the configured task pairs")
    _add_run_flags(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", help="analysis over tau, K and SAE batch grids with repeated seeds")
    _add_run_flags(p)
    p.add_argument("--tau-grid", type=_floats)
    p.add_argument("--k-grid", type=_ints)
    p.add_argument("--batch-grid", type=_ints)
    p.add_argument("--n-runs", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="validate a report and (re)emit its plot tables")
    p.add_argument("--report", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def _fail(kind: str, exc: Exception, code: int) -> int:
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = args.func(args)
    except (SchemaVersionError, jsonschema.ValidationError) as exc:
        return _fail("schema", exc, EXIT_SCHEMA)
    except (SaeTrainingError, TranslatorDivergence, np.linalg.LinAlgError, ArithmeticError) as exc:
        return _fail("numerical", exc, EXIT_NUMERIC)
    except (FileNotFoundError, AlignmentError, FeatureStoreError, json.JSONDecodeError, ValueError) as exc:
        return _fail("input", exc, EXIT_INPUT)
    print(dump_json(result))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
