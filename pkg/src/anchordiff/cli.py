"""Command line front end: run, score and serialize experiments.

Four subcommands sharing one config format: `train` runs a single
personalization and writes report.json plus loss_curve.csv; `ablate`
retrains every fusion mode across the evaluation seeds into
ablation.csv; `gradcheck` audits analytic gradients on a downscaled
model into gradcheck.json; `align` writes the concept-to-face distance
comparison into alignment.json.

Output directory precedence: --output-dir flag, then the
ANCHORDIFF_OUT environment variable, then the config's output section.
Exit codes: 0 success, 2 config problem, 3 numeric failure during a
run, 4 gradient audit failure.
"""

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import evaluation, gradcheck, trainer
from .config import (MODES, ConfigError, apply_overrides, load_config,
                     serialize_config)

ENV_OUTPUT_DIR = "ANCHORDIFF_OUT"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_GRADCHECK = 4


class NumericFailure(RuntimeError):
    """A run produced a non-finite loss or metric."""


def _resolve_output_dir(cfg, flag_value):
    out = flag_value or os.environ.get(ENV_OUTPUT_DIR) or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    return out


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require_finite(values, where):
    arr = np.asarray(list(values), dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericFailure(f"non-finite value in {where}")


def cmd_train(args):
    cfg = load_config(args.config)
    cfg = apply_overrides(
        cfg, seed=args.seed, ablation_mode=args.mode, steps=args.steps,
        learning_rate=args.learning_rate, optimizer=args.optimizer)
    out_dir = _resolve_output_dir(cfg, args.output_dir)
    state, report = trainer.train_run(cfg)
    _require_finite(report.loss_curve, "loss curve")
    metrics = evaluation.evaluate_state(state)
    _require_finite((metrics["identity_sim"], metrics["prompt_sim"]), "metrics")

    with open(os.path.join(out_dir, "loss_curve.csv"), "w",
              encoding="utf-8", newline="\n") as fh:
        fh.write("step,loss\n")
        for step, loss in enumerate(report.loss_curve):
            fh.write(f"{step},{loss!r}\n")

    _write_json(os.path.join(out_dir, "report.json"), {
        "mode": report.mode,
        "seed": report.seed,
        "steps": len(report.loss_curve),
        "initial_loss": report.initial_loss,
        "final_loss": report.final_loss,
        "frozen_digest_before": report.frozen_digest_before,
        "frozen_digest_after": report.frozen_digest_after,
        "generator": report.generator,
        "metrics": metrics,
        "config": serialize_config(cfg),
        "elapsed_s": report.elapsed_s,
    })
    return EXIT_OK


def cmd_ablate(args):
    cfg = load_config(args.config)
    out_dir = _resolve_output_dir(cfg, args.output_dir)
    rows = evaluation.ablation_grid(cfg)
    _require_finite((r.final_loss for r in rows), "ablation grid")
    with open(os.path.join(out_dir, "ablation.csv"), "w",
              encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["mode", "seed", "identity_sim", "prompt_sim",
                         "final_loss", "time_s"])
        for r in rows:
            writer.writerow([r.mode, r.seed, repr(r.identity_sim),
                             repr(r.prompt_sim), repr(r.final_loss),
                             repr(r.time_s)])
    return EXIT_OK


def cmd_gradcheck(args):
    cfg = load_config(args.config)
    out_dir = _resolve_output_dir(cfg, args.output_dir)
    report = gradcheck.check_gradients(gradcheck.downscaled_config(cfg.seed))
    _write_json(os.path.join(out_dir, "gradcheck.json"), report)
    if not report["passed"]:
        print("gradient audit failed for: " + ", ".join(report["failing"]),
              file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def cmd_align(args):
    cfg = load_config(args.config)
    out_dir = _resolve_output_dir(cfg, args.output_dir)
    reports = evaluation.alignment_suite(cfg)
    _require_finite((r.dist_naive for r in reports), "alignment distances")
    _require_finite((r.dist_enhanced for r in reports), "alignment distances")
    _write_json(os.path.join(out_dir, "alignment.json"), {
        "dist_naive": float(np.mean([r.dist_naive for r in reports])),
        "dist_enhanced": float(np.mean([r.dist_enhanced for r in reports])),
        "seeds": [asdict(r) for r in reports],
    })
    return EXIT_OK


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="anchordiff",
        description="Identity personalization experiments for a toy denoiser.")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run one personalization")
    train.add_argument("config", help="path to a sectioned key = value config")
    train.add_argument("--seed", type=int, help="override the config seed")
    train.add_argument("--mode", choices=MODES, help="override the ablation mode")
    train.add_argument("--steps", type=int, help="override the step count")
    train.add_argument("--learning-rate", type=float, help="override the peak rate")
    train.add_argument("--optimizer", help="override the optimizer name")
    train.add_argument("--output-dir", help="where to write results")
    train.set_defaults(func=cmd_train)

    ablate = sub.add_parser("ablate", help="retrain every mode across seeds")
    ablate.add_argument("config")
    ablate.add_argument("--output-dir")
    ablate.set_defaults(func=cmd_ablate)

    grad = sub.add_parser("gradcheck", help="audit gradients on a small model")
    grad.add_argument("config")
    grad.add_argument("--output-dir")
    grad.set_defaults(func=cmd_gradcheck)

    align = sub.add_parser("align", help="compare concept-to-face distances")
    align.add_argument("config")
    align.add_argument("--output-dir")
    align.set_defaults(func=cmd_align)
    return parser


def entry(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(entry())
