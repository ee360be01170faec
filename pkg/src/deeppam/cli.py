"""Command-line entry point: ``deeppam {simulate,fit,evaluate,experiment}``.

Exit codes: 0 success, 1 usage or configuration error, 2 numeric or
convergence failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import evaluation as ev
from .deepnet import TrainingError, fit_deeppam
from .experiment import (MODELS, ExperimentConfig, class_offsets, fit_structured,
                         hazard_curves, load_dataset, model_from_json,
                         model_name, model_to_json, run_experiment, save_dataset, score_models,
                         write_brier_csv, write_hazard_csv, write_ibs_csv)
from .pam import FittingError, NumericError
from .synth import generate_dataset

logger = logging.getLogger("deeppam")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


def load_config(args) -> ExperimentConfig:
    """Config file (if any) overridden by command-line flags."""
    raw = {}
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    sim = dict(raw.get("sim", {}))
    train = dict(raw.get("train", {}))
    for flag, key in (("n_train", "n_train"), ("n_val", "n_val"), ("n_test", "n_test"),
                      ("n_points", "n_points")):
        if getattr(args, flag, None) is not None:
            sim[key] = getattr(args, flag)
    if getattr(args, "seed", None) is not None:
        sim["seed"] = args.seed
        train["seed"] = args.seed
    if getattr(args, "max_epochs", None) is not None:
        train["max_epochs"] = args.max_epochs
    raw["sim"], raw["train"] = sim, train
    if getattr(args, "replicates", None) is not None:
        raw["n_replicates"] = args.replicates
    if getattr(args, "models", None):
        raw["models"] = args.models
    if getattr(args, "out", None) is not None:
        raw["output_dir"] = args.out
    try:
        return ExperimentConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def cmd_simulate(args) -> int:
    cfg = load_config(args)
    train, val, test = generate_dataset(cfg.sim)
    manifest = save_dataset(Path(args.out), {"train": train, "val": val, "test": test}, cfg.sim)
    print(json.dumps(manifest["counts"]))
    return EXIT_OK


def _dataset(path):
    if path is None or not (Path(path) / "manifest.json").exists():
        raise UsageError(f"no dataset at {path}")
    return load_dataset(Path(path))


def cmd_fit(args) -> int:
    cfg = load_config(args)
    splits, sim = _dataset(args.data)
    cfg = dataclasses.replace(cfg, sim=sim)
    train, val = splits["train"], splits["val"]
    if args.model == "deeppam":
        if any(r.cloud is None for r in train + val):
            raise UsageError("deeppam needs point clouds for every training and validation subject")
        warm = fit_structured("pam_baseline", train, val, cfg)
        train_cfg = dataclasses.replace(cfg.train, jitter=sim.noise_halfwidth)
        model = fit_deeppam(train, val, train_cfg, warm)
        ok = warm.converged
    elif args.model in ("pam_baseline", "pam_correct"):
        model = fit_structured(args.model, train, val, cfg)
        ok = model.converged
    else:
        raise UsageError(f"cannot fit model kind {args.model!r}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(model_to_json(args.model, model))
    if args.model == "deeppam":
        log = out.with_suffix(".log.csv")
        log.write_text("epoch,train_nll,val_nll\n" + "".join(
            f"{e['epoch']},{e['train_nll']:.6f},{e['val_nll']:.6f}\n" for e in model.train_log))
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_evaluate(args) -> int:
    splits, sim = _dataset(args.data)
    train, test = splits["train"], splits["test"]
    fitted = {"km": ev.km_of_records(train)}
    for path in args.model_files:
        try:
            model = model_from_json(Path(path).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read model {path}: {exc}") from exc
        fitted[model_name(model)] = model
    curves = {}
    scores = score_models(fitted, train, test, curves)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ibs_csv(out / "ibs.csv", scores)
    write_brier_csv(out / "brier.csv", curves)
    offsets = {}
    for name, model in fitted.items():
        if name != "km":
            write_hazard_csv(out / f"hazard_{name}.csv", hazard_curves(model, test, sim))
            offsets[name] = class_offsets(model, test)
    (out / "summary.json").write_text(json.dumps({**scores, "offsets": offsets},
                                                 indent=1, sort_keys=True))
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = load_config(args)
    out = Path(cfg.output_dir)
    results, ok = run_experiment(cfg, out)
    if results:
        print((out / "table2.csv").read_text(), end="")
    return EXIT_OK if ok and len(results) == cfg.n_replicates else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deeppam", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON experiment config; flags override its keys")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--n-points", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit one model on a dataset")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory from `simulate`")
    p.add_argument("--model", required=True, choices=[m for m in MODELS if m != "km"])
    p.add_argument("--out", required=True, help="model JSON path")
    p.add_argument("--max-epochs", type=int)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("evaluate", help="score fitted models on the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--model", dest="model_files", nargs="+", required=True,
                   help="model JSON files")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="run the replicated benchmark")
    common(p)
    p.add_argument("--out", help="output directory")
    p.add_argument("--replicates", type=int)
    p.add_argument("--models", nargs="+", choices=MODELS)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--n-points", type=int)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FittingError, NumericError, TrainingError, FloatingPointError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ev.EvaluationError as exc:
        print(f"evaluation error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
