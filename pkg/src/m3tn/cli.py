"""Command-line entry point: generate / train / evaluate / search / complexity / sweep.

Exit codes: 0 success, 2 configuration or data error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .data import DatasetSchema, Standardizer, SyntheticSpec, generate_synthetic, load_csv, save_csv, save_truth_csv
from .errors import ConfigError, DataError, MetricError, TrainingError
from .experiment import (
    ExperimentConfig,
    complexity_report,
    expert_sweep,
    hyper_search,
    load_dataset,
    prepare_splits,
    run_protocol,
    write_json,
    write_rows_csv,
)
from .metrics import evaluate, write_curve_csv
from .models import load_checkpoint, predict_uplift, save_checkpoint

log = logging.getLogger("m3tn")


def _jobs(args) -> int:
    if args.jobs is not None:
        return args.jobs
    env = os.environ.get("UPLIFT_JOBS")
    try:
        return int(env) if env else 1
    except ValueError:
        raise ConfigError(f"UPLIFT_JOBS must be an integer, got {env!r}") from None


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    seed = getattr(args, "seed", None)
    if seed is None and os.environ.get("UPLIFT_SEED"):
        try:
            seed = int(os.environ["UPLIFT_SEED"])
        except ValueError:
            raise ConfigError(f"UPLIFT_SEED must be an integer, got {os.environ['UPLIFT_SEED']!r}") from None
    if seed is not None:
        cfg.seeds = [seed]
    return cfg


def _out_dir(path: str | None, default: Path) -> Path:
    out = Path(path) if path else default
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(args) -> int:
    try:
        raw = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read spec {args.spec}: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError("spec must be a JSON object")
    try:
        spec = SyntheticSpec.from_dict(raw)
    except TypeError as e:
        raise ConfigError(f"spec: {e}") from None
    ds = generate_synthetic(spec)
    save_csv(ds, args.out)
    if args.truth_out:
        save_truth_csv(ds, args.truth_out)
    if args.schema_out:
        write_json(args.schema_out, ds.schema.to_list())
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    ds = load_dataset(cfg, args.data)
    splits = prepare_splits(cfg, ds)
    result = run_protocol(cfg, ds, _jobs(args), splits)
    # checkpoint the seed with the best validation objective (first on ties)
    best = int(np.argmax([r.best_validation for r in result.runs]))
    pre = splits.preprocessing()
    pre["metrics"] = {"grid_size": cfg.metrics.grid_size, "num_bins": cfg.metrics.num_bins}
    Path(args.out).resolve().parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(args.out, result.models[best], pre)
    out = _out_dir(args.report_dir, Path(args.out).resolve().parent)
    doc = result.to_dict(cfg)
    doc["checkpoint_seed"] = result.runs[best].seed
    write_json(out / "report.json", doc)
    for k, curve in result.runs[best].report.curves.items():
        write_curve_csv(curve, out / f"qini_curve_{k}.csv")
    for r in result.runs:
        log.info("seed %d: %d epochs, %.2fs training, mQini %.4f", r.seed, len(r.loss_trace),
                 r.train_seconds, r.report.mQini)
    return 0


def cmd_evaluate(args) -> int:
    model, pre = load_checkpoint(args.checkpoint)
    schema = DatasetSchema.from_list(pre["schema"])
    ds = load_csv(args.data, schema, categories=pre.get("categories", {}),
                  num_treatments=pre.get("num_treatments"), strict=True)
    if "standardizer" in pre:
        ds = Standardizer.from_dict(pre["standardizer"]).transform(ds)
    pred = predict_uplift(model, ds)
    cfg_metrics = pre.get("metrics", {})
    report = evaluate(pred, ds.t, ds.y, args.grid_size or cfg_metrics.get("grid_size", 100),
                      args.num_bins or cfg_metrics.get("num_bins", 10))
    doc = report.to_dict()
    text = json.dumps(doc, indent=2)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    if args.curves_dir:
        d = _out_dir(args.curves_dir, Path("."))
        for k, curve in report.curves.items():
            write_curve_csv(curve, d / f"qini_curve_{k}.csv")
    return 0


def cmd_search(args) -> int:
    cfg = _load_config(args)
    ds = load_dataset(cfg, args.data)
    splits = prepare_splits(cfg, ds)
    res = hyper_search(cfg, ds, _jobs(args), splits)
    out = _out_dir(args.out_dir, Path("."))
    write_rows_csv(out / "trials.csv", res.trials)
    write_json(out / "best_config.json", res.best_config.to_dict())
    final = run_protocol(res.best_config, ds, _jobs(args), splits)
    doc = final.to_dict(res.best_config)
    doc["best_params"] = res.best_params
    write_json(out / "report.json", doc)
    return 0


def cmd_complexity(args) -> int:
    cfg = _load_config(args)
    ds = load_dataset(cfg, args.data)
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    if not kinds:
        raise ConfigError("--kinds needs at least one model kind")
    rows = complexity_report(cfg, ds, kinds, args.epochs)
    out = _out_dir(args.out_dir, Path("."))
    write_rows_csv(out / "complexity.csv", rows)
    write_json(out / "complexity.json", rows)
    return 0


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of integers, got {text!r}") from None


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    ds = load_dataset(cfg, args.data)
    rows = expert_sweep(cfg, ds, _int_list(args.experts), _jobs(args))
    out = _out_dir(args.out_dir, Path("."))
    write_rows_csv(out / "sweep.csv", rows)
    spread = max(r["mQini_mean"] for r in rows) - min(r["mQini_mean"] for r in rows)
    log.info("mQini spread across expert counts: %.4f", spread)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="m3tn", description="Multi-valued treatment uplift modeling.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic randomized-experiment dataset")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--truth-out")
    g.add_argument("--schema-out", help="also write the matching schema as JSON")
    g.set_defaults(func=cmd_generate)

    def experiment_args(sp):
        sp.add_argument("--config", required=True)
        sp.add_argument("--data", help="CSV path; overrides the config's data source")
        sp.add_argument("--seed", type=int, help="run a single seed (overrides UPLIFT_SEED)")
        sp.add_argument("--jobs", type=int, help="parallel runs (overrides UPLIFT_JOBS)")

    t = sub.add_parser("train", help="train over the config's seeds and checkpoint the best")
    experiment_args(t)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--report-dir", help="where report.json and qini curves go (default: checkpoint dir)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint on a CSV and print the report")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.add_argument("--curves-dir")
    e.add_argument("--grid-size", type=int)
    e.add_argument("--num-bins", type=int)
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("search", help="random hyperparameter search on validation mQini")
    experiment_args(s)
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_search)

    c = sub.add_parser("complexity", help="parameter counts and training time per model kind")
    experiment_args(c)
    c.add_argument("--kinds", default="M3TN,M3TN_NoMMoE,M3TN_NoRM,SLearner,TLearner,SharedBottomMultiHead,SharedBottomMultiHead_MMD")
    c.add_argument("--epochs", type=int, default=20)
    c.add_argument("--out-dir")
    c.set_defaults(func=cmd_complexity)

    w = sub.add_parser("sweep", help="protocol metrics per number of experts")
    experiment_args(w)
    w.add_argument("--experts", default="1,2,4,8")
    w.add_argument("--out-dir")
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, DataError, MetricError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TrainingError as e:
        print(f"training failed: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
