"""``qtlab`` command line.

Every subcommand reads the same JSON experiment config (defaults, then
``--config``, then flags and ``--set key=value`` overrides) and writes its
artifacts plus a ``manifest.json`` under ``--out``.

Exit codes: 0 success, 1 domain error (bad data, degenerate input, failed
stage), 2 usage error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
import time
from decimal import Decimal, InvalidOperation
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr
from threadpoolctl import threadpool_limits

from . import __version__
from .analysis import dynamic_range_report, summarize, write_site_csv
from .calibration import MinMax, calibrate_model, collect_stats, parse_method, saturation_sweep
from .config import load_config, model_config, outlier_objective, task_config, train_config
from .data import make_dataset
from .errors import ConfigurationError, QtlabError
from .model import ModelCheckpoint, ToyTransformer, inject_outliers, load_checkpoint, save_checkpoint
from .pipeline import DECOMPOSE_SAMPLES, experiment_pipeline, site_metric, write_manifest
from .trainer import evaluate, finetune, write_log

logger = logging.getLogger("qtlab")

COMMANDS = ("train", "finetune", "calibrate", "sweep", "analyze", "quantize-eval", "pipeline")
MAX_DECIMALS = 6


def threshold(text: str) -> float:
    """A fraction in (0, 1] written with at most six decimal places."""
    try:
        dec = Decimal(text)
    except InvalidOperation:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not dec.is_finite() or not Decimal(0) < dec <= Decimal(1):
        raise argparse.ArgumentTypeError(f"must lie in (0, 1], got {text}")
    if -dec.as_tuple().exponent > MAX_DECIMALS:
        raise argparse.ArgumentTypeError(f"at most {MAX_DECIMALS} decimal places, got {text}")
    return float(dec)


def unit_interval(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qtlab", description="Outlier-aware quantization experiments on a toy transformer.")
    parser.add_argument("--version", action="version", version=f"qtlab {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file, or the name of a bundled one (demo, quick)")
    common.add_argument("--out", default="qtlab-out", help="output directory (default: %(default)s)")
    common.add_argument("--seed", type=int, help="first seed; a multi-seed list is shifted to start here")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, e.g. finetune.steps=50 (repeatable)")
    common.add_argument("--steps", type=int, help="training steps (baseline for train, fine-tuning otherwise)")
    common.add_argument("--batches", type=int, help="calibration batches (config default 10)")
    common.add_argument("--batch-size", type=int, help="calibration batch size (config default 100)")
    common.add_argument("--checkpoint", help="start from this checkpoint instead of training a baseline")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    quant = argparse.ArgumentParser(add_help=False)
    quant.add_argument("--bits", type=int, help="bit width")
    quant.add_argument("--method", choices=("minmax", "ema", "percentile", "omse"), help="calibration method")
    quant.add_argument("--p", type=threshold, help="percentile / saturation threshold, up to 6 decimals")

    tune = argparse.ArgumentParser(add_help=False)
    tune.add_argument("--alpha", type=unit_interval, help="initial outlier-loss weight")
    tune.add_argument("--schedule", choices=("constant", "linear", "cosine"), help="alpha decay schedule")

    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    helps = {
        "train": "train a baseline model from scratch",
        "finetune": "fine-tune with the blended task/outlier objective",
        "calibrate": "calibrate activation ranges and write calibration.json",
        "sweep": "accuracy and error split across saturation thresholds",
        "analyze": "per-block dynamic ranges and per-site error splits",
        "quantize-eval": "calibrate, fake-quantize and evaluate",
        "pipeline": "run the full paired experiment and write the report bundle",
    }
    parents = {
        "train": [common],
        "finetune": [common, tune],
        "calibrate": [common, quant],
        "sweep": [common, quant],
        "analyze": [common, quant],
        "quantize-eval": [common, quant],
        "pipeline": [common, quant, tune],
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=parents[name], help=helps[name], description=helps[name])
    return parser


def _flag_overrides(args) -> list:
    """Translate convenience flags into dotted overrides (applied after ``--set``)."""
    out = []
    get = lambda name: getattr(args, name, None)
    if get("steps") is not None:
        section = "baseline" if args.command == "train" else "finetune"
        out.append(f"{section}.steps={args.steps}")
    if get("batches") is not None:
        out.append(f"calibration.batches={args.batches}")
    if get("batch_size") is not None:
        out.append(f"calibration.batch_size={args.batch_size}")
    if get("alpha") is not None:
        out.append(f"outlier_loss.alpha={args.alpha}")
    if get("schedule") is not None:
        out.append(f'outlier_loss.schedule="{args.schedule}"')
    if get("p") is not None:
        out.append(f"calibration.p={args.p!r}")
        out.append(f"analysis.threshold={args.p!r}")
    if args.command == "pipeline":
        if get("bits") is not None:
            out.append(f"bits=[{args.bits}]")
        if get("method") is not None:
            out.append(f'calibration.methods=["{args.method}"]')
    return out


def _resolve_config(args) -> dict:
    config = load_config(args.config, list(args.overrides) + _flag_overrides(args))
    if args.seed is not None:
        n = len(config["seeds"])
        config["seeds"] = [args.seed + i for i in range(n)]
    return config


# subcommands


def _source_model(args, config, data, inject: bool = True):
    """The model a command starts from: a checkpoint, or a freshly trained (and injected) baseline."""
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint).to_model()
        if model.config.seq_len != data.x.shape[1] or model.config.input_dim != data.x.shape[2]:
            raise ConfigurationError("checkpoint input shape does not match the configured data")
        return model
    seed = config["seeds"][0]
    model = ToyTransformer(model_config(config, seed))
    cfg = train_config(config["baseline"], seed)
    if cfg.steps > 0:
        model = finetune(model, data, cfg).model
    inj = config["injection"]
    if inject and inj["magnitude"] > 1.0:
        model = inject_outliers(model, inj["magnitude"], inj["fraction"], seed=seed, targets=inj["targets"])
    return model


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _method(args, config):
    cal = config["calibration"]
    name = args.method or "minmax"
    return parse_method(name, p=cal["p"], decay=cal["ema_decay"], grid_points=cal["grid_points"])


def cmd_train(args, config, out: Path) -> None:
    seed = config["seeds"][0]
    data = make_dataset(task_config(config, seed))
    model = ToyTransformer(model_config(config, seed))
    run = finetune(model, data, train_config(config["baseline"], seed))
    write_log(out / "train.ndjson", run.log)
    save_checkpoint(run.checkpoint, out / "checkpoint")
    _write_json(out / "metrics.json", {"seed": seed, "steps": config["baseline"]["steps"],
                                       "fp_accuracy": evaluate(run.model, data, decompose=False).accuracy})


def cmd_finetune(args, config, out: Path) -> None:
    seed = config["seeds"][0]
    data = make_dataset(task_config(config, seed))
    model = _source_model(args, config, data)
    loss = outlier_objective(config)
    run = finetune(model, data, train_config(config["finetune"], seed + 1000, loss))
    write_log(out / "finetune.ndjson", run.log)
    save_checkpoint(run.checkpoint, out / "checkpoint")
    _write_json(out / "metrics.json", {
        "seed": seed,
        "outlier_loss": loss.to_json(),
        "fp_accuracy_before": evaluate(model, data, decompose=False).accuracy,
        "fp_accuracy_after": evaluate(run.model, data, decompose=False).accuracy,
        "site_metric_before": site_metric(model, data),
        "site_metric_after": site_metric(run.model, data),
    })


def _calibrated(args, config, data, model):
    cal = config["calibration"]
    stats = collect_stats(model, data.calibration_batches(cal["batches"], cal["batch_size"]))
    bits = args.bits or 8
    method = _method(args, config)
    return calibrate_model(model, stats, method, bits), method, bits


def _calibration_rows(q, method, bits) -> list:
    rows = []
    for site_id in q.fp_model.site_ids:
        spec = q.qconfig.activations[site_id]
        rows.append({"site_id": site_id, **method.describe(), "bits": bits, "range": spec.clip, "scale": spec.scale})
    return rows


def cmd_calibrate(args, config, out: Path) -> None:
    seed = config["seeds"][0]
    data = make_dataset(task_config(config, seed))
    model = _source_model(args, config, data)
    q, method, bits = _calibrated(args, config, data, model)
    _write_json(out / "calibration.json", _calibration_rows(q, method, bits))
    save_checkpoint(ModelCheckpoint.from_model(model, q.qconfig, calibrated_with=method.describe()), out / "checkpoint")


def cmd_quantize_eval(args, config, out: Path) -> None:
    seed = config["seeds"][0]
    data = make_dataset(task_config(config, seed))
    model = _source_model(args, config, data)
    q, method, bits = _calibrated(args, config, data, model)
    fp = evaluate(model, data, decompose=False).accuracy
    res = evaluate(q, data, decompose=True, kl=True, decompose_samples=DECOMPOSE_SAMPLES)
    write_site_csv(out / "sites.csv", res.decompositions.values())
    _write_json(out / "calibration.json", _calibration_rows(q, method, bits))
    _write_json(out / "eval.json", {
        "seed": seed,
        "method": method.describe(),
        "bits": bits,
        "fp_accuracy": fp,
        "quant_accuracy": res.accuracy,
        "accuracy_drop": fp - res.accuracy,
        "errors": summarize(res.decompositions.values()),
    })


def cmd_sweep(args, config, out: Path) -> None:
    seed = config["seeds"][0]
    data = make_dataset(task_config(config, seed))
    model = _source_model(args, config, data)
    cal, sw = config["calibration"], config["sweep"]
    bits = args.bits or sw["bits"]
    points = saturation_sweep(model, data, sw["thresholds"], bits, batches=cal["batches"],
                              batch_size=cal["batch_size"], kl=True, decompose_samples=DECOMPOSE_SAMPLES)
    rows = []
    for p in points:
        agg = p.summary
        rows.append({"threshold": p.threshold, "accuracy": p.accuracy, **{k: agg[k] for k in
                     ("saturation_error", "precision_error", "precision_share", "kl")}})
    cols = ("threshold", "accuracy", "saturation_error", "precision_error", "precision_share", "kl")
    with (out / "sweep.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    best = max(rows, key=lambda r: r["accuracy"])  # first (lowest) threshold wins a tie
    minmax = next((r for r in rows if r["threshold"] == 1.0), None)
    _write_json(out / "sweep.json", {"seed": seed, "bits": bits, "points": rows, "best": best, "minmax": minmax})


def cmd_analyze(args, config, out: Path) -> None:
    seed = config["seeds"][0]
    data = make_dataset(task_config(config, seed))
    model = _source_model(args, config, data, inject=bool(args.checkpoint))
    an, cal = config["analysis"], config["calibration"]
    bits = args.bits or an["bits"]
    stats = collect_stats(model, data.calibration_batches(cal["batches"], cal["batch_size"]))
    q = calibrate_model(model, stats, MinMax(), bits)
    report = dynamic_range_report(q, data, threshold=an["threshold"], bits=bits, samples=an["samples"])
    write_site_csv(out / "sites_saturated.csv", [s.saturated for s in report.sites])
    write_site_csv(out / "sites_full.csv", [s.full for s in report.sites])
    before = [b.range_before for b in report.blocks]
    rho = float(spearmanr(np.arange(len(before)), before).statistic) if len(before) > 1 else 0.0
    _write_json(out / "analysis.json", {
        **report.to_json(),
        "seed": seed,
        "spearman_rho": rho,
        "precision_reduced_sites": sum(s.saturated.precision_error < s.full.precision_error for s in report.sites),
        "sites": len(report.sites),
    })


def cmd_pipeline(args, config, out: Path) -> None:
    experiment_pipeline(config, out, argv=args.argv)


HANDLERS = {
    "train": cmd_train,
    "finetune": cmd_finetune,
    "calibrate": cmd_calibrate,
    "sweep": cmd_sweep,
    "analyze": cmd_analyze,
    "quantize-eval": cmd_quantize_eval,
    "pipeline": cmd_pipeline,
}


def _thread_limit():
    raw = os.environ.get("QTLAB_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"QTLAB_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigurationError(f"QTLAB_THREADS must be a positive integer, got {raw!r}")
    return threadpool_limits(limits=n)


def run(argv=None) -> int:
    """Parse ``argv``, run the subcommand and return its exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help / --version exit 0, usage errors exit 2
        return int(exc.code or 0)
    args.argv = argv
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        with _thread_limit():
            config = _resolve_config(args)
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            HANDLERS[args.command](args, config, out)
            if args.command != "pipeline":
                write_manifest(out, args.command, config, argv=argv, started=started)
    except QtlabError as exc:
        print(f"qtlab {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"qtlab {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
