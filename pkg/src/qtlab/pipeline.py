"""End-to-end experiment: train, inject outliers, fine-tune two arms, calibrate, evaluate, report.

For every seed the pipeline

1. trains a baseline toy model on the synthetic task (``train``);
2. plants channel-wise outliers in a copy (``inject``);
3. fine-tunes the injected model twice from the same batches, once with the
   plain task loss (arm ``baseline``) and once with the blended
   outlier-driven objective (arm ``outlier``);
4. calibrates every arm with each configured method and evaluates it at each
   bit width;
5. sweeps saturation thresholds on the injected model and measures per-block
   dynamic ranges of the trained baseline.

Per-seed rows go to ``per_seed.csv``; ``results.csv`` holds one row per
(arm, method, bits) with medians over seeds.  ``summary.json`` follows the
published schema ``qtlab/schemas/summary.schema.json``.  Wall-clock times are
written only to ``manifest.json`` so every other file is reproducible byte
for byte.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np
from scipy.stats import spearmanr

from . import __version__
from .analysis import dynamic_range_report, summarize, write_site_csv
from .calibration import MinMax, calibrate_model, collect_stats, saturation_sweep
from .config import load_schema, methods, model_config, outlier_objective, task_config, train_config
from .data import make_dataset
from .errors import QtlabError, StageError
from .model import ToyTransformer, inject_outliers
from .trainer import batch_losses, evaluate, finetune, write_log

logger = logging.getLogger(__name__)

__all__ = ["experiment_pipeline", "PipelineResult", "site_metric", "RESULT_COLUMNS", "ARMS"]

ARMS = ("baseline", "outlier")
RESULT_COLUMNS = (
    "arm",
    "method",
    "bits",
    "fp_accuracy",
    "quant_accuracy",
    "accuracy_drop",
    "saturation_error",
    "precision_error",
    "precision_share",
    "kl",
    "site_metric",
    "mean_range",
)
METRIC_SAMPLES = 200
DECOMPOSE_SAMPLES = 200  # error splits per site; accuracy always uses the whole eval split


@dataclass
class PipelineResult:
    out_dir: Path
    summary: dict
    per_seed: list
    results: list
    timings: dict = field(default_factory=dict)


class _Stages:
    """Runs named stages, tags their failures and keeps wall-clock timings."""

    def __init__(self):
        self.timings = {}

    @contextmanager
    def __call__(self, name: str):
        start = time.perf_counter()
        try:
            yield
        except StageError:
            raise
        except QtlabError as exc:
            raise StageError(name, exc) from exc
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - start


def site_metric(model, data, samples: int = METRIC_SAMPLES) -> float:
    """Mean over sites and the first ``samples`` eval samples of ``(max|A| - median|A|) / std(A)``."""
    x, y = data.x_eval[:samples], data.y_eval[:samples]
    _, _, out, _ = batch_losses(model, x, y, data.num_classes, 0.0)
    return out.item()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _write_csv(path: Path, rows: list, columns) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row[k]) for k in columns})


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _median(values) -> float:
    return float(np.median(np.asarray(values, dtype=np.float64)))


def _run_seed(config: dict, seed: int, out: Path, stage: _Stages) -> dict:
    """Everything for one seed; returns rows and the numbers the summary needs."""
    with stage("data"):
        data = make_dataset(task_config(config, seed))
    base_cfg = train_config(config["baseline"], seed)
    with stage("train"):
        model = ToyTransformer(model_config(config, seed))
        if base_cfg.steps > 0:
            run = finetune(model, data, base_cfg)
            write_log(out / "logs" / f"train_seed{seed}.ndjson", run.log)
            model = run.model
        base_acc = evaluate(model, data, decompose=False).accuracy
    inj_cfg = config["injection"]
    with stage("inject"):
        injected = inject_outliers(model, inj_cfg["magnitude"], inj_cfg["fraction"], seed=seed,
                                   targets=inj_cfg["targets"])
    ft_seed = seed + 1000
    arms = {}
    if config["finetune"]["steps"] > 0:
        for arm in ARMS:
            outlier = outlier_objective(config) if arm == "outlier" else None
            with stage(f"finetune:{arm}"):
                run = finetune(injected, data, train_config(config["finetune"], ft_seed, outlier))
                write_log(out / "logs" / f"{arm}_seed{seed}.ndjson", run.log)
                arms[arm] = run.model
    else:
        arms["injected"] = injected

    cal = config["calibration"]
    calib_batches = data.calibration_batches(cal["batches"], cal["batch_size"])
    rows, calib_rows, arm_info = [], [], {}
    for arm, arm_model in arms.items():
        with stage(f"calibrate:{arm}"):
            stats = collect_stats(arm_model, calib_batches)
            fp_acc = evaluate(arm_model, data, decompose=False).accuracy
            metric = site_metric(arm_model, data)
            mean_range = float(np.mean([s.max_abs for s in stats.values()]))
        arm_info[arm] = {"fp_accuracy": fp_acc, "site_metric": metric, "mean_range": mean_range}
        for method in methods(config):
            for bits in config["bits"]:
                with stage(f"evaluate:{arm}"):
                    q = calibrate_model(arm_model, stats, method, bits)
                    res = evaluate(q, data, decompose=True, kl=True, decompose_samples=DECOMPOSE_SAMPLES)
                agg = summarize(res.decompositions.values())
                rows.append({
                    "seed": seed,
                    "arm": arm,
                    "method": method.name,
                    "bits": bits,
                    "fp_accuracy": fp_acc,
                    "quant_accuracy": res.accuracy,
                    "accuracy_drop": fp_acc - res.accuracy,
                    "saturation_error": agg["saturation_error"],
                    "precision_error": agg["precision_error"],
                    "precision_share": agg["precision_share"],
                    "kl": agg["kl"],
                    "site_metric": metric,
                    "mean_range": mean_range,
                })
                write_site_csv(out / "sites" / f"{arm}_{method.name}_b{bits}_seed{seed}.csv",
                               res.decompositions.values())
                for site_id in arm_model.site_ids:
                    spec = q.qconfig.activations[site_id]
                    calib_rows.append({
                        "seed": seed,
                        "arm": arm,
                        "site_id": site_id,
                        **method.describe(),
                        "bits": bits,
                        "range": spec.clip,
                        "scale": spec.scale,
                    })

    sw = config["sweep"]
    with stage("sweep"):
        points = saturation_sweep(injected, data, sw["thresholds"], sw["bits"],
                                  batches=cal["batches"], batch_size=cal["batch_size"],
                                  decompose_samples=DECOMPOSE_SAMPLES)
    sweep_rows = []
    for p in points:
        agg = p.summary
        sweep_rows.append({
            "seed": seed,
            "threshold": p.threshold,
            "accuracy": p.accuracy,
            "saturation_error": agg["saturation_error"],
            "precision_error": agg["precision_error"],
            "precision_share": agg["precision_share"],
        })

    an = config["analysis"]
    with stage("analyze"):
        stats = collect_stats(model, calib_batches)
        q = calibrate_model(model, stats, MinMax(), an["bits"])
        report = dynamic_range_report(q, data, threshold=an["threshold"], bits=an["bits"], samples=an["samples"])
    range_rows = [{"seed": seed, "block": b.block_index, "range_before": b.range_before,
                   "range_after": b.range_after, "kl": b.kl} for b in report.blocks]
    before = [b.range_before for b in report.blocks]
    rho = float(spearmanr(np.arange(len(before)), before).statistic) if len(before) > 1 else 0.0
    reduced = [s.saturated.precision_error < s.full.precision_error for s in report.sites]
    return {
        "rows": rows,
        "calibration": calib_rows,
        "sweep": sweep_rows,
        "ranges": range_rows,
        "arms": arm_info,
        "baseline_accuracy": base_acc,
        "spearman_rho": rho,
        "precision_reduced_fraction": float(np.mean(reduced)) if reduced else 0.0,
    }


def _aggregate(per_seed: list) -> list:
    keys = []
    for r in per_seed:
        k = (r["arm"], r["method"], r["bits"])
        if k not in keys:
            keys.append(k)
    out = []
    for arm, method, bits in keys:
        group = [r for r in per_seed if (r["arm"], r["method"], r["bits"]) == (arm, method, bits)]
        row = {"arm": arm, "method": method, "bits": bits}
        for col in RESULT_COLUMNS[3:]:
            row[col] = _median([r[col] for r in group])
        out.append(row)
    return out


def _sweep_summary(sweep_rows: list, bits: int) -> dict:
    """Median accuracy and precision share per threshold, and the best threshold below 1.0 on that curve."""
    thresholds = sorted({r["threshold"] for r in sweep_rows})
    acc = [_median([r["accuracy"] for r in sweep_rows if r["threshold"] == t]) for t in thresholds]
    share = [_median([r["precision_share"] for r in sweep_rows if r["threshold"] == t]) for t in thresholds]
    out = {
        "bits": bits,
        "thresholds": thresholds,
        "median_accuracy": acc,
        "median_precision_share": share,
        "best_threshold": None,
        "accuracy_gain": None,
        "precision_share_at_best": None,
    }
    inner = [i for i, t in enumerate(thresholds) if t < 1.0]
    if inner and thresholds[-1] == 1.0:
        best = max(inner, key=lambda i: (acc[i], thresholds[i]))  # ties go to the milder clip
        out.update(best_threshold=thresholds[best], accuracy_gain=acc[best] - acc[-1],
                   precision_share_at_best=share[best])
    return out


def _comparison(per_seed: list, seed_infos: list, bits_list) -> dict | None:
    if not all("outlier" in s["arms"] for s in seed_infos):
        return None
    base = [s["arms"]["baseline"] for s in seed_infos]
    qt = [s["arms"]["outlier"] for s in seed_infos]
    m0, m1 = _median([b["site_metric"] for b in base]), _median([q["site_metric"] for q in qt])
    drops = {}
    for bits in bits_list:
        sel = [r for r in per_seed if r["method"] == "minmax" and r["bits"] == bits]
        if sel:
            drops[str(bits)] = {
                arm: _median([r["accuracy_drop"] for r in sel if r["arm"] == arm]) for arm in ARMS
            }
    return {
        "site_metric": {"baseline": m0, "outlier": m1, "reduction": 1.0 - m1 / m0 if m0 > 0 else 0.0},
        "fp_accuracy": {
            "baseline": _median([b["fp_accuracy"] for b in base]),
            "outlier": _median([q["fp_accuracy"] for q in qt]),
        },
        "mean_range": {
            "baseline": _median([b["mean_range"] for b in base]),
            "outlier": _median([q["mean_range"] for q in qt]),
        },
        "minmax_accuracy_drop": drops,
    }


def experiment_pipeline(config: dict, out_dir, *, argv=None) -> PipelineResult:
    """Run the full experiment for every seed in ``config`` and write the report bundle.

    Failures inside a stage surface as :class:`~qtlab.errors.StageError`
    naming the stage; files written before the failure are kept.
    """
    out = Path(out_dir)
    for sub in ("logs", "sites"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    stage = _Stages()
    started = time.time()
    seeds = list(config["seeds"])
    infos = []
    for seed in seeds:
        logger.info("seed %d", seed)
        infos.append(_run_seed(config, seed, out, stage))
    per_seed = [r for s in infos for r in s["rows"]]
    results = _aggregate(per_seed)
    with stage("report"):
        _write_csv(out / "per_seed.csv", per_seed, ("seed",) + RESULT_COLUMNS)
        _write_csv(out / "results.csv", results, RESULT_COLUMNS)
        sweep_rows = [r for s in infos for r in s["sweep"]]
        _write_csv(out / "sweep.csv", sweep_rows,
                   ("seed", "threshold", "accuracy", "saturation_error", "precision_error", "precision_share"))
        range_rows = [r for s in infos for r in s["ranges"]]
        _write_csv(out / "ranges.csv", range_rows, ("seed", "block", "range_before", "range_after", "kl"))
        _write_json(out / "calibration.json", [r for s in infos for r in s["calibration"]])
        summary = {
            "version": __version__,
            "seeds": seeds,
            "arms": sorted(infos[0]["arms"]),
            "baseline_accuracy": _median([s["baseline_accuracy"] for s in infos]),
            "results": results,
            "sweep": _sweep_summary(sweep_rows, config["sweep"]["bits"]),
            "ranges": {
                "threshold": config["analysis"]["threshold"],
                "spearman_rho": _median([s["spearman_rho"] for s in infos]),
                "precision_reduced_fraction": _median([s["precision_reduced_fraction"] for s in infos]),
                "per_seed": [
                    {"seed": seed, "spearman_rho": s["spearman_rho"],
                     "precision_reduced_fraction": s["precision_reduced_fraction"]}
                    for seed, s in zip(seeds, infos)
                ],
            },
            "comparison": _comparison(per_seed, infos, config["bits"]),
            "config": config,
        }
        try:
            jsonschema.validate(summary, load_schema("summary.schema.json"))
        except jsonschema.ValidationError as exc:
            raise StageError("report", f"summary does not match its schema: {exc.message}") from exc
        _write_json(out / "summary.json", summary)
    manifest = write_manifest(out, "pipeline", config, argv=argv, started=started, timings=stage.timings)
    return PipelineResult(out, summary, per_seed, results, manifest["timings"])


def write_manifest(out: Path, command: str, config: dict, *, argv=None, started=None, timings=None) -> dict:
    """Run record; the only output that carries timestamps and timings."""
    out = Path(out)
    files = sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and p != out / "manifest.json")
    now = time.time()
    manifest = {
        "command": command,
        "argv": list(argv) if argv is not None else None,
        "version": __version__,
        "config": config,
        "files": files,
        "started": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(started or now)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(now)),
        "elapsed_seconds": now - (started or now),
        "timings": {k: round(v, 3) for k, v in sorted((timings or {}).items())},
    }
    _write_json(out / "manifest.json", manifest)
    return manifest
