"""
Subcommand bodies. Each returns a JSON-compatible summary; app/main.py prints it
and app/cli/runner.py turns exceptions into exit codes.
"""
from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import pandas as pd

from app.cli.schemas import JobConfig
from app.errors import ConfigError, IngestionFormatError
from app.experiment.protocol import apply_scaler, fit_scaler, read_ledger, run_protocol
from app.experiment.studies import ablate, ablation_summary, ablation_table, compare_models, scaling_summary, unlabeled_scaling_study
from app.experiment.training import predict, train_cox_mt, train_supervised_baseline
from app.logging_utils import get_logger
from app.metrics.service import concordance_index, export_km, stratify_and_logrank
from app.model.checkpoint import load_checkpoint, save_checkpoint
from extraction.archive import export_dataset_csv, load_dataset, save_dataset
from extraction.expression_pipeline import (
    DEFAULT_HOUSEKEEPING_GENES,
    ExpressionPipeline,
    assemble_dataset,
    load_clinical_csv,
    load_expression_csv,
    load_id_list,
)
from extraction.folds import split_validation
from extraction.patch_pipeline import PatchPipeline, average_patch_features
from extraction.schemas import IngestionReport, SurvivalDataset
from extraction.synthetic import SyntheticConfig, generate_patch_sets, generate_synthetic

logger = get_logger("CLI")


def _write_json(path: Path, document: Dict[str, Any]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(document, indent=2, sort_keys=True, default=str), encoding="utf-8")
    return path


def _dataset(job: JobConfig, path: Optional[str] = None) -> SurvivalDataset:
    path = path or job.dataset
    if not path:
        raise ConfigError("job config needs a 'dataset' archive path")
    ds, _ = load_dataset(path)
    return ds


# ----------------- ingest / synth ----------------- #

def cmd_ingest(expr_path: str, clinical_path: str, output: str, patch_dir: Optional[str] = None,
               reference_expr: Optional[str] = None, housekeeping_path: Optional[str] = None,
               unlabeled_ids_path: Optional[str] = None, unlabeled_expr_path: Optional[str] = None,
               top_k: Optional[int] = 4000,
               orientation: str = "samples_as_rows", dedup: bool = False, log: bool = True,
               image_only: bool = False) -> Dict[str, Any]:
    report = IngestionReport(expression_path=expr_path, clinical_path=clinical_path)
    matrix = load_expression_csv(expr_path, orientation=orientation, dedup=dedup, report=report)
    clinical = load_clinical_csv(clinical_path)
    reference = load_expression_csv(reference_expr, orientation=orientation) if reference_expr else None
    housekeeping = load_id_list(housekeeping_path) if housekeeping_path else DEFAULT_HOUSEKEEPING_GENES
    unlabeled = list(load_id_list(unlabeled_ids_path)) if unlabeled_ids_path else []

    pipeline = ExpressionPipeline(top_k=top_k or None, housekeeping_gene_ids=housekeeping, log=log)
    if reference is not None:
        matrix = pipeline.normalize(matrix, reference)
    if unlabeled_expr_path:
        # the extra cohort is scaled onto the (possibly normalized) labeled cohort, never the reverse
        extra = load_expression_csv(unlabeled_expr_path, orientation=orientation, dedup=dedup)
        matrix = pipeline.add_cohort(matrix, extra, report)
        unlabeled.extend(extra.sample_ids)
        report.extra["unlabeled_expression"] = str(unlabeled_expr_path)
    matrix = pipeline.run(matrix, report=report)
    ds = assemble_dataset(matrix, clinical, unlabeled, report)

    if patch_dir:
        sets = PatchPipeline().load_directory(patch_dir, ds.sample_ids)
        patches = tuple(sets[sid] for sid in ds.sample_ids)
        if image_only:
            student, teacher = average_patch_features(patches)
            ds = replace(ds, features=student, teacher_features=teacher,
                         feature_ids=tuple(f"patch_mean_{j}" for j in range(student.shape[1])))
            report.extra["model_input"] = "mean patch features"
        else:
            ds = replace(ds, patches=patches)
        report.extra["patch_dir"] = str(patch_dir)

    digest = save_dataset(ds, output, report)
    return {"archive": str(Path(output).with_suffix(".npz")), "sha256": digest,
            "status_counts": ds.status_counts(), "genes": ds.dim,
            "normalization_factor": report.normalization_factor,
            "dropped_genes": len(report.dropped_genes)}


def cmd_synth(config_path: str, output: str, max_patches: int = 0, patch_width: int = 1024,
              csv_dir: Optional[str] = None) -> Dict[str, Any]:
    path = Path(config_path)
    if not path.exists():
        raise IngestionFormatError("synthetic config not found", path=str(path))
    cfg = SyntheticConfig.model_validate_json(path.read_text(encoding="utf-8"))
    ds, beta = generate_synthetic(cfg)
    if max_patches > 0:
        ds = replace(ds, patches=generate_patch_sets(ds, width=patch_width, n_patches=(1, max_patches),
                                                     seed=cfg.seed + 1))
    report = IngestionReport(status_counts=ds.status_counts(), extra={"generator": "synthetic", "seed": str(cfg.seed)})
    digest = save_dataset(ds, output, report, beta=beta)
    truth = Path(output).with_suffix(".truth.json")
    _write_json(truth, {"config": cfg.model_dump(), "beta": beta.tolist(), "sha256": digest})
    if csv_dir:
        export_dataset_csv(ds, csv_dir)
    counts = ds.status_counts()
    labeled = counts["event"] + counts["censored"]
    return {"archive": str(Path(output).with_suffix(".npz")), "sha256": digest, "status_counts": counts,
            "censored_fraction": counts["censored"] / labeled if labeled else 0.0,
            "ground_truth": str(truth)}


# ----------------- train / km-export ----------------- #

def cmd_train(job: JobConfig) -> Dict[str, Any]:
    ds = _dataset(job)
    spec = job.model.resolve(ds)
    cfg = job.train
    out = job.output_path()

    labeled = np.flatnonzero(ds.labeled_mask)
    val = split_validation(ds, labeled, job.protocol.val_fraction, cfg.seed, stratified=True)
    train_rows = np.setdiff1d(np.arange(ds.n_samples), val)

    scaler: Dict[str, Any] = {}
    if cfg.standardize:
        fitted = fit_scaler(ds, train_rows)
        ds = apply_scaler(ds, fitted.mean_, fitted.scale_)
        scaler = {"scaler_mean": fitted.mean_.tolist(), "scaler_scale": fitted.scale_.tolist()}
    ds_train = ds.subset(train_rows)
    ds_val = ds.subset(val) if val.size else None

    trainer = train_supervised_baseline if job.protocol.baseline else train_cox_mt
    pair, trace = trainer(ds_train, cfg, spec, ds_val)
    which = "student" if job.protocol.baseline else cfg.evaluate_with

    train_labeled = np.flatnonzero(ds_train.labeled_mask)
    median_risk = float(np.median(predict(pair, ds_train, which, train_labeled)))
    extra = {"evaluate_with": which, "median_risk": median_risk, "train_config": cfg.model_dump(),
             "dataset": job.dataset, "baseline": job.protocol.baseline, **scaler}
    ckpt, _ = save_checkpoint(pair, out / "model.ckpt", extra=extra)

    out.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(trace.epochs).to_csv(out / "trace.csv", index=False, float_format="%.10g")
    summary = {"checkpoint": str(ckpt), "epochs_run": len(trace.epochs), "best_epoch": trace.best_epoch,
               "validation_c_index": trace.best_validation_c_index, "stopped_early": trace.stopped_early,
               "train_c_index": concordance_index(predict(pair, ds_train, which, train_labeled),
                                                  ds_train.times[train_labeled], ds_train.status[train_labeled])}
    _write_json(out / "train_summary.json", summary)
    _write_json(out / "job_config.json", job.model_dump(mode="json"))
    return summary


def cmd_km_export(dataset: str, checkpoint: str, output: str) -> Dict[str, Any]:
    """Median-risk strata of a trained model on a dataset, as KM step-curve CSVs."""
    ds, _ = load_dataset(dataset)
    pair, extra = load_checkpoint(checkpoint)
    if "scaler_mean" in extra:
        ds = apply_scaler(ds, extra["scaler_mean"], extra["scaler_scale"])
    which = extra.get("evaluate_with", "teacher")
    labeled = np.flatnonzero(ds.labeled_mask)
    risk = predict(pair, ds, which, labeled)
    median = float(extra.get("median_risk", np.median(risk)))
    km_high, km_low, p = stratify_and_logrank(risk, median, ds.times[labeled], ds.status[labeled])

    out = Path(output)
    paths = {
        "high": str(export_km(km_high, out / "km_high.csv")),
        "low": str(export_km(km_low, out / "km_low.csv")),
    }
    summary = {"logrank_p": p, "median_risk": median, "n_high": int((risk > median).sum()),
               "n_low": int((risk <= median).sum()), "curves": paths}
    _write_json(out / "km_summary.json", summary)
    return summary


# ----------------- experiments ----------------- #

def cmd_protocol(job: JobConfig, workers: int = 1) -> Dict[str, Any]:
    ds = _dataset(job)
    spec = job.model.resolve(ds)
    out = job.output_path()
    p = job.protocol
    ledger = run_protocol(ds, job.search, spec, seed=p.seed, base_cfg=job.train, k=p.k, repeats=p.repeats,
                          val_fraction=p.val_fraction, baseline=p.baseline, workers=workers,
                          output_dir=out, name=job.name)
    _write_json(out / "job_config.json", job.model_dump(mode="json"))
    return ledger.summary()


def cmd_ablate(job: JobConfig, workers: int = 1) -> Dict[str, Any]:
    section = job.require("ablation")
    ds = _dataset(job)
    spec = job.model.resolve(ds)
    p = job.protocol
    frame = ablate(ds, job.train, section.parameter, section.values, spec, seed=p.seed, k=p.k,
                   repeats=p.repeats, val_fraction=p.val_fraction, workers=workers)
    out = job.output_path()
    out.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out / "ablation.csv", index=False, float_format="%.10g")
    ablation_table(frame).to_csv(out / "ablation_table.csv", float_format="%.10g")
    summary = ablation_summary(frame)
    summary.to_csv(out / "ablation_summary.csv", index=False, float_format="%.10g")
    _write_json(out / "job_config.json", job.model_dump(mode="json"))
    return {"parameter": section.parameter, "rows": len(frame),
            "mean_validation_error": {str(r["value"]): float(r["mean"]) for _, r in summary.iterrows()}}


def cmd_scaling(job: JobConfig, workers: int = 1) -> Dict[str, Any]:
    section = job.require("scaling")
    ds = _dataset(job)
    pool, _ = load_dataset(section.unlabeled_pool)
    spec = job.model.resolve(ds)
    p = job.protocol
    out = job.output_path()
    ledgers = unlabeled_scaling_study(ds, pool, section.sizes, job.search, spec, seed=p.seed,
                                      base_cfg=job.train, k=p.k, repeats=p.repeats,
                                      val_fraction=p.val_fraction, baseline=p.baseline,
                                      workers=workers, output_dir=out)
    table = scaling_summary(ledgers)
    table.to_csv(out / "scaling_summary.csv", index=False, float_format="%.10g")
    _write_json(out / "job_config.json", job.model_dump(mode="json"))
    return {"sizes": table.to_dict(orient="records")}


def cmd_compare(ledger_a: str, ledger_b: str, output: Optional[str] = None) -> Dict[str, Any]:
    record = compare_models(read_ledger(ledger_a), read_ledger(ledger_b))
    if output:
        _write_json(Path(output) / "comparison.json", record.model_dump())
    return {m.metric: {"mean_a": m.mean_a, "mean_b": m.mean_b, "p_value": f"{m.p_value:.2g}"}
            for m in record.metrics}
