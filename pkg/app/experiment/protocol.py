"""
Repeated k-fold evaluation protocol.

For every (repeat, fold):
    1. standardize features with statistics of the train+val rows only
    2. grid search: train on train, score validation c-index
    3. retrain the winning configuration on train+val
    4. evaluate on the held-out labeled test fold (teacher parameters by default)

(repeat, fold) jobs are independent; they run serially or on a process pool.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.preprocessing import StandardScaler

from app.db.models import store_ledger
from app.db.session import ledger_store_enabled
from app.errors import LeakError, LedgerMismatchError, UndefinedMetricError
from app.experiment.schemas import RunLedger, RunRecord, SearchSpace, TrainConfig
from app.experiment.training import predict, train_cox_mt, train_supervised_baseline
from app.logging_utils import get_logger
from app.metrics.service import concordance_index, evaluate, export_km
from app.model.checkpoint import save_checkpoint
from extraction.folds import FoldPlan, SplitTriple, split_folds, write_fold_plans
from extraction.schemas import SurvivalDataset

logger = get_logger("Protocol")

DEFAULT_WORKERS = int(os.getenv("COXMT_WORKERS", "0")) or (os.cpu_count() or 1)


# ----------------- per-fold preprocessing ----------------- #

def fit_scaler(ds: SurvivalDataset, fit_rows: np.ndarray) -> StandardScaler:
    return StandardScaler().fit(ds.features[np.asarray(fit_rows, dtype=np.int64)])


def apply_scaler(ds: SurvivalDataset, mean: np.ndarray, scale: np.ndarray) -> SurvivalDataset:
    """Same arithmetic as StandardScaler.transform, also on the teacher view."""
    mean, scale = np.asarray(mean, dtype=float), np.asarray(scale, dtype=float)
    teacher = None if ds.teacher_features is None else (ds.teacher_features - mean) / scale
    return ds.with_features((ds.features - mean) / scale, teacher)


def standardize_split(ds: SurvivalDataset, fit_rows: np.ndarray) -> Tuple[SurvivalDataset, np.ndarray]:
    """Scaler fit on fit_rows only, applied to every row."""
    scaler = fit_scaler(ds, fit_rows)
    return apply_scaler(ds, scaler.mean_, scaler.scale_), np.asarray(fit_rows)


# ----------------- one (repeat, fold) ----------------- #

@dataclass
class FoldJob:
    ds: SurvivalDataset
    split: SplitTriple
    search: SearchSpace
    base_cfg: TrainConfig
    model_spec: Any
    seed: int
    baseline: bool = False
    output_dir: Optional[str] = None


def _fit(job: FoldJob, ds_train: SurvivalDataset, cfg: TrainConfig, spec,
         ds_val: Optional[SurvivalDataset] = None):
    trainer = train_supervised_baseline if job.baseline else train_cox_mt
    return trainer(ds_train, cfg, spec, ds_val)


def _select(job: FoldJob, ds: SurvivalDataset) -> Tuple[Dict[str, Any], TrainConfig, Any, Optional[float]]:
    split = job.split
    base = job.base_cfg.model_copy(update={"seed": job.seed})
    candidates = list(job.search.candidates(base, job.model_spec))
    if len(candidates) == 1:
        point, cfg, spec = candidates[0]
        return point, cfg, spec, None

    ds_train, ds_val = ds.subset(split.train), ds.subset(split.val)
    best = None
    for point, cfg, spec in candidates:
        pair, trace = _fit(job, ds_train, cfg, spec, ds_val)
        score = trace.best_validation_c_index
        if score is None:
            score = float("nan")
        logger.debug(f"r{split.repeat} f{split.fold} {point} → validation c-index {score:.4f}")
        if best is None or (np.isfinite(score) and (not np.isfinite(best[3]) or score > best[3])):
            best = (point, cfg, spec, score)
    return best


def run_fold(job: FoldJob) -> RunRecord:
    split = job.split
    fit_rows = np.concatenate([split.train, split.val])
    ds = job.ds
    scaler_rows = np.array([], dtype=np.int64)
    if job.base_cfg.standardize:
        ds, scaler_rows = standardize_split(ds, fit_rows)

    point, cfg, spec, val_score = _select(job, ds)

    # final fit on train+val; the validation rows no longer steer early stopping
    ds_fit = ds.subset(np.sort(fit_rows))
    pair, _ = _fit(job, ds_fit, cfg, spec)
    which = "student" if job.baseline else cfg.evaluate_with

    labeled_fit = np.flatnonzero(ds_fit.labeled_mask)
    ds_test = ds.subset(split.test)
    report = evaluate(
        train_f=predict(pair, ds_fit, which, labeled_fit),
        train_times=ds_fit.times[labeled_fit],
        train_statuses=ds_fit.status[labeled_fit],
        test_f=predict(pair, ds_test, which),
        test_times=ds_test.times,
        test_statuses=ds_test.status,
        seed=job.seed, fold=split.fold, repeat=split.repeat,
    )

    checkpoint = None
    if job.output_dir:
        tag = f"r{split.repeat}_f{split.fold}"
        path = Path(job.output_dir) / "checkpoints" / f"{tag}.ckpt"
        save_checkpoint(pair, path, extra={"consistency_weight": cfg.consistency_weight,
                                           "learning_rate": cfg.learning_rate, "seed": job.seed,
                                           "repeat": split.repeat, "fold": split.fold})
        checkpoint = str(path)
        for stratum, curve in (("high", report.km_high), ("low", report.km_low)):
            if curve is not None:
                export_km(curve, Path(job.output_dir) / "km" / f"{tag}_{stratum}.csv")

    ids = job.ds.sample_ids
    logger.info(f"r{split.repeat} f{split.fold}: c-index {report.c_index:.4f}, IBS {report.ibs:.4f}")
    return RunRecord(
        repeat=split.repeat, fold=split.fold, seed=job.seed,
        c_index=report.c_index, ibs=report.ibs,
        stratification_p=report.stratification_p, ibs_horizon=report.ibs_horizon,
        validation_c_index=val_score, hyperparameters=point,
        train_ids=[ids[i] for i in split.train],
        val_ids=[ids[i] for i in split.val],
        test_ids=[ids[i] for i in split.test],
        scaler_ids=[ids[i] for i in scaler_rows],
        checkpoint=checkpoint,
    )


# ----------------- protocol ----------------- #

def _jobs(ds: SurvivalDataset, plans: Sequence[FoldPlan], search: SearchSpace, base_cfg: TrainConfig,
          model_spec, baseline: bool, output_dir: Optional[Path]) -> List[FoldJob]:
    jobs = []
    for plan in plans:
        for split in plan.triples():
            jobs.append(FoldJob(
                ds=ds, split=split, search=search, base_cfg=base_cfg, model_spec=model_spec,
                seed=int(plan.repeat_seed % (2 ** 31)) + split.fold,
                baseline=baseline,
                output_dir=str(output_dir) if output_dir else None,
            ))
    return jobs


def execute(jobs: Sequence[FoldJob], workers: int = 1) -> List[RunRecord]:
    if workers <= 1 or len(jobs) <= 1:
        return [run_fold(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_fold, jobs))


def run_protocol(ds: SurvivalDataset, search: SearchSpace, model_spec, seed: int = 0,
                 base_cfg: Optional[TrainConfig] = None, k: int = 5, repeats: int = 4,
                 val_fraction: float = 0.2, baseline: bool = False, workers: int = 1,
                 output_dir: Optional[str | Path] = None, name: str = "protocol") -> RunLedger:
    base_cfg = base_cfg or TrainConfig()
    plans = split_folds(ds, k=k, repeats=repeats, val_fraction=val_fraction, seed=seed)
    if output_dir is not None:
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        write_fold_plans(plans, ds.sample_ids, output_dir / "fold_plan.tsv")

    jobs = _jobs(ds, plans, search, base_cfg, model_spec, baseline, output_dir)
    logger.info(f"{name}: {len(jobs)} runs ({repeats} repeats × {k} folds), grid of {search.size()}, workers={workers}")
    records = sorted(execute(jobs, workers), key=lambda r: (r.repeat, r.fold))
    ledger = RunLedger(name=name, repeats=repeats, k=k, seed=seed,
                       model_kind=getattr(model_spec, "kind", "mlp"), records=records)
    audit_ledger(ledger, ds, plans)
    if output_dir is not None:
        write_ledger(ledger, output_dir, manifest={
            "seed": seed, "k": k, "repeats": repeats, "val_fraction": val_fraction,
            "baseline": baseline, "train_config": base_cfg.model_dump(),
            "search_space": search.model_dump(), "model_spec": model_spec.model_dump(),
            "fold_plan": "fold_plan.tsv",
        })
    return ledger


def audit_ledger(ledger: RunLedger, ds: SurvivalDataset, plans: Sequence[FoldPlan]) -> None:
    """Every test id stays out of the training, validation and scaler sets of its own run."""
    expected = len(plans) * (plans[0].k if plans else 0)
    if len(ledger.records) != expected:
        raise LedgerMismatchError(f"ledger has {len(ledger.records)} records, plan has {expected}")
    by_key = {(r.repeat, r.fold): r for r in ledger.records}
    for plan in plans:
        for split in plan.triples():
            record = by_key.get((split.repeat, split.fold))
            if record is None:
                raise LedgerMismatchError(f"no record for repeat {split.repeat} fold {split.fold}")
            planned_test = {ds.sample_ids[i] for i in split.test}
            test = set(record.test_ids)
            if test != planned_test:
                raise LeakError(f"r{split.repeat} f{split.fold}: test ids differ from the fold plan")
            for role in ("train_ids", "val_ids", "scaler_ids"):
                overlap = test & set(getattr(record, role))
                if overlap:
                    raise LeakError(
                        f"r{split.repeat} f{split.fold}: {len(overlap)} test id(s) in {role}, e.g. {sorted(overlap)[0]}"
                    )


# ----------------- ledger files ----------------- #

def write_ledger(ledger: RunLedger, output_dir: str | Path, manifest: Optional[Dict[str, Any]] = None) -> Dict[str, Path]:
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    csv_path = output_dir / "ledger.csv"
    ledger.to_frame().to_csv(csv_path, index=False, float_format="%.10g")
    json_path = output_dir / "ledger.json"
    json_path.write_text(ledger.model_dump_json(indent=2), encoding="utf-8")
    summary_path = output_dir / "summary.json"
    summary = ledger.summary()
    if manifest:
        summary["manifest"] = manifest
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True, default=str), encoding="utf-8")

    if ledger_store_enabled():
        store_ledger(ledger)
    return {"csv": csv_path, "json": json_path, "summary": summary_path}


def read_ledger(path: str | Path) -> RunLedger:
    path = Path(path)
    if path.is_dir():
        path = path / "ledger.json"
    return RunLedger.model_validate_json(path.read_text(encoding="utf-8"))


def validation_errors(ds: SurvivalDataset, plans: Sequence[FoldPlan], cfg: TrainConfig,
                      model_spec, workers: int = 1) -> List[Tuple[int, int, float]]:
    """1 − validation c-index for every (repeat, fold), training on its train split only."""
    jobs = [(ds, split, cfg, model_spec, int(plan.repeat_seed % (2 ** 31)) + split.fold)
            for plan in plans for split in plan.triples()]
    if workers <= 1:
        return [_validation_error(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_validation_error, jobs))


def _validation_error(args) -> Tuple[int, int, float]:
    ds, split, cfg, spec, seed = args
    if cfg.standardize:
        ds, _ = standardize_split(ds, np.concatenate([split.train, split.val]))
    cfg = cfg.model_copy(update={"seed": seed})
    ds_val = ds.subset(split.val)
    pair, trace = train_cox_mt(ds.subset(split.train), cfg, spec, ds_val)
    score = trace.best_validation_c_index
    if score is None:
        labeled = np.flatnonzero(ds_val.labeled_mask)
        try:
            score = concordance_index(predict(pair, ds_val, cfg.evaluate_with, labeled),
                                      ds_val.times[labeled], ds_val.status[labeled])
        except UndefinedMetricError:
            score = float("nan")
    return split.repeat, split.fold, 1.0 - score
