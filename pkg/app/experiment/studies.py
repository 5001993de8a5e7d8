"""Ablations, unlabeled-data scaling and ledger comparisons built on the protocol."""
from __future__ import annotations

from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import numpy as np
import pandas as pd

from app.errors import BoundError, LedgerMismatchError
from app.experiment.protocol import run_protocol, validation_errors
from app.experiment.schemas import ComparisonRecord, MetricComparison, RunLedger, SearchSpace, TrainConfig, override
from app.logging_utils import get_logger
from app.metrics.stats import box_stats, wilcoxon_rank_sum
from extraction.folds import split_folds
from extraction.schemas import SurvivalDataset

logger = get_logger("Studies")

COMPARED_METRICS = ("c_index", "ibs")


def ablate(ds: SurvivalDataset, base_cfg: TrainConfig, parameter_name: str, values: Sequence[Any],
           model_spec, seed: int = 0, k: int = 5, repeats: int = 4, val_fraction: float = 0.2,
           workers: int = 1) -> pd.DataFrame:
    """
    One hyperparameter varied, the others held at base_cfg.
    Rows: one per (value, repeat, fold) with validation_error = 1 − validation c-index.
    """
    # unknown names fail before any training starts
    settings = [(value, *override(base_cfg, model_spec, parameter_name, value)) for value in values]
    plans = split_folds(ds, k=k, repeats=repeats, val_fraction=val_fraction, seed=seed)

    rows = []
    for value, cfg, spec in settings:
        errors = validation_errors(ds, plans, cfg, spec, workers=workers)
        for repeat, fold, err in errors:
            rows.append({"parameter": parameter_name, "value": _label(value),
                         "repeat": repeat, "fold": fold, "validation_error": err})
        mean = float(np.nanmean([e for _, _, e in errors]))
        logger.info(f"{parameter_name}={value}: mean validation error {mean:.4f}")
    return pd.DataFrame(rows, columns=["parameter", "value", "repeat", "fold", "validation_error"])


def _label(value: Any) -> Any:
    if isinstance(value, (list, tuple)):
        return "x".join(str(v) for v in value)
    return value


def ablation_table(frame: pd.DataFrame) -> pd.DataFrame:
    """Wide form: one column per value, one row per (repeat, fold)."""
    return frame.pivot_table(index=["repeat", "fold"], columns="value",
                             values="validation_error", sort=False)


def ablation_summary(frame: pd.DataFrame) -> pd.DataFrame:
    return (frame.groupby("value", sort=False)["validation_error"]
            .agg(["mean", "std", "count"]).reset_index())


def nested_unlabeled(pool: SurvivalDataset, sizes: Sequence[int], seed: int = 0) -> Dict[int, SurvivalDataset]:
    """Smaller draws are prefixes of one seeded permutation of the pool."""
    sizes = [int(s) for s in sizes]
    too_big = [s for s in sizes if s < 0 or s > pool.n_samples]
    if too_big:
        raise BoundError(f"unlabeled sizes {too_big} outside 0..{pool.n_samples}")
    order = np.random.default_rng(seed).permutation(pool.n_samples)
    return {s: pool.subset(np.sort(order[:s])).as_unlabeled() for s in sizes}


def unlabeled_scaling_study(ds_labeled: SurvivalDataset, unlabeled_pool: SurvivalDataset,
                            sizes: Sequence[int], search: SearchSpace, model_spec, seed: int = 0,
                            base_cfg: Optional[TrainConfig] = None, k: int = 5, repeats: int = 4,
                            val_fraction: float = 0.2, baseline: bool = False, workers: int = 1,
                            output_dir: Optional[str | Path] = None) -> Dict[int, RunLedger]:
    draws = nested_unlabeled(unlabeled_pool, sizes, seed)
    ledgers: Dict[int, RunLedger] = {}
    for size in sizes:
        size = int(size)
        extra = draws[size]
        # pool samples go first; fold plans of the labeled samples do not depend on them
        ds = SurvivalDataset.concat(extra, ds_labeled) if size else ds_labeled
        out = Path(output_dir) / f"unlabeled_{size}" if output_dir is not None else None
        ledgers[size] = run_protocol(ds, search, model_spec, seed=seed, base_cfg=base_cfg, k=k,
                                     repeats=repeats, val_fraction=val_fraction, baseline=baseline,
                                     workers=workers, output_dir=out, name=f"unlabeled_{size}")
        summary = ledgers[size].summary()
        logger.info(f"|D_u| + {size}: mean c-index {summary['mean_c_index']:.4f}, mean IBS {summary['mean_ibs']:.4f}")
    return ledgers


def scaling_summary(ledgers: Dict[int, RunLedger]) -> pd.DataFrame:
    rows = []
    for size, ledger in sorted(ledgers.items()):
        s = ledger.summary()
        rows.append({"unlabeled": size, "mean_c_index": s["mean_c_index"], "std_c_index": s["std_c_index"],
                     "mean_ibs": s["mean_ibs"], "std_ibs": s["std_ibs"], "runs": s["runs"]})
    return pd.DataFrame(rows)


def compare_models(ledger_a: RunLedger, ledger_b: RunLedger,
                   metrics: Sequence[str] = COMPARED_METRICS) -> ComparisonRecord:
    if len(ledger_a) != len(ledger_b):
        raise LedgerMismatchError(f"ledger sizes differ: {len(ledger_a)} vs {len(ledger_b)}")
    comparisons = []
    for name in metrics:
        a, b = ledger_a.metric(name), ledger_b.metric(name)
        comparisons.append(MetricComparison(
            metric=name,
            mean_a=float(a.mean()),
            mean_b=float(b.mean()),
            box_a=box_stats(a),
            box_b=box_stats(b),
            p_value=wilcoxon_rank_sum(a, b),
        ))
    return ComparisonRecord(name_a=ledger_a.name, name_b=ledger_b.name, runs=len(ledger_a), metrics=comparisons)
