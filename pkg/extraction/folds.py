"""
Repeated k-fold plans over a SurvivalDataset.

Per repeat: labeled samples (D_e ∪ D_c) are dealt into k folds, unlabeled
samples (D_u) independently into k folds. For held-out fold f the remaining
labeled samples are split train/val (80/20 by default) and the unlabeled
samples outside fold f join the training set.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Tuple

import numpy as np
from sklearn.model_selection import train_test_split

from app.errors import BoundError, IngestionFormatError
from extraction.schemas import SurvivalDataset

FOLD_PLAN_FORMAT = "coxmt-foldplan"
FOLD_PLAN_VERSION = 1


@dataclass(frozen=True)
class SplitTriple:
    repeat: int
    fold: int
    train: np.ndarray  # includes the unlabeled samples of the other folds
    val: np.ndarray
    test: np.ndarray


@dataclass(frozen=True)
class FoldPlan:
    repeat: int
    repeat_seed: int
    k: int
    fold_assignments: np.ndarray  # per sample, 0..k-1 (labeled and unlabeled alike)
    labeled: np.ndarray           # bool per sample
    val_mask: np.ndarray          # k × n bool: val_mask[f, i] → i validates when f is held out

    def triple(self, fold: int) -> SplitTriple:
        in_fold = self.fold_assignments == fold
        test = np.flatnonzero(in_fold & self.labeled)
        val = np.flatnonzero(self.val_mask[fold])
        train_labeled = ~in_fold & self.labeled & ~self.val_mask[fold]
        train_unlabeled = ~in_fold & ~self.labeled
        train = np.flatnonzero(train_labeled | train_unlabeled)
        return SplitTriple(repeat=self.repeat, fold=fold, train=train, val=val, test=test)

    def triples(self) -> Iterator[SplitTriple]:
        for f in range(self.k):
            yield self.triple(f)


def _deal(order: np.ndarray, k: int, offset: int = 0) -> np.ndarray:
    """Round-robin assignment; sizes differ by at most one."""
    return (np.arange(order.size) + offset) % k


def _assign_labeled(ds: SurvivalDataset, k: int, rng: np.random.Generator,
                    stratified: bool) -> np.ndarray:
    assignments = np.full(ds.n_samples, -1, dtype=np.int64)
    labeled_idx = np.flatnonzero(ds.labeled_mask)
    if stratified:
        events = rng.permutation(np.flatnonzero(ds.event_mask))
        censored = rng.permutation(np.flatnonzero(ds.censored_mask))
        order = np.concatenate([events, censored])
    else:
        order = rng.permutation(labeled_idx)
    assignments[order] = _deal(order, k)
    return assignments


def split_validation(ds: SurvivalDataset, candidates: np.ndarray, val_fraction: float,
                      seed: int, stratified: bool) -> np.ndarray:
    if val_fraction <= 0.0 or candidates.size < 2:
        return np.array([], dtype=np.int64)
    labels = ds.event_mask[candidates].astype(int)
    stratify = labels if stratified and np.bincount(labels, minlength=2).min() >= 2 else None
    try:
        _, val = train_test_split(candidates, test_size=val_fraction, random_state=seed, stratify=stratify)
    except ValueError:
        _, val = train_test_split(candidates, test_size=val_fraction, random_state=seed)
    return np.sort(val)


def split_folds(
    ds: SurvivalDataset,
    k: int = 5,
    repeats: int = 4,
    val_fraction: float = 0.2,
    seed: int = 0,
    stratified: bool = True,
) -> List[FoldPlan]:
    n_labeled = int(ds.labeled_mask.sum())
    if k < 2 or k > n_labeled:
        raise BoundError(f"k={k} folds need 2 <= k <= labeled count ({n_labeled})")
    if not 0.0 <= val_fraction < 1.0:
        raise BoundError(f"val_fraction must be in [0, 1), got {val_fraction}")

    seeds = np.random.SeedSequence(seed).generate_state(repeats)
    plans: List[FoldPlan] = []
    for r in range(repeats):
        repeat_seed = int(seeds[r])
        rng = np.random.default_rng(repeat_seed)
        assignments = _assign_labeled(ds, k, rng, stratified)

        unlabeled_idx = rng.permutation(np.flatnonzero(ds.unlabeled_mask))
        assignments[unlabeled_idx] = _deal(unlabeled_idx, k)

        val_mask = np.zeros((k, ds.n_samples), dtype=bool)
        for f in range(k):
            candidates = np.flatnonzero(ds.labeled_mask & (assignments != f))
            val = split_validation(ds, candidates, val_fraction, repeat_seed + f, stratified)
            val_mask[f, val] = True

        plans.append(FoldPlan(
            repeat=r,
            repeat_seed=repeat_seed,
            k=k,
            fold_assignments=assignments,
            labeled=ds.labeled_mask.copy(),
            val_mask=val_mask,
        ))
    return plans


# ----------------- audit text format ----------------- #

def serialize_fold_plans(plans: List[FoldPlan], sample_ids: Tuple[str, ...]) -> str:
    """
    Plain text: a versioned header, then one line per (sample, repeat, held-out fold)
    giving that sample's role in that run.
    """
    lines = [f"# {FOLD_PLAN_FORMAT} v{FOLD_PLAN_VERSION}", "sample_id\trepeat\trepeat_seed\tfold\theld_out\trole"]
    for plan in plans:
        for split in plan.triples():
            roles: Dict[int, str] = {}
            roles.update({int(i): "train" for i in split.train})
            roles.update({int(i): "val" for i in split.val})
            roles.update({int(i): "test" for i in split.test})
            for i, sid in enumerate(sample_ids):
                role = roles.get(i, "unused")
                lines.append(
                    f"{sid}\t{plan.repeat}\t{plan.repeat_seed}\t{int(plan.fold_assignments[i])}\t{split.fold}\t{role}"
                )
    return "\n".join(lines) + "\n"


def parse_fold_plan_roles(text: str) -> Dict[Tuple[int, int], Dict[str, List[str]]]:
    """(repeat, held_out) → role → sample ids, for audits."""
    lines = text.splitlines()
    if not lines or lines[0].strip() != f"# {FOLD_PLAN_FORMAT} v{FOLD_PLAN_VERSION}":
        raise IngestionFormatError("not a fold-plan file or unsupported version")
    out: Dict[Tuple[int, int], Dict[str, List[str]]] = {}
    for line in lines[2:]:
        if not line.strip():
            continue
        sid, repeat, _seed, _fold, held_out, role = line.split("\t")
        out.setdefault((int(repeat), int(held_out)), {}).setdefault(role, []).append(sid)
    return out


def write_fold_plans(plans: List[FoldPlan], sample_ids: Tuple[str, ...], path: str | Path) -> Path:
    path = Path(path)
    path.write_text(serialize_fold_plans(plans, sample_ids), encoding="utf-8")
    return path
