"""
Training loops.

One step, full batch:
    student forward on the training rows (perturbed)
    teacher forward on D_c ∪ D_u (independent perturbation, off-tape)
    L = L_s + w·L_u → backward → optimizer step → EMA update

w = 0 skips the teacher branch entirely, so a run with w=0, σ=0 and no
dropout follows the same θ trajectory as the supervised baseline.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from app.autodiff import Tape, make_optimizer, optimizer_step, zero_grads
from app.experiment.schemas import TrainConfig
from app.errors import DivergedTrainingError, InsufficientEventsError, UndefinedMetricError
from app.logging_utils import get_logger
from app.loss.service import (
    LossConfig,
    build_risk_sets,
    consistency_loss,
    sample_minibatch,
    supervised_loss,
    total_loss,
)
from app.metrics.service import concordance_index
from app.model.networks import take_inputs
from app.model.pair import StudentTeacherPair, ema_update, forward_eval, forward_student, forward_teacher, init_model, load_params
from extraction.schemas import SurvivalDataset

logger = get_logger("Trainer")

MIN_TRAIN_EVENTS = 2


@dataclass
class TrainingTrace:
    epochs: List[Dict[str, float]] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_validation_c_index: Optional[float] = None
    stopped_early: bool = False
    steps: int = 0
    student_trajectory: List[Dict[str, np.ndarray]] = field(default_factory=list)

    def losses(self, key: str = "total") -> np.ndarray:
        return np.array([e[key] for e in self.epochs], dtype=float)


def predict(pair: StudentTeacherPair, ds: SurvivalDataset, which: str = "teacher",
            indices: Optional[np.ndarray] = None) -> np.ndarray:
    idx = np.arange(ds.n_samples) if indices is None else np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        return np.zeros(0)
    return forward_eval(pair, pair.network.inputs(ds, idx), which=which)


def _validation_c_index(pair: StudentTeacherPair, ds_val: SurvivalDataset, which: str) -> float:
    labeled = np.flatnonzero(ds_val.labeled_mask)
    try:
        return concordance_index(predict(pair, ds_val, which, labeled),
                                 ds_val.times[labeled], ds_val.status[labeled])
    except UndefinedMetricError:
        return float("nan")


def _step(pair: StudentTeacherPair, ds: SurvivalDataset, rows: np.ndarray, rs, consistency_pos: np.ndarray,
          loss_cfg: LossConfig, use_teacher: bool, student_inputs, rng: np.random.Generator,
          optimizer, epoch: int) -> Tuple[float, float, float]:
    params = pair.student_params()
    zero_grads(params)
    with Tape() as tape:
        f = forward_student(pair, take_inputs(student_inputs, rows), rng, mode="train")
        ls = supervised_loss(f, rs)
        if use_teacher and loss_cfg.consistency_weight > 0.0:
            if consistency_pos.size:
                teacher_in = pair.network.inputs(ds, rows[consistency_pos], teacher_view=True)
                target = forward_teacher(pair, teacher_in, rng, mode="train")
            else:
                target = np.zeros(0)
            lu = consistency_loss(f[consistency_pos], target)
        else:
            lu = None
        loss = total_loss(ls, lu, loss_cfg) if lu is not None else ls
        if not np.isfinite(loss.item()):
            raise DivergedTrainingError("non-finite loss", epoch=epoch)
        tape.backward(loss)

    try:
        optimizer_step(params, [p.grad for p in params], optimizer)
    except DivergedTrainingError as exc:
        raise DivergedTrainingError(str(exc), step=exc.step, epoch=epoch) from None
    if use_teacher:
        ema_update(pair)
    return ls.item(), (lu.item() if lu is not None else 0.0), loss.item()


def _train(ds_train: SurvivalDataset, cfg: TrainConfig, model_spec, ds_val: Optional[SurvivalDataset],
           use_teacher: bool, record_trajectory: bool) -> Tuple[StudentTeacherPair, TrainingTrace]:
    if ds_train.n_events < MIN_TRAIN_EVENTS:
        raise InsufficientEventsError(
            f"training set has {ds_train.n_events} events; at least {MIN_TRAIN_EVENTS} required"
        )
    pair = init_model(model_spec, cfg.seed, cfg.pair_config())
    loss_cfg = cfg.loss_config()
    if not use_teacher:
        loss_cfg = loss_cfg.model_copy(update={"consistency_weight": 0.0})
    optimizer = make_optimizer(pair.student_params(), cfg.learning_rate, cfg.optimizer)
    rng = np.random.default_rng([cfg.seed, 1])
    which = cfg.evaluate_with if use_teacher else "student"

    # w = 0 → the unlabeled rows carry no signal and are not forwarded
    semi = use_teacher and loss_cfg.consistency_weight > 0.0
    rows = np.arange(ds_train.n_samples) if semi else np.flatnonzero(ds_train.labeled_mask)
    sub = ds_train.subset(rows)
    student_inputs = pair.network.inputs(sub, np.arange(sub.n_samples))
    full_rs = build_risk_sets(sub.times, sub.status)
    consistency_pos = np.flatnonzero(sub.censored_mask | sub.unlabeled_mask)

    trace = TrainingTrace()
    best_score = -np.inf
    best_state = None
    since_best = 0
    logger.info(
        f"training {type(model_spec).__name__} on {sub.n_samples} samples "
        f"({sub.status_counts()}), w={loss_cfg.consistency_weight}, epochs={cfg.epochs}"
    )

    for epoch in range(cfg.epochs):
        if loss_cfg.batch_mode == "full_batch":
            batches = [(np.arange(sub.n_samples), full_rs, consistency_pos)]
        else:
            n_steps = math.ceil(full_rs.n_events / min(loss_cfg.minibatch_events, full_rs.n_events))
            batches = []
            for _ in range(n_steps):
                mb = sample_minibatch(full_rs, sub, loss_cfg, rng)
                batches.append((mb.sample_indices, mb.risk, mb.consistency))

        ls_sum = lu_sum = tot_sum = 0.0
        for batch_rows, rs, cons in batches:
            ls, lu, tot = _step(pair, sub, batch_rows, rs, cons, loss_cfg, use_teacher,
                                student_inputs, rng, optimizer, epoch)
            ls_sum, lu_sum, tot_sum = ls_sum + ls, lu_sum + lu, tot_sum + tot
            trace.steps += 1
        n_b = len(batches)
        entry = {"epoch": epoch, "ls": ls_sum / n_b, "lu": lu_sum / n_b, "total": tot_sum / n_b}
        if record_trajectory:
            trace.student_trajectory.append(pair.snapshot("student"))

        if ds_val is not None:
            score = _validation_c_index(pair, ds_val, which)
            entry["validation_c_index"] = score
            if np.isfinite(score) and score > best_score:
                best_score = score
                best_state = (pair.snapshot("student"), pair.snapshot("teacher"))
                trace.best_epoch = epoch
                since_best = 0
            else:
                since_best += 1
        trace.epochs.append(entry)
        logger.debug(
            f"epoch {epoch}: L_s={entry['ls']:.5f} L_u={entry['lu']:.5f} "
            f"val_c={entry.get('validation_c_index', float('nan')):.4f}"
        )
        if ds_val is not None and since_best >= cfg.early_stop_patience:
            trace.stopped_early = True
            logger.info(f"early stop at epoch {epoch}; best epoch {trace.best_epoch} (c-index {best_score:.4f})")
            break

    if best_state is not None:
        load_params(pair.student, best_state[0])
        load_params(pair.teacher, best_state[1])
        trace.best_validation_c_index = float(best_score)
    pair.check_congruent()
    return pair, trace


def train_cox_mt(ds_train: SurvivalDataset, cfg: TrainConfig, model_spec,
                 ds_val: Optional[SurvivalDataset] = None,
                 record_trajectory: bool = False) -> Tuple[StudentTeacherPair, TrainingTrace]:
    return _train(ds_train, cfg, model_spec, ds_val, use_teacher=True, record_trajectory=record_trajectory)


def baseline_config(cfg: TrainConfig) -> TrainConfig:
    """Supervised-only settings: no consistency term, no input noise, student evaluated."""
    return cfg.model_copy(update={"consistency_weight": 0.0, "noise_sigma": 0.0, "evaluate_with": "student"})


def train_supervised_baseline(ds_train: SurvivalDataset, cfg: TrainConfig, model_spec,
                              ds_val: Optional[SurvivalDataset] = None,
                              record_trajectory: bool = False) -> Tuple[StudentTeacherPair, TrainingTrace]:
    return _train(ds_train, baseline_config(cfg), model_spec, ds_val,
                  use_teacher=False, record_trajectory=record_trajectory)
