"""
Training losses.

    L_s = −(1/|D_e|) Σ_{i∈D_e} [ f(x_i) − log Σ_{j∈R(t_i)} exp f(x_j) ]
    L_u = mean over D_u ∪ D_c of (f_θ(x+η) − f_θ'(x+η'))²
    L   = L_s + w · L_u

Risk sets use the Breslow convention: tied event times share risk sets.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.autodiff import Tensor, as_tensor, masked_log_sum_exp, take
from app.errors import DimensionError, InvalidRiskSetError, NoEventsError
from app.logging_utils import get_logger
from extraction.schemas import STATUS_CODE, SampleStatus, SurvivalDataset

logger = get_logger("Loss")


class LossConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    consistency_weight: float = Field(default=1.0, ge=0.0)
    batch_mode: Literal["full_batch", "risk_set_minibatch"] = "full_batch"
    minibatch_events: int = Field(default=32, gt=0)
    risk_controls_per_event: int = Field(default=16, gt=0)
    consistency_batch: int = Field(default=64, gt=0)


@dataclass(frozen=True)
class RiskSetIndex:
    """
    event_order: positions of the uncensored samples, sorted by time (stable).
    at_risk:     one position array per event, R(t_i) = {j labeled : t_j >= t_i}.
    offsets:     per-event additive correction to the inner log-sum, zero for full risk sets.
    """
    n: int
    event_order: np.ndarray
    at_risk: List[np.ndarray]
    offsets: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.offsets is None:
            object.__setattr__(self, "offsets", np.zeros(len(self.event_order)))
        if len(self.at_risk) != len(self.event_order) or self.offsets.shape != (len(self.event_order),):
            raise DimensionError("one risk set and offset per event required",
                                 (len(self.event_order),), (len(self.at_risk),), self.offsets.shape)

    @property
    def n_events(self) -> int:
        return len(self.event_order)

    def mask(self) -> np.ndarray:
        m = np.zeros((self.n_events, self.n), dtype=bool)
        for row, members in enumerate(self.at_risk):
            m[row, members] = True
        return m

    def sizes(self) -> np.ndarray:
        return np.array([len(r) for r in self.at_risk], dtype=np.int64)


def build_risk_sets(times: np.ndarray, statuses: np.ndarray) -> RiskSetIndex:
    """Unlabeled positions (status −1) are excluded from every risk set."""
    times = np.asarray(times, dtype=float)
    statuses = np.asarray(statuses)
    if times.shape != statuses.shape or times.ndim != 1:
        raise DimensionError("times and statuses must be equal-length vectors", times.shape, statuses.shape)
    labeled = statuses != STATUS_CODE[SampleStatus.UNLABELED]
    events = np.flatnonzero(statuses == STATUS_CODE[SampleStatus.EVENT])
    if events.size == 0:
        raise NoEventsError("no uncensored samples to build risk sets from")
    lab_times = times[labeled]
    if not np.all(np.isfinite(lab_times)) or lab_times.size and lab_times.min() <= 0:
        raise InvalidRiskSetError("labeled samples need finite positive times")

    event_order = events[np.argsort(times[events], kind="stable")]
    labeled_idx = np.flatnonzero(labeled)
    at_risk = [labeled_idx[times[labeled_idx] >= times[i]] for i in event_order]
    return RiskSetIndex(n=times.shape[0], event_order=event_order, at_risk=at_risk)


def supervised_loss(f_values: Tensor, rs: RiskSetIndex) -> Tensor:
    f_values = as_tensor(f_values)
    if f_values.shape != (rs.n,):
        raise DimensionError("predictions do not match the risk-set ordering", f_values.shape, (rs.n,))
    if any(len(r) == 0 for r in rs.at_risk):
        raise InvalidRiskSetError("empty risk set")
    inner = masked_log_sum_exp(f_values, rs.mask())
    if np.any(rs.offsets):
        inner = inner + rs.offsets
    own = take(f_values, rs.event_order)
    return (inner - own).sum() * (1.0 / rs.n_events)


def consistency_loss(student_vals: Tensor, teacher_vals: Tensor) -> Tensor:
    student_vals = as_tensor(student_vals)
    target = as_tensor(teacher_vals).detach()
    if student_vals.shape != target.shape:
        raise DimensionError("student and teacher predictions differ in shape", student_vals.shape, target.shape)
    if student_vals.size == 0:
        logger.warning("consistency set is empty; L_u = 0")
        return Tensor(0.0)
    return ((student_vals - target) ** 2).mean()


def total_loss(ls: Tensor, lu: Tensor, cfg: LossConfig) -> Tensor:
    if cfg.consistency_weight == 0.0:
        return ls
    return ls + as_tensor(lu) * cfg.consistency_weight


# ----------------- risk-set minibatches ----------------- #

@dataclass(frozen=True)
class Minibatch:
    """
    sample_indices: dataset rows forwarded by the student this step.
    risk:           risk sets over positions in sample_indices, with log(|R|/|S|) offsets.
    consistency:    positions in sample_indices that enter L_u.
    """
    sample_indices: np.ndarray
    risk: RiskSetIndex
    consistency: np.ndarray
    events: np.ndarray  # dataset rows of the sampled events


def sample_minibatch(rs: RiskSetIndex, ds: SurvivalDataset, cfg: LossConfig,
                     rng: np.random.Generator) -> Minibatch:
    n_events = rs.n_events
    k = cfg.minibatch_events
    if k > n_events:
        logger.warning(f"minibatch_events={k} exceeds |D_e|={n_events}; clipped")
        k = n_events
    rows = np.sort(rng.choice(n_events, size=k, replace=False))

    events, subsets, offsets = [], [], []
    for row in rows:
        i = int(rs.event_order[row])
        full = rs.at_risk[row]
        m = cfg.risk_controls_per_event
        if len(full) <= m:
            chosen = full
        else:
            others = full[full != i]
            chosen = np.sort(np.concatenate([[i], rng.choice(others, size=m - 1, replace=False)]))
        events.append(i)
        subsets.append(np.asarray(chosen, dtype=np.int64))
        offsets.append(np.log(len(full) / len(chosen)))

    pool = np.flatnonzero(ds.censored_mask | ds.unlabeled_mask)
    n_cons = min(cfg.consistency_batch, pool.size)
    cons_rows = np.sort(rng.choice(pool, size=n_cons, replace=False)) if n_cons else np.array([], dtype=np.int64)

    union = np.unique(np.concatenate([np.asarray(events, dtype=np.int64), *subsets, cons_rows]))
    position = {int(r): p for p, r in enumerate(union)}
    local_events = np.array([position[i] for i in events], dtype=np.int64)
    local_sets = [np.array([position[int(j)] for j in s], dtype=np.int64) for s in subsets]
    risk = RiskSetIndex(n=union.size, event_order=local_events, at_risk=local_sets,
                        offsets=np.asarray(offsets, dtype=float))
    consistency = np.array([position[int(j)] for j in cons_rows], dtype=np.int64)
    return Minibatch(sample_indices=union, risk=risk, consistency=consistency,
                     events=np.asarray(events, dtype=np.int64))


def restrict_risk_sets(rs: RiskSetIndex, rows: Optional[np.ndarray]) -> RiskSetIndex:
    """Full risk sets for a subset of the events (rows index rs.event_order)."""
    if rows is None:
        return rs
    rows = np.asarray(rows, dtype=np.int64)
    return RiskSetIndex(n=rs.n, event_order=rs.event_order[rows], at_risk=[rs.at_risk[r] for r in rows])
