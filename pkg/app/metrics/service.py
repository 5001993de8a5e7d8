"""
Evaluation math for one trained model on one test fold.

    c-index         Harrell, tied predictions 0.5
    Breslow         Ĥ₀(t) = Σ_{j∈D_e, t_j≤t} 1 / Σ_{k∈R(t_j)} exp f_k
    survival        Ŝ_i(t) = exp(−Ĥ₀(t) · exp f_i)
    Brier / IBS     inverse-probability-of-censoring weighted, Ĝ from a reverse KM
    strata          split at the training median risk, KM per stratum, log-rank p
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.integrate import trapezoid
from scipy.special import logsumexp

from app.errors import DimensionError, NoEventsError, StratificationError, TruncationError, UndefinedMetricError
from app.logging_utils import get_logger
from app.metrics.stats import logrank_p
from extraction.schemas import STATUS_CODE, SampleStatus

logger = get_logger("Metrics")

IBS_MIN_AT_RISK = 20

_EVENT = STATUS_CODE[SampleStatus.EVENT]


def _labeled(times, statuses) -> Tuple[np.ndarray, np.ndarray]:
    times = np.asarray(times, dtype=float)
    statuses = np.asarray(statuses)
    keep = statuses != STATUS_CODE[SampleStatus.UNLABELED]
    return times[keep], (statuses[keep] == _EVENT)


# ----------------- curves ----------------- #

@dataclass(frozen=True)
class BaselineHazard:
    times: np.ndarray   # uncensored training times, sorted, ties repeated
    cumhaz: np.ndarray  # Ĥ₀ right after each jump

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        pos = np.searchsorted(self.times, t, side="right")
        padded = np.concatenate([[0.0], self.cumhaz])
        return padded[pos]


@dataclass(frozen=True)
class SurvivalCurve:
    """Right-continuous step curve(s): values[..., k] holds on [times[k], times[k+1]); 1 before times[0]."""
    times: np.ndarray
    values: np.ndarray  # (m,) or (n, m)

    def at(self, t: float) -> np.ndarray:
        pos = int(np.searchsorted(self.times, t, side="right"))
        if pos == 0:
            return np.ones(self.values.shape[:-1]) if self.values.ndim > 1 else np.float64(1.0)
        return self.values[..., pos - 1]


@dataclass(frozen=True)
class KmCurve:
    times: np.ndarray           # distinct observed times
    values: np.ndarray          # estimate right after each time
    at_risk_counts: np.ndarray
    occurrences: np.ndarray

    def at(self, t, left: bool = False) -> np.ndarray:
        """Right-continuous value at t; left=True gives the value just before t."""
        side = "left" if left else "right"
        pos = np.searchsorted(self.times, np.asarray(t, dtype=float), side=side)
        padded = np.concatenate([[1.0], self.values])
        return padded[pos]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "time": np.concatenate([[0.0], self.times]),
            "value": np.concatenate([[1.0], self.values]),
            "at_risk": np.concatenate([[self.at_risk_counts[0] if self.at_risk_counts.size else 0],
                                       self.at_risk_counts]),
        })


# ----------------- concordance ----------------- #

def concordance_index(pred_risk, times, statuses) -> float:
    risk = np.asarray(pred_risk, dtype=float)
    t, e = _labeled(times, statuses)
    keep = np.asarray(statuses) != STATUS_CODE[SampleStatus.UNLABELED]
    risk = risk[keep]

    comparable = e[:, None] & (t[:, None] < t[None, :])
    n_comparable = int(comparable.sum())
    if n_comparable == 0:
        raise UndefinedMetricError("no comparable pairs for the c-index")
    diff = risk[:, None] - risk[None, :]
    score = np.where(diff > 0, 1.0, np.where(diff == 0, 0.5, 0.0))
    return float(score[comparable].sum() / n_comparable)


# ----------------- Breslow / survival ----------------- #

def breslow_cumhaz(train_f, times, statuses) -> BaselineHazard:
    f = np.asarray(train_f, dtype=float)
    t, e = _labeled(times, statuses)
    keep = np.asarray(statuses) != STATUS_CODE[SampleStatus.UNLABELED]
    f = f[keep]
    if not e.any():
        raise NoEventsError("Breslow estimator needs at least one event")

    event_times = np.sort(t[e], kind="stable")
    jumps = np.empty(event_times.size)
    for k, tj in enumerate(event_times):
        jumps[k] = np.exp(-logsumexp(f[t >= tj]))
    return BaselineHazard(times=event_times, cumhaz=np.cumsum(jumps))


def predict_survival(f_test, H0: BaselineHazard, grid: Optional[np.ndarray] = None) -> SurvivalCurve:
    """Scalar f → (m,) values; vector f → (n, m). Default grid is the jump times of Ĥ₀."""
    grid = H0.times if grid is None else np.asarray(grid, dtype=float)
    f = np.asarray(f_test, dtype=float)
    H = H0(grid)
    values = np.exp(-np.multiply.outer(np.exp(f), H))
    return SurvivalCurve(times=grid, values=values)


# ----------------- Kaplan-Meier ----------------- #

def km_estimate(times, indicator) -> KmCurve:
    """Product limit Π_{t_j ≤ t}(1 − d_j/n_j) where d counts the indicated occurrences."""
    times = np.asarray(times, dtype=float)
    indicator = np.asarray(indicator, dtype=bool)
    grid, inverse = np.unique(times, return_inverse=True)
    d = np.bincount(inverse, weights=indicator.astype(float), minlength=grid.size)
    removed = np.bincount(inverse, minlength=grid.size)
    n_at_risk = times.size - np.concatenate([[0], np.cumsum(removed)[:-1]])
    factors = np.where(n_at_risk > 0, 1.0 - d / np.maximum(n_at_risk, 1), 1.0)
    return KmCurve(times=grid, values=np.cumprod(factors),
                   at_risk_counts=n_at_risk.astype(np.int64), occurrences=d.astype(np.int64))


def censoring_km(times, statuses) -> KmCurve:
    t, e = _labeled(times, statuses)
    return km_estimate(t, ~e)


# ----------------- Brier ----------------- #

def brier_score(t: float, curves: SurvivalCurve, times, statuses, G: KmCurve) -> float:
    """
    BS(t) = (1/N)[ Σ_{events, t_i≤t} Ŝ_i(t)²/Ĝ(t_i⁻) + Σ_{t_i>t} (1−Ŝ_i(t))²/Ĝ(t) ]
    Censored samples with t_i ≤ t contribute nothing.
    """
    obs, e = _labeled(times, statuses)
    s = np.asarray(curves.at(t), dtype=float).reshape(-1)
    if s.size != len(statuses):
        raise DimensionError("one survival curve per sample required", (s.size,), (len(statuses),))
    s = s[np.asarray(statuses) != STATUS_CODE[SampleStatus.UNLABELED]]

    past_event = e & (obs <= t)
    alive = obs > t
    total = 0.0
    if past_event.any():
        g_i = G.at(obs[past_event], left=True)
        if np.any(g_i <= 0):
            raise TruncationError(f"censoring survival is zero before an event at or below t={t}; use a smaller t")
        total += float(np.sum(s[past_event] ** 2 / g_i))
    if alive.any():
        g_t = float(G.at(t))
        if g_t <= 0:
            raise TruncationError(f"censoring survival is zero at t={t}; use a smaller t")
        total += float(np.sum((1.0 - s[alive]) ** 2) / g_t)
    return total / obs.size


def integrate_curve(grid: np.ndarray, values: np.ndarray) -> float:
    """(1/T)∫₀ᵀ by the trapezoid rule, T = grid[-1], grid starting at 0."""
    grid = np.asarray(grid, dtype=float)
    if grid.size < 2 or grid[-1] <= grid[0]:
        raise UndefinedMetricError("integration grid is empty")
    return float(trapezoid(values, grid) / (grid[-1] - grid[0]))


def ibs_horizon(train_times, train_statuses, test_times, test_statuses,
                min_at_risk: int = IBS_MIN_AT_RISK) -> float:
    """T = min(t_max, max test time); t_max = largest training event time whose risk set has ≥ min_at_risk members."""
    t, e = _labeled(train_times, train_statuses)
    test_t, _ = _labeled(test_times, test_statuses)
    event_times = np.sort(t[e])
    if event_times.size == 0:
        raise NoEventsError("IBS horizon needs training events")
    at_risk = np.array([(t >= tj).sum() for tj in event_times])

    ok = event_times[at_risk >= min_at_risk]
    if ok.size == 0:
        fallback = max(2, int(np.ceil(event_times.size / 5)))
        ok = event_times[at_risk >= fallback]
        logger.warning(
            f"no training event has {min_at_risk} samples at risk; IBS horizon uses |R| >= {fallback}"
        )
        if ok.size == 0:
            raise TruncationError("no training event time qualifies as the IBS horizon")
    return float(min(ok.max(), test_t.max()))


def integrated_brier_score(curves: SurvivalCurve, times, statuses, train_times, train_statuses,
                           G: Optional[KmCurve] = None) -> float:
    """Trapezoid over {0} ∪ distinct test times in (0, T] ∪ {T}, divided by T. Ĝ defaults to the test reverse KM."""
    T = ibs_horizon(train_times, train_statuses, times, statuses)
    obs, _ = _labeled(times, statuses)
    G = censoring_km(times, statuses) if G is None else G
    grid = np.unique(np.concatenate([[0.0], obs[(obs > 0) & (obs <= T)], [T]]))
    bs = np.array([brier_score(g, curves, times, statuses, G) for g in grid])
    return integrate_curve(grid, bs)


# ----------------- strata ----------------- #

def stratify_and_logrank(pred_risk_test, median_risk_train: float, times,
                         statuses) -> Tuple[KmCurve, KmCurve, float]:
    risk = np.asarray(pred_risk_test, dtype=float)
    keep = np.asarray(statuses) != STATUS_CODE[SampleStatus.UNLABELED]
    risk = risk[keep]
    t, e = _labeled(times, statuses)
    high = risk > median_risk_train
    if high.all() or not high.any():
        raise StratificationError("one risk stratum is empty")
    km_high = km_estimate(t[high], e[high])
    km_low = km_estimate(t[~high], e[~high])
    p = logrank_p(t[high], e[high], t[~high], e[~high])
    return km_high, km_low, p


# ----------------- report ----------------- #

class MetricsReport(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    c_index: float
    ibs: float
    stratification_p: Optional[float] = None
    ibs_horizon: Optional[float] = None
    km_high: Optional[KmCurve] = None
    km_low: Optional[KmCurve] = None
    seed: Optional[int] = None
    fold: Optional[int] = None
    repeat: Optional[int] = None

    @model_validator(mode="after")
    def _finite(self) -> "MetricsReport":
        for name in ("c_index", "ibs", "stratification_p", "ibs_horizon"):
            value = getattr(self, name)
            if value is not None and not np.isfinite(value):
                raise ValueError(f"{name} is not finite")
        return self

    def to_record(self) -> dict:
        return {
            "repeat": self.repeat,
            "fold": self.fold,
            "seed": self.seed,
            "c_index": self.c_index,
            "ibs": self.ibs,
            "stratification_p": self.stratification_p,
        }


def evaluate(train_f, train_times, train_statuses, test_f, test_times, test_statuses,
             seed: Optional[int] = None, fold: Optional[int] = None,
             repeat: Optional[int] = None) -> MetricsReport:
    """Labeled training predictions fit Ĥ₀ and the median; test predictions are scored."""
    H0 = breslow_cumhaz(train_f, train_times, train_statuses)
    curves = predict_survival(test_f, H0)
    c = concordance_index(test_f, test_times, test_statuses)
    ibs = integrated_brier_score(curves, test_times, test_statuses, train_times, train_statuses)
    T = ibs_horizon(train_times, train_statuses, test_times, test_statuses)

    train_keep = np.asarray(train_statuses) != STATUS_CODE[SampleStatus.UNLABELED]
    median = float(np.median(np.asarray(train_f, dtype=float)[train_keep]))
    try:
        km_high, km_low, p = stratify_and_logrank(test_f, median, test_times, test_statuses)
    except StratificationError as exc:
        logger.warning(f"stratification skipped: {exc}")
        km_high = km_low = None
        p = None
    return MetricsReport(c_index=c, ibs=ibs, stratification_p=p, ibs_horizon=T,
                         km_high=km_high, km_low=km_low, seed=seed, fold=fold, repeat=repeat)


def export_km(curve: KmCurve, path: str | Path) -> Path:
    """Two-column time/value CSV (plus at-risk counts) for plotting."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    curve.to_frame().to_csv(path, index=False, float_format="%.10g")
    return path


def reference_km_curves(train_times, train_statuses, n_test: int) -> SurvivalCurve:
    """Every test sample gets the training KM curve; the no-covariate reference for IBS."""
    t, e = _labeled(train_times, train_statuses)
    km = km_estimate(t, e)
    return SurvivalCurve(times=km.times, values=np.tile(km.values, (n_test, 1)))


__all__ = [
    "BaselineHazard",
    "KmCurve",
    "MetricsReport",
    "SurvivalCurve",
    "breslow_cumhaz",
    "brier_score",
    "censoring_km",
    "concordance_index",
    "evaluate",
    "export_km",
    "ibs_horizon",
    "integrate_curve",
    "integrated_brier_score",
    "km_estimate",
    "predict_survival",
    "reference_km_curves",
    "stratify_and_logrank",
]
