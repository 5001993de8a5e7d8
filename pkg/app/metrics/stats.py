"""Two-sample tests and summary statistics over per-run metric values."""
from __future__ import annotations

from typing import Dict, Sequence

import numpy as np
from lifelines.statistics import logrank_test
from scipy.stats import mannwhitneyu

from app.errors import BoundError


def logrank_p(times_a, events_a, times_b, events_b) -> float:
    """Two-sample log-rank chi-square (1 df) p-value."""
    result = logrank_test(
        np.asarray(times_a, dtype=float), np.asarray(times_b, dtype=float),
        event_observed_A=np.asarray(events_a, dtype=bool),
        event_observed_B=np.asarray(events_b, dtype=bool),
    )
    p = float(result.p_value)
    return 1.0 if not np.isfinite(p) else p


def wilcoxon_rank_sum(a: Sequence[float], b: Sequence[float]) -> float:
    """
    Two-sided rank-sum p-value: normal approximation with continuity correction
    and midranks. Fully separated 20-vs-20 samples give ≈ 6.8e-8.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise BoundError("rank-sum test needs at least two values per group")
    pooled = np.concatenate([a, b])
    if np.all(pooled == pooled[0]):
        return 1.0
    result = mannwhitneyu(a, b, alternative="two-sided", method="asymptotic", use_continuity=True)
    return float(min(1.0, result.pvalue))


def box_stats(values: Sequence[float]) -> Dict[str, float]:
    """Quartiles and 1.5·IQR whiskers clipped to the data, as drawn in a box plot."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise BoundError("box statistics need at least one value")
    q1, median, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lower = v[v >= q1 - 1.5 * iqr].min()
    upper = v[v <= q3 + 1.5 * iqr].max()
    return {
        "mean": float(v.mean()),
        "median": float(median),
        "q1": float(q1),
        "q3": float(q3),
        "whisker_low": float(lower),
        "whisker_high": float(upper),
        "n_outliers": int(((v < lower) | (v > upper)).sum()),
    }
