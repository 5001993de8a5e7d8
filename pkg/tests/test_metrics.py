import numpy as np
import pandas as pd
import pytest
from lifelines.utils import concordance_index as lifelines_concordance

from app.errors import BoundError, StratificationError, TruncationError, UndefinedMetricError
from app.loss.service import build_risk_sets
from app.metrics.service import (
    SurvivalCurve,
    breslow_cumhaz,
    brier_score,
    censoring_km,
    concordance_index,
    evaluate,
    export_km,
    ibs_horizon,
    integrate_curve,
    integrated_brier_score,
    km_estimate,
    predict_survival,
    reference_km_curves,
    stratify_and_logrank,
)
from app.metrics.stats import box_stats, wilcoxon_rank_sum
from extraction.synthetic import SyntheticConfig, generate_synthetic


# ----------------- concordance ----------------- #

def test_concordance_hand_example():
    times = np.array([1.0, 2.0, 3.0])
    status = np.array([1, 1, 0])
    assert concordance_index([3.0, 1.0, 2.0], times, status) == pytest.approx(2 / 3)
    assert concordance_index([3.0, 2.0, 1.0], times, status) == 1.0
    assert concordance_index([1.0, 2.0, 3.0], times, status) == 0.0
    assert concordance_index([1.0, 1.0, 1.0], times, status) == 0.5


def test_concordance_agrees_with_lifelines(rng):
    times = rng.exponential(size=60)
    status = (rng.random(60) < 0.7).astype(int)
    risk = rng.normal(size=60) - times
    expected = lifelines_concordance(times, -risk, status)
    assert concordance_index(risk, times, status) == pytest.approx(expected)


def test_concordance_skips_unlabeled_and_needs_pairs():
    times = np.array([1.0, np.nan, 2.0])
    status = np.array([1, -1, 0])
    assert concordance_index([5.0, -100.0, 1.0], times, status) == 1.0
    with pytest.raises(UndefinedMetricError):
        concordance_index([1.0, 2.0], np.array([1.0, 2.0]), np.array([0, 0]))


# ----------------- Breslow / survival ----------------- #

def test_breslow_hand_example():
    H0 = breslow_cumhaz(np.zeros(3), np.array([1.0, 2.0, 3.0]), np.array([1, 1, 1]))
    np.testing.assert_allclose(H0.cumhaz, [1 / 3, 5 / 6, 11 / 6])
    np.testing.assert_allclose(H0([0.5, 2.0, 2.5, 10.0]), [0.0, 5 / 6, 5 / 6, 11 / 6])


def test_survival_curves_scale_with_risk():
    H0 = breslow_cumhaz(np.zeros(3), np.array([1.0, 2.0, 3.0]), np.array([1, 1, 0]))
    curves = predict_survival(np.array([0.0, np.log(2.0)]), H0)
    assert curves.values.shape == (2, 2)
    np.testing.assert_allclose(curves.values[1], curves.values[0] ** 2)
    np.testing.assert_allclose(curves.at(0.5), [1.0, 1.0])
    assert np.all(np.diff(curves.values, axis=1) <= 0)


# ----------------- Kaplan-Meier ----------------- #

def test_kaplan_meier_hand_example():
    times = np.array([1.0, 2.0, 2.0, 3.0, 4.0])
    events = np.array([1, 1, 0, 1, 0], dtype=bool)
    km = km_estimate(times, events)
    np.testing.assert_allclose(km.values, [0.8, 0.6, 0.3, 0.3])
    assert km.at_risk_counts.tolist() == [5, 4, 2, 1]
    assert km.at(0.5) == 1.0
    assert km.at(2.0) == pytest.approx(0.6)
    assert km.at(2.0, left=True) == pytest.approx(0.8)


def test_censoring_km_reverses_the_indicator():
    G = censoring_km(np.array([1.0, 2.0, 2.0, 3.0, 4.0]), np.array([1, 1, 0, 1, 0]))
    np.testing.assert_allclose(G.values, [1.0, 0.75, 0.75, 0.0])
    assert G.at(4.0, left=True) == pytest.approx(0.75)


def test_export_km(tmp_path):
    km = km_estimate(np.array([2.0, 5.0]), np.array([True, True]))
    frame = pd.read_csv(export_km(km, tmp_path / "curves" / "km.csv"))
    assert frame["time"].tolist() == [0.0, 2.0, 5.0]
    assert frame["value"].tolist() == [1.0, 0.5, 0.0]


# ----------------- Brier ----------------- #

def test_brier_score_hand_example():
    curves = SurvivalCurve(times=np.array([1.0, 2.0]), values=np.array([[0.5, 0.2], [0.9, 0.8]]))
    times = np.array([1.0, 3.0])
    status = np.array([1, 0])
    G = censoring_km(times, status)
    assert brier_score(2.0, curves, times, status, G) == pytest.approx(0.04)


def test_brier_score_needs_positive_censoring_survival():
    curves = SurvivalCurve(times=np.array([1.0]), values=np.array([[0.5]]))
    G = km_estimate(np.array([0.5]), np.array([True]))
    with pytest.raises(TruncationError):
        brier_score(2.0, curves, np.array([1.0]), np.array([1]), G)


def test_integrate_curve_trapezoid():
    assert integrate_curve(np.array([0.0, 1.0, 2.0]), np.array([0.0, 1.0, 0.0])) == pytest.approx(0.5)
    with pytest.raises(UndefinedMetricError):
        integrate_curve(np.array([0.0]), np.array([0.0]))


def test_ibs_horizon():
    train_t = np.arange(1.0, 31.0)
    train_s = np.ones(30, dtype=int)
    assert ibs_horizon(train_t, train_s, np.array([2.0, 8.0]), np.array([1, 0])) == 8.0
    assert ibs_horizon(train_t, train_s, np.array([2.0, 15.0]), np.array([1, 0])) == 11.0
    # fewer than 20 at risk anywhere → relaxed to |R| >= 2
    assert ibs_horizon(np.arange(1.0, 11.0), np.ones(10, dtype=int), np.array([50.0]), np.array([1])) == 9.0


# ----------------- brute-force oracles ----------------- #

def _random_labeled_cohort(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 51))
    # rounded times give ties between events and censorings
    times = np.round(rng.exponential(2.0, size=n), 1) + 0.1
    status = (rng.random(n) < 0.6).astype(int)
    status[0] = 1
    times[0] = times.min() / 2.0
    return rng, times, status


def _km_by_hand(times, indicator, t, left=False):
    value = 1.0
    for u in np.unique(times):
        if u > t or (left and u == t):
            break
        at_risk = np.sum(times >= u)
        d = np.sum(indicator & (times == u))
        value *= 1.0 - d / at_risk
    return value


@pytest.mark.parametrize("seed", range(8))
def test_concordance_matches_pair_enumeration(seed):
    rng, times, status = _random_labeled_cohort(seed)
    risk = rng.integers(0, 4, size=times.size).astype(float)
    hits, pairs = 0.0, 0
    for i in range(times.size):
        for j in range(times.size):
            if status[i] == 1 and times[i] < times[j]:
                pairs += 1
                hits += 1.0 if risk[i] > risk[j] else 0.5 if risk[i] == risk[j] else 0.0
    assert concordance_index(risk, times, status) == pytest.approx(hits / pairs, abs=1e-10)


@pytest.mark.parametrize("seed", range(8))
def test_breslow_matches_direct_sum(seed):
    rng, times, status = _random_labeled_cohort(seed)
    f = rng.normal(size=times.size)
    H0 = breslow_cumhaz(f, times, status)
    query = np.concatenate([times, times + 0.05, [0.0, times.max() + 1.0]])
    expected = [sum(1.0 / np.exp(f[times >= times[i]]).sum()
                    for i in range(times.size) if status[i] == 1 and times[i] <= q)
                for q in query]
    np.testing.assert_allclose(H0(query), expected, rtol=0, atol=1e-10)


@pytest.mark.parametrize("seed", range(8))
def test_kaplan_meier_matches_product_limit(seed):
    _, times, status = _random_labeled_cohort(seed)
    events = status == 1
    km = km_estimate(times, events)
    G = censoring_km(times, status)
    for q in np.concatenate([times, times + 0.05, [0.0]]):
        assert km.at(q) == pytest.approx(_km_by_hand(times, events, q), abs=1e-10)
        assert km.at(q, left=True) == pytest.approx(_km_by_hand(times, events, q, left=True), abs=1e-10)
        assert G.at(q) == pytest.approx(_km_by_hand(times, ~events, q), abs=1e-10)
        assert G.at(q, left=True) == pytest.approx(_km_by_hand(times, ~events, q, left=True), abs=1e-10)


@pytest.mark.parametrize("seed", range(8))
def test_risk_sets_match_membership_rule(seed):
    _, times, status = _random_labeled_cohort(seed)
    status = status.copy()
    status[-1] = -1
    times = times.copy()
    times[-1] = np.nan
    rs = build_risk_sets(times, status)
    events = [i for i in range(times.size) if status[i] == 1]
    assert sorted(rs.event_order.tolist()) == events
    assert np.all(np.diff(times[rs.event_order]) >= 0)
    for i, members in zip(rs.event_order, rs.at_risk):
        expected = [j for j in range(times.size) if status[j] != -1 and times[j] >= times[i]]
        assert members.tolist() == expected


@pytest.mark.parametrize("seed", range(8))
def test_brier_score_matches_term_by_term_sum(seed):
    rng, times, status = _random_labeled_cohort(seed)
    n = times.size
    grid = np.unique(times)
    values = np.cumprod(rng.uniform(0.7, 1.0, size=(n, grid.size)), axis=1)
    curves = SurvivalCurve(times=grid, values=values)
    G = censoring_km(times, status)
    censored = status == 0

    def s_at(i, t):
        pos = np.searchsorted(grid, t, side="right")
        return 1.0 if pos == 0 else values[i, pos - 1]

    for t in np.quantile(times, [0.2, 0.5, 0.8]):
        total = 0.0
        for i in range(n):
            if status[i] == 1 and times[i] <= t:
                total += s_at(i, t) ** 2 / _km_by_hand(times, censored, times[i], left=True)
            elif times[i] > t:
                total += (1.0 - s_at(i, t)) ** 2 / _km_by_hand(times, censored, t)
        assert brier_score(t, curves, times, status, G) == pytest.approx(total / n, abs=1e-10)


# ----------------- properties ----------------- #

@pytest.mark.parametrize("transform", [np.exp, lambda r: 3.0 * r + 1.0, lambda r: r ** 3])
def test_concordance_is_invariant_under_increasing_maps(transform):
    rng, times, status = _random_labeled_cohort(21)
    risk = rng.integers(-3, 4, size=times.size).astype(float)
    assert concordance_index(transform(risk), times, status) == pytest.approx(
        concordance_index(risk, times, status), abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_concordance_of_negated_risk_is_complementary(seed):
    rng, times, status = _random_labeled_cohort(seed)
    risk = rng.normal(size=times.size)
    total = concordance_index(risk, times, status) + concordance_index(-risk, times, status)
    assert total == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("shift", [-2.0, 0.5, 3.0])
def test_breslow_scales_with_risk_shift(shift):
    rng, times, status = _random_labeled_cohort(33)
    f = rng.normal(size=times.size)
    H0 = breslow_cumhaz(f, times, status)
    shifted = breslow_cumhaz(f + shift, times, status)
    np.testing.assert_allclose(shifted.cumhaz, np.exp(-shift) * H0.cumhaz, rtol=1e-12)

    f_test = rng.normal(size=4)
    np.testing.assert_allclose(predict_survival(f_test + shift, shifted).values,
                               predict_survival(f_test, H0).values, rtol=1e-10)


@pytest.fixture
def cohort_split():
    ds, beta = generate_synthetic(SyntheticConfig(n_samples=300, d=3, beta_scale=2.0, censor_rate=0.3, seed=5))
    f = ds.features @ beta
    return (f[:200], ds.times[:200], ds.status[:200]), (f[200:], ds.times[200:], ds.status[200:])


def test_informative_model_beats_reference_curves(cohort_split):
    (train_f, train_t, train_s), (test_f, test_t, test_s) = cohort_split
    H0 = breslow_cumhaz(train_f, train_t, train_s)
    model_ibs = integrated_brier_score(predict_survival(test_f, H0), test_t, test_s, train_t, train_s)
    reference_ibs = integrated_brier_score(reference_km_curves(train_t, train_s, test_t.size),
                                           test_t, test_s, train_t, train_s)
    assert 0.0 <= model_ibs < reference_ibs < 0.5


def test_evaluate_report(cohort_split):
    (train_f, train_t, train_s), (test_f, test_t, test_s) = cohort_split
    report = evaluate(train_f, train_t, train_s, test_f, test_t, test_s, seed=3, fold=1, repeat=0)
    assert report.c_index > 0.65
    assert 0.0 < report.ibs < 0.25
    assert report.stratification_p is not None and report.stratification_p < 0.05
    assert report.km_high is not None and report.km_low is not None
    assert report.to_record()["fold"] == 1


# ----------------- strata / stats ----------------- #

def test_stratification_separates_groups():
    times = np.concatenate([np.arange(1.0, 11.0), np.arange(21.0, 31.0)])
    status = np.ones(20, dtype=int)
    risk = np.concatenate([np.full(10, 2.0), np.full(10, -2.0)])
    km_high, km_low, p = stratify_and_logrank(risk, 0.0, times, status)
    assert km_high.times.max() == 10.0 and km_low.times.min() == 21.0
    assert p < 1e-4
    with pytest.raises(StratificationError):
        stratify_and_logrank(risk, 5.0, times, status)


def test_wilcoxon_rank_sum():
    a = np.arange(20.0)
    b = np.arange(100.0, 120.0)
    assert wilcoxon_rank_sum(a, b) == pytest.approx(6.8e-8, rel=0.05)
    assert wilcoxon_rank_sum(a, a) > 0.99
    assert wilcoxon_rank_sum([1.0, 1.0], [1.0, 1.0]) == 1.0
    with pytest.raises(BoundError):
        wilcoxon_rank_sum([1.0], [2.0, 3.0])


def test_box_stats():
    stats = box_stats(list(range(1, 10)) + [100])
    assert stats["median"] == pytest.approx(5.5)
    assert stats["q1"] == pytest.approx(3.25)
    assert stats["q3"] == pytest.approx(7.75)
    assert stats["whisker_high"] == 9.0
    assert stats["n_outliers"] == 1
    with pytest.raises(BoundError):
        box_stats([])
