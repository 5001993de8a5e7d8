import numpy as np
import pytest

from app.autodiff import Tape, Tensor, no_grad
from app.errors import DimensionError, InvalidRiskSetError, NoEventsError
from app.loss.service import (
    LossConfig,
    build_risk_sets,
    consistency_loss,
    restrict_risk_sets,
    sample_minibatch,
    supervised_loss,
    total_loss,
)
from app.model.pair import forward_student, forward_teacher, init_model
from app.model.schemas import MlpSpec, PairConfig


def test_partial_likelihood_hand_example():
    rs = build_risk_sets(np.array([1.0, 2.0, 3.0]), np.array([1, 1, 0]))
    loss = supervised_loss(Tensor(np.zeros(3)), rs)
    assert loss.item() == pytest.approx(np.log(6.0) / 2)


def test_tied_event_times_share_risk_sets():
    rs = build_risk_sets(np.array([1.0, 1.0, 2.0]), np.array([1, 1, 1]))
    assert [r.tolist() for r in rs.at_risk] == [[0, 1, 2], [0, 1, 2], [2]]
    loss = supervised_loss(Tensor(np.zeros(3)), rs)
    assert loss.item() == pytest.approx(2 * np.log(3.0) / 3)


def test_unlabeled_samples_never_enter_risk_sets():
    times = np.array([np.nan, 1.0, 2.0, np.nan, 4.0])
    status = np.array([-1, 1, 0, -1, 1])
    rs = build_risk_sets(times, status)
    assert rs.event_order.tolist() == [1, 4]
    assert [r.tolist() for r in rs.at_risk] == [[1, 2, 4], [4]]

    f = Tensor(np.array([50.0, 0.0, 0.0, -50.0, 0.0]))
    assert supervised_loss(f, rs).item() == pytest.approx(np.log(3.0) / 2)


def test_risk_set_errors():
    with pytest.raises(NoEventsError):
        build_risk_sets(np.array([1.0, 2.0]), np.array([0, 0]))
    with pytest.raises(InvalidRiskSetError):
        build_risk_sets(np.array([0.0, 2.0]), np.array([1, 0]))
    rs = build_risk_sets(np.array([1.0, 2.0]), np.array([1, 0]))
    with pytest.raises(DimensionError):
        supervised_loss(Tensor(np.zeros(3)), rs)


def test_supervised_loss_is_shift_invariant(rng):
    times = rng.exponential(size=12) + 0.01
    status = (rng.random(12) < 0.6).astype(int)
    status[0] = 1
    rs = build_risk_sets(times, status)
    f = rng.normal(size=12)
    a = supervised_loss(Tensor(f), rs).item()
    b = supervised_loss(Tensor(f + 7.5), rs).item()
    assert a == pytest.approx(b, abs=1e-12)


def test_supervised_loss_gradient(rng, numeric_grad):
    times = rng.exponential(size=8) + 0.01
    status = np.array([1, 0, 1, 1, 0, 1, -1, 1])
    times[status == -1] = np.nan
    rs = build_risk_sets(times, status)
    f = Tensor(rng.normal(size=8), requires_grad=True)
    with Tape() as tape:
        loss = supervised_loss(f, rs)
    tape.backward(loss)

    with no_grad():
        expected = numeric_grad(lambda: supervised_loss(f, rs).item(), f.values)
    np.testing.assert_allclose(f.grad, expected, rtol=1e-6, atol=1e-9)
    assert f.grad[6] == 0.0


def test_consistency_loss_blocks_teacher_gradient():
    student = Tensor([1.0, 2.0, 4.0], requires_grad=True)
    teacher = Tensor([1.0, 1.0, 1.0], requires_grad=True)
    with Tape() as tape:
        lu = consistency_loss(student, teacher)
    tape.backward(lu)
    assert lu.item() == pytest.approx((0 + 1 + 9) / 3)
    np.testing.assert_allclose(student.grad, [0.0, 2 / 3, 2.0])
    assert teacher.grad is None


def test_empty_consistency_set_contributes_zero():
    assert consistency_loss(Tensor(np.zeros(0)), np.zeros(0)).item() == 0.0
    with pytest.raises(DimensionError):
        consistency_loss(Tensor(np.zeros(2)), np.zeros(3))


def test_total_loss_weighting():
    ls, lu = Tensor(2.0), Tensor(3.0)
    assert total_loss(ls, lu, LossConfig(consistency_weight=0.5)).item() == pytest.approx(3.5)
    assert total_loss(ls, lu, LossConfig(consistency_weight=0.0)) is ls


def test_minibatch_without_subsampling_matches_full_loss(small_cohort, rng):
    ds, _ = small_cohort
    rs = build_risk_sets(ds.times, ds.status)
    cfg = LossConfig(batch_mode="risk_set_minibatch", minibatch_events=rs.n_events,
                     risk_controls_per_event=ds.n_samples, consistency_batch=5)
    mb = sample_minibatch(rs, ds, cfg, rng)
    assert not np.any(mb.risk.offsets)

    f = rng.normal(size=ds.n_samples)
    full = supervised_loss(Tensor(f), rs).item()
    local = supervised_loss(Tensor(f[mb.sample_indices]), mb.risk).item()
    assert local == pytest.approx(full, rel=1e-12)

    cons_rows = mb.sample_indices[mb.consistency]
    assert cons_rows.size == 5
    assert np.all(ds.censored_mask[cons_rows] | ds.unlabeled_mask[cons_rows])


def test_subsampled_risk_sets_carry_size_offsets(small_cohort, rng):
    ds, _ = small_cohort
    rs = build_risk_sets(ds.times, ds.status)
    cfg = LossConfig(batch_mode="risk_set_minibatch", minibatch_events=4, risk_controls_per_event=3)
    mb = sample_minibatch(rs, ds, cfg, rng)

    assert mb.risk.n_events == 4
    for row, event in enumerate(mb.events):
        full_size = len(rs.at_risk[int(np.flatnonzero(rs.event_order == event)[0])])
        kept = mb.risk.at_risk[row]
        assert mb.risk.event_order[row] in kept
        assert mb.risk.offsets[row] == pytest.approx(np.log(full_size / len(kept)))


def test_minibatch_events_are_clipped(small_cohort, rng):
    ds, _ = small_cohort
    rs = build_risk_sets(ds.times, ds.status)
    mb = sample_minibatch(rs, ds, LossConfig(minibatch_events=10_000), rng)
    assert mb.risk.n_events == rs.n_events


def test_restricted_risk_sets_keep_full_membership():
    rs = build_risk_sets(np.array([1.0, 2.0, 3.0, 4.0]), np.array([1, 1, 0, 1]))
    sub = restrict_risk_sets(rs, np.array([1]))
    assert sub.event_order.tolist() == [1]
    assert sub.at_risk[0].tolist() == [1, 2, 3]
    assert restrict_risk_sets(rs, None) is rs


@pytest.mark.parametrize("which", ["supervised", "consistency"])
def test_every_mlp_parameter_gradient_matches_finite_differences(which, rng, numeric_grad):
    config = PairConfig(alpha=0.9, noise_sigma=0.1, student_dropout=0.25, teacher_dropout=0.25)
    pair = init_model(MlpSpec(input_dim=3, hidden_sizes=[4, 3]), seed=2, config=config)
    x = rng.normal(size=(10, 3))
    times = rng.exponential(size=10) + 0.01
    status = np.array([1, 0, 1, 1, 0, 1, -1, 1, -1, 0])
    times[status == -1] = np.nan
    rs = build_risk_sets(times, status)
    target = forward_teacher(pair, x, np.random.default_rng(9))

    def loss_fn():
        # a fresh generator per call keeps the dropout masks and noise fixed
        f = forward_student(pair, x, np.random.default_rng(5))
        return supervised_loss(f, rs) if which == "supervised" else consistency_loss(f, target)

    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)

    for name, p in pair.student.items():
        with no_grad():
            expected = numeric_grad(lambda: loss_fn().item(), p.values)
        np.testing.assert_allclose(p.grad, expected, rtol=1e-4, atol=1e-8, err_msg=name)
