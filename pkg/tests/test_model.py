import numpy as np
import pytest
from pydantic import ValidationError

from app.autodiff import Tape, Tensor
from app.errors import DegenerateAttentionError, DimensionError, IngestionFormatError
from app.model.checkpoint import load_checkpoint, save_checkpoint
from app.model.networks import (
    FusionInput,
    MlpNetwork,
    attention_unit,
    tokenize_expression,
    tokenize_patches,
)
from app.model.pair import ema_update, forward_eval, forward_student, forward_teacher, init_model
from app.model.schemas import ConcatSpec, FusionSpec, MlpSpec, PairConfig, TokenSequence

QUIET = PairConfig(alpha=0.9, noise_sigma=0.0, student_dropout=0.0, teacher_dropout=0.0)


@pytest.fixture
def fusion_spec():
    return FusionSpec(expr_dim=5, patch_dim=6, expr_token_count=3, token_dim=8, max_patch_tokens=4,
                      heads_per_mha=2, mha_output_dim=4, head_hidden_sizes=[6], dropout_rate=0.0)


@pytest.fixture
def fusion_input(rng):
    return FusionInput(expression=rng.normal(size=(3, 5)),
                       patches=[rng.normal(size=(n, 6)) for n in (1, 4, 7)])


# ----------------- MLP ----------------- #

def test_mlp_initialization(rng):
    spec = MlpSpec(input_dim=4, hidden_sizes=[8, 3])
    params = MlpNetwork(spec).init_params(rng)
    assert list(params) == ["W0", "b0", "W1", "b1", "W2", "b2"]
    assert params["W1"].shape == (8, 3)
    assert np.abs(params["W0"].values).max() <= 0.5
    assert not params["b2"].values.any()


def test_mlp_forward_shapes_and_determinism(rng):
    net = MlpNetwork(MlpSpec(input_dim=4, hidden_sizes=[8]))
    params = net.init_params(rng)
    x = rng.normal(size=(5, 4))
    a = net.forward(params, x, np.random.default_rng(1), train=False, noise_sigma=1.0, dropout_rate=0.5)
    b = net.forward(params, x, np.random.default_rng(2), train=False, noise_sigma=1.0, dropout_rate=0.5)
    assert a.shape == (5,)
    np.testing.assert_array_equal(a.values, b.values)
    assert net.forward(params, x[0], rng, train=False).shape == (1,)
    with pytest.raises(DimensionError):
        net.forward(params, rng.normal(size=(5, 3)), rng, train=False)


def test_student_perturbations_change_training_forward(rng):
    pair = init_model(MlpSpec(input_dim=4, hidden_sizes=[8]), seed=0,
                      config=PairConfig(noise_sigma=0.5, student_dropout=0.3, teacher_dropout=0.3))
    x = rng.normal(size=(6, 4))
    a = forward_student(pair, x, np.random.default_rng(1))
    b = forward_student(pair, x, np.random.default_rng(2))
    assert not np.allclose(a.values, b.values)
    np.testing.assert_allclose(forward_student(pair, x, rng, mode="eval").values, forward_eval(pair, x, "student"))


# ----------------- student / teacher ----------------- #

def test_teacher_starts_as_copy_without_gradients():
    pair = init_model(MlpSpec(input_dim=3, hidden_sizes=[4]), seed=7, config=QUIET)
    for name, p in pair.student.items():
        np.testing.assert_array_equal(p.values, pair.teacher[name].values)
        assert p.requires_grad
        assert not pair.teacher[name].requires_grad


def test_teacher_output_is_detached(rng):
    pair = init_model(MlpSpec(input_dim=3, hidden_sizes=[4]), seed=0, config=QUIET)
    x = rng.normal(size=(4, 3))
    with Tape() as tape:
        target = forward_teacher(pair, x, rng)
        loss = ((forward_student(pair, x, rng) - target) ** 2).sum()
    tape.backward(loss)
    assert target.tape_id is None
    assert all(p.grad is None for p in pair.teacher.values())
    assert pair.student["W0"].grad is not None


def test_ema_follows_closed_form():
    pair = init_model(MlpSpec(input_dim=3, hidden_sizes=[4]), seed=0, config=QUIET)
    rng = np.random.default_rng(3)
    for p in pair.student.values():
        p.values = p.values + rng.normal(size=p.shape)
    gap = {k: pair.teacher[k].values - pair.student[k].values for k in pair.student}

    for _ in range(25):
        ema_update(pair, 0.9)
    for k, p in pair.student.items():
        np.testing.assert_allclose(pair.teacher[k].values - p.values, 0.9 ** 25 * gap[k], atol=1e-12)


def test_ema_with_zero_alpha_copies_student():
    pair = init_model(MlpSpec(input_dim=3, hidden_sizes=[4]), seed=0, config=QUIET)
    for p in pair.student.values():
        p.values = p.values + 1.0
    ema_update(pair, 0.0)
    assert pair.snapshot("teacher").keys() == pair.snapshot("student").keys()
    for k, v in pair.snapshot("student").items():
        np.testing.assert_array_equal(pair.teacher[k].values, v)


# ----------------- fusion ----------------- #

def test_fusion_forward_shape_and_parameter_names(fusion_spec, fusion_input):
    pair = init_model(fusion_spec, seed=0, config=QUIET)
    assert pair.student["expr_proj"].shape == (3, 5, 8)
    assert "mha2.Wo" in pair.student and "head.W0" in pair.student
    out = forward_eval(pair, fusion_input, "teacher")
    assert out.shape == (3,)
    assert np.all(np.isfinite(out))


def test_expression_tokens(fusion_spec, rng):
    params = init_model(fusion_spec, seed=0, config=QUIET).student
    y = Tensor(rng.normal(size=5))
    seq = tokenize_expression(params, y, fusion_spec)
    assert seq.tokens.shape == (4, 8)
    assert seq.n_real == 4
    np.testing.assert_allclose(seq.tokens.values[2], y.values @ params["expr_proj"].values[1])
    with pytest.raises(DimensionError):
        tokenize_expression(params, Tensor(np.ones(4)), fusion_spec)


def test_patch_tokens_are_capped_and_padded(fusion_spec, rng):
    params = init_model(fusion_spec, seed=0, config=QUIET).student
    few = tokenize_patches(params, rng.normal(size=(2, 6)), fusion_spec, rng)
    assert few.tokens.shape == (5, 8)
    assert few.pad_mask.tolist() == [False, False, False, True, True]

    many = tokenize_patches(params, rng.normal(size=(50, 6)), fusion_spec, rng, train=True)
    assert many.tokens.shape == (5, 8)
    assert not many.pad_mask.any()


def test_attention_ignores_padding(fusion_spec, rng):
    params = init_model(fusion_spec, seed=0, config=QUIET).student
    query = TokenSequence(tokens=Tensor(rng.normal(size=(4, 8))), pad_mask=np.zeros(4, dtype=bool))
    real = rng.normal(size=(3, 8))
    short = TokenSequence(tokens=Tensor(real), pad_mask=np.zeros(3, dtype=bool))
    padded = TokenSequence(tokens=Tensor(np.vstack([real, 100.0 * rng.normal(size=(5, 8))])),
                           pad_mask=np.array([False] * 3 + [True] * 5))

    a = attention_unit(params, "mha1", query, short, heads=2)
    b = attention_unit(params, "mha1", query, padded, heads=2)
    assert a.shape == (1, 4)
    np.testing.assert_allclose(a.values, b.values, rtol=1e-12, atol=1e-12)

    empty = TokenSequence(tokens=Tensor(real), pad_mask=np.ones(3, dtype=bool))
    with pytest.raises(DegenerateAttentionError):
        attention_unit(params, "mha1", query, empty, heads=2)


def _attention_by_hand(params, unit, query, keys, heads, pad=None):
    q = query[0:1] @ params[f"{unit}.Wq"]
    k = keys @ params[f"{unit}.Wk"]
    v = keys @ params[f"{unit}.Wv"]
    dh = q.shape[1] // heads
    out = []
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        scores = (k[:, cols] @ q[0, cols]) / np.sqrt(dh)
        if pad is not None:
            scores = np.where(pad, -np.inf, scores)
        w = np.exp(scores - scores.max())
        w = w / w.sum()
        out.append(w @ v[:, cols])
    return np.concatenate(out)[None, :] @ params[f"{unit}.Wo"]


def test_single_head_attention_matches_hand_computation(rng):
    params = {f"u.{name}": rng.normal(size=(4, 4)) for name in ("Wq", "Wk", "Wv")}
    params["u.Wo"] = rng.normal(size=(4, 3))
    query = rng.normal(size=(2, 4))
    keys = rng.normal(size=(2, 4))

    got = attention_unit({k: Tensor(v) for k, v in params.items()}, "u",
                         TokenSequence(tokens=Tensor(query), pad_mask=np.zeros(2, dtype=bool)),
                         TokenSequence(tokens=Tensor(keys), pad_mask=np.zeros(2, dtype=bool)), heads=1)

    # two keys: softmax reduces to a logistic weight on the score gap
    q = query[0] @ params["u.Wq"]
    s = (keys @ params["u.Wk"]) @ q / 2.0
    w0 = 1.0 / (1.0 + np.exp(s[1] - s[0]))
    v = keys @ params["u.Wv"]
    expected = (w0 * v[0] + (1.0 - w0) * v[1]) @ params["u.Wo"]
    np.testing.assert_allclose(got.values[0], expected, rtol=0, atol=1e-10)


def test_attention_with_padded_keys_matches_hand_computation(fusion_spec, rng):
    params = init_model(fusion_spec, seed=4, config=QUIET).student
    raw = {name: p.values for name, p in params.items()}
    query = rng.normal(size=(3, 8))
    keys = rng.normal(size=(6, 8))
    pad = np.array([False, False, True, False, True, True])

    got = attention_unit(params, "mha2",
                         TokenSequence(tokens=Tensor(query), pad_mask=np.zeros(3, dtype=bool)),
                         TokenSequence(tokens=Tensor(keys), pad_mask=pad), heads=2)
    expected = _attention_by_hand(raw, "mha2", query, keys, heads=2, pad=pad)
    np.testing.assert_allclose(got.values, expected, rtol=0, atol=1e-10)

    # only the unpadded rows matter
    kept = _attention_by_hand(raw, "mha2", query, keys[~pad], heads=2)
    np.testing.assert_allclose(got.values, kept, rtol=0, atol=1e-10)


def test_fusion_gradient_matches_finite_differences(fusion_spec, fusion_input, numeric_grad):
    pair = init_model(fusion_spec, seed=1, config=QUIET)
    x = FusionInput(expression=fusion_input.expression[:2], patches=fusion_input.patches[:2])
    rng = np.random.default_rng(0)
    with Tape() as tape:
        loss = forward_student(pair, x, rng).sum()
    tape.backward(loss)

    target = pair.student["cls_patch"]
    expected = numeric_grad(lambda: forward_eval(pair, x, "student").sum(), target.values)
    np.testing.assert_allclose(target.grad, expected, rtol=1e-5, atol=1e-8)


def test_fusion_spec_needs_divisible_heads():
    with pytest.raises(ValidationError):
        FusionSpec(expr_dim=5, token_dim=10, heads_per_mha=4)


def test_concat_network_forward(rng):
    spec = ConcatSpec(expr_dim=5, patch_dim=6, embed_dim=4, head_hidden_sizes=[3])
    pair = init_model(spec, seed=0)
    x = FusionInput(expression=rng.normal(size=(3, 5)), patches=[rng.normal(size=(n, 6)) for n in (2, 3, 9)])
    assert forward_eval(pair, x, "student").shape == (3,)
    with pytest.raises(DimensionError):
        forward_eval(pair, rng.normal(size=(3, 5)), "student")


# ----------------- checkpoints ----------------- #

def test_checkpoint_restores_both_parameter_sets(tmp_path, rng):
    pair = init_model(MlpSpec(input_dim=3, hidden_sizes=[5]), seed=2, config=QUIET)
    for p in pair.student.values():
        p.values = p.values + 0.5
    path, manifest = save_checkpoint(pair, tmp_path / "ckpt" / "model.ckpt", extra={"consistency_weight": 0.5})
    loaded, extra = load_checkpoint(path)

    x = rng.normal(size=(4, 3))
    np.testing.assert_array_equal(forward_eval(loaded, x, "student"), forward_eval(pair, x, "student"))
    np.testing.assert_array_equal(forward_eval(loaded, x, "teacher"), forward_eval(pair, x, "teacher"))
    assert extra == {"consistency_weight": 0.5}
    assert loaded.config == QUIET
    assert manifest.exists()


def test_checkpoint_rejects_foreign_files(tmp_path):
    bogus = tmp_path / "bogus.ckpt"
    bogus.write_bytes(b"not a checkpoint")
    with pytest.raises(IngestionFormatError):
        load_checkpoint(bogus)
    with pytest.raises(IngestionFormatError):
        load_checkpoint(tmp_path / "absent.ckpt")
