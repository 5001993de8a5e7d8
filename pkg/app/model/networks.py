"""
Hazard networks f(x) → log-hazard, written as stateless architectures over an
explicit parameter dict so one architecture serves both student (θ) and
teacher (θ').

    MlpNetwork          expression (or averaged patch) vector → MLP → scalar
    FusionNetwork       32 expression tokens ⨯ ≤128 patch tokens, mutual attention, MLP head
    ConcatFusionNetwork both views projected to a small embedding, concatenated, MLP head
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Sequence, Union

import numpy as np

from app.autodiff import Tensor, concat, dropout, gaussian_noise, masked_fill, matmul, softmax
from app.errors import DegenerateAttentionError, DimensionError
from app.model.schemas import ConcatSpec, FusionSpec, MlpSpec, TokenSequence
from extraction.schemas import SurvivalDataset

Params = Dict[str, Tensor]

_ACTIVATIONS = {
    "tanh": lambda t: t.tanh(),
    "relu": lambda t: t.relu(),
}


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


@dataclass
class FusionInput:
    expression: np.ndarray          # n × d
    patches: List[np.ndarray]       # n arrays, each n_patches × patch_dim

    def __len__(self) -> int:
        return self.expression.shape[0]


ModelInput = Union[np.ndarray, FusionInput]


# ----------------- MLP ----------------- #

class MlpNetwork:
    def __init__(self, spec: MlpSpec, prefix: str = ""):
        self.spec = spec
        self.prefix = prefix
        self._act = _ACTIVATIONS[spec.activation]

    def init_params(self, rng: np.random.Generator) -> Params:
        params: Params = OrderedDict()
        sizes = self.spec.layer_sizes()
        for layer, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            params[f"{self.prefix}W{layer}"] = _uniform(rng, fan_in, (fan_in, fan_out))
            params[f"{self.prefix}b{layer}"] = _zeros((fan_out,))
        return params

    def inputs(self, ds: SurvivalDataset, indices: Sequence[int], teacher_view: bool = False) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.int64)
        if teacher_view and ds.teacher_features is not None:
            return ds.teacher_features[idx]
        return ds.features[idx]

    def hidden_forward(self, params: Params, h: Tensor, rng: np.random.Generator,
                       train: bool, dropout_rate: float) -> Tensor:
        """h: n × input_dim tensor already perturbed; returns n × 1."""
        n_layers = len(self.spec.layer_sizes()) - 1
        for layer in range(n_layers):
            h = h @ params[f"{self.prefix}W{layer}"] + params[f"{self.prefix}b{layer}"]
            if layer < n_layers - 1:
                h = self._act(h)
                h = dropout(h, dropout_rate, rng, train)
        return h

    def forward(self, params: Params, x: ModelInput, rng: np.random.Generator, train: bool,
                noise_sigma: float = 0.0, dropout_rate: float = 0.0) -> Tensor:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(1, -1)
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise DimensionError("input does not match the network input dimension", x.shape, (self.spec.input_dim,))
        h = gaussian_noise(Tensor(x), noise_sigma, rng, train)
        out = self.hidden_forward(params, h, rng, train, dropout_rate)
        return out.reshape(x.shape[0])


# ----------------- mutual-attention fusion ----------------- #

def tokenize_expression(params: Params, y: Tensor, spec: FusionSpec) -> TokenSequence:
    """z^(j) = y · W1^(j) for the expr_token_count projections, CLS prepended."""
    if y.ndim != 1 or y.shape[0] != spec.expr_dim:
        raise DimensionError("expression vector does not match the projection rows", y.shape, (spec.expr_dim,))
    proj = params["expr_proj"]                                # T × d × D
    tokens = matmul(y.reshape(1, spec.expr_dim), proj)        # T × 1 × D
    tokens = tokens.reshape(spec.expr_token_count, spec.token_dim)
    seq = concat([params["cls_expr"], tokens], axis=0)
    return TokenSequence(tokens=seq, pad_mask=np.zeros(seq.shape[0], dtype=bool))


def tokenize_patches(params: Params, rows: np.ndarray, spec: FusionSpec, rng: np.random.Generator,
                     noise_sigma: float = 0.0, train: bool = False) -> TokenSequence:
    """
    Project patch rows by W2. More than max_patch_tokens rows → a random subset
    of exactly max_patch_tokens; fewer → masked zero tokens up to that length.
    """
    rows = np.asarray(rows, dtype=float)
    if rows.ndim != 2 or rows.shape[1] != spec.patch_dim:
        raise DimensionError("patch feature width does not match W2", rows.shape, (spec.patch_dim,))
    cap = spec.max_patch_tokens
    n = rows.shape[0]
    if n > cap:
        chosen = np.sort(rng.choice(n, size=cap, replace=False))
        rows = rows[chosen]
    real = Tensor(rows) @ params["patch_proj"]
    real = gaussian_noise(real, noise_sigma, rng, train)
    n_real = real.shape[0]
    parts = [params["cls_patch"], real]
    if n_real < cap:
        parts.append(Tensor(np.zeros((cap - n_real, spec.token_dim))))
    pad_mask = np.zeros(1 + cap, dtype=bool)
    pad_mask[1 + n_real:] = True
    return TokenSequence(tokens=concat(parts, axis=0), pad_mask=pad_mask)


def attention_unit(params: Params, unit: str, query_seq: TokenSequence, kv_seq: TokenSequence,
                   heads: int) -> Tensor:
    """
    Multi-head attention read out at the CLS query only. Returns 1 × mha_output_dim.
    Padded key positions get −∞ scores before the softmax.
    """
    if kv_seq.pad_mask.all():
        raise DegenerateAttentionError("every key position is padding")
    width = kv_seq.tokens.shape[1]
    head_dim = width // heads
    length = len(kv_seq)

    q = query_seq.tokens[0:1] @ params[f"{unit}.Wq"]                          # 1 × D
    k = kv_seq.tokens @ params[f"{unit}.Wk"]                                  # L × D
    v = kv_seq.tokens @ params[f"{unit}.Wv"]
    q = q.reshape(1, heads, head_dim).swapaxes(0, 1)                          # H × 1 × dh
    k = k.reshape(length, heads, head_dim).swapaxes(0, 1)                     # H × L × dh
    v = v.reshape(length, heads, head_dim).swapaxes(0, 1)

    scores = (q @ k.swapaxes(1, 2)) * (1.0 / np.sqrt(head_dim))               # H × 1 × L
    scores = masked_fill(scores, kv_seq.pad_mask.reshape(1, 1, length), -np.inf)
    weights = softmax(scores, axis=-1)
    mixed = (weights @ v).swapaxes(0, 1).reshape(1, width)                    # 1 × D
    return mixed @ params[f"{unit}.Wo"]


def mutual_attention_forward(params: Params, seq_expr: TokenSequence, seq_patch: TokenSequence,
                             spec: FusionSpec, head: MlpNetwork, rng: np.random.Generator,
                             train: bool, dropout_rate: float = 0.0) -> Tensor:
    """MHA1: keys/values from the expression tokens, query from the patch CLS; MHA2 swapped."""
    out1 = attention_unit(params, "mha1", seq_patch, seq_expr, spec.heads_per_mha)
    out2 = attention_unit(params, "mha2", seq_expr, seq_patch, spec.heads_per_mha)
    fused = concat([out1, out2], axis=1)
    return head.hidden_forward(params, fused, rng, train, dropout_rate).reshape(())


class FusionNetwork:
    def __init__(self, spec: FusionSpec):
        self.spec = spec
        self.head = MlpNetwork(spec.head_mlp, prefix="head.")

    def init_params(self, rng: np.random.Generator) -> Params:
        s = self.spec
        D = s.token_dim
        params: Params = OrderedDict()
        params["expr_proj"] = _uniform(rng, s.expr_dim, (s.expr_token_count, s.expr_dim, D))
        params["patch_proj"] = _uniform(rng, s.patch_dim, (s.patch_dim, D))
        params["cls_expr"] = _uniform(rng, D, (1, D))
        params["cls_patch"] = _uniform(rng, D, (1, D))
        for unit in ("mha1", "mha2"):
            params[f"{unit}.Wq"] = _uniform(rng, D, (D, D))
            params[f"{unit}.Wk"] = _uniform(rng, D, (D, D))
            params[f"{unit}.Wv"] = _uniform(rng, D, (D, D))
            params[f"{unit}.Wo"] = _uniform(rng, D, (D, s.mha_output_dim))
        params.update(self.head.init_params(rng))
        return params

    def inputs(self, ds: SurvivalDataset, indices: Sequence[int], teacher_view: bool = False) -> FusionInput:
        return _fusion_inputs(ds, indices, teacher_view)

    def forward(self, params: Params, x: ModelInput, rng: np.random.Generator, train: bool,
                noise_sigma: float = 0.0, dropout_rate: float = 0.0) -> Tensor:
        if not isinstance(x, FusionInput):
            raise DimensionError("fusion network needs expression and patch inputs")
        outputs = []
        for i in range(len(x)):
            y = gaussian_noise(Tensor(x.expression[i]), noise_sigma, rng, train)
            seq_expr = tokenize_expression(params, y, self.spec)
            seq_patch = tokenize_patches(params, x.patches[i], self.spec, rng, noise_sigma, train)
            f = mutual_attention_forward(params, seq_expr, seq_patch, self.spec, self.head,
                                         rng, train, dropout_rate)
            outputs.append(f.reshape(1))
        return concat(outputs, axis=0)


# ----------------- concatenation baseline ----------------- #

class ConcatFusionNetwork:
    def __init__(self, spec: ConcatSpec):
        self.spec = spec
        self.head = MlpNetwork(spec.head_mlp, prefix="head.")

    def init_params(self, rng: np.random.Generator) -> Params:
        s = self.spec
        params: Params = OrderedDict()
        params["expr_embed.W"] = _uniform(rng, s.expr_dim, (s.expr_dim, s.embed_dim))
        params["expr_embed.b"] = _zeros((s.embed_dim,))
        params["patch_embed.W"] = _uniform(rng, s.patch_dim, (s.patch_dim, s.embed_dim))
        params["patch_embed.b"] = _zeros((s.embed_dim,))
        params.update(self.head.init_params(rng))
        return params

    def inputs(self, ds: SurvivalDataset, indices: Sequence[int], teacher_view: bool = False) -> FusionInput:
        return _fusion_inputs(ds, indices, teacher_view)

    def forward(self, params: Params, x: ModelInput, rng: np.random.Generator, train: bool,
                noise_sigma: float = 0.0, dropout_rate: float = 0.0) -> Tensor:
        if not isinstance(x, FusionInput):
            raise DimensionError("concat network needs expression and patch inputs")
        s = self.spec
        if x.expression.shape[1] != s.expr_dim:
            raise DimensionError("expression width mismatch", x.expression.shape, (s.expr_dim,))
        pooled = np.vstack([p.mean(axis=0) for p in x.patches])
        if pooled.shape[1] != s.patch_dim:
            raise DimensionError("patch feature width mismatch", pooled.shape, (s.patch_dim,))
        expr = gaussian_noise(Tensor(x.expression), noise_sigma, rng, train)
        e1 = expr @ params["expr_embed.W"] + params["expr_embed.b"]
        e2 = Tensor(pooled) @ params["patch_embed.W"] + params["patch_embed.b"]
        fused = concat([e1, e2], axis=1)
        return self.head.hidden_forward(params, fused, rng, train, dropout_rate).reshape(len(x))


def _fusion_inputs(ds: SurvivalDataset, indices: Sequence[int], teacher_view: bool) -> FusionInput:
    if ds.patches is None:
        raise DimensionError("dataset carries no patch features")
    idx = np.asarray(indices, dtype=np.int64)
    patches = []
    for i in idx:
        p = ds.patches[i]
        if teacher_view and p.augmented_patch_features is not None:
            patches.append(p.augmented_patch_features)
        else:
            patches.append(p.patch_features)
    return FusionInput(expression=ds.features[idx], patches=patches)


Network = Union[MlpNetwork, FusionNetwork, ConcatFusionNetwork]


def build_network(spec) -> Network:
    if isinstance(spec, MlpSpec):
        return MlpNetwork(spec)
    if isinstance(spec, FusionSpec):
        return FusionNetwork(spec)
    if isinstance(spec, ConcatSpec):
        return ConcatFusionNetwork(spec)
    raise DimensionError(f"unknown model spec: {type(spec).__name__}")


def take_inputs(x: ModelInput, indices: Sequence[int]) -> ModelInput:
    """Row subset of a model input, same type."""
    idx = np.asarray(indices, dtype=np.int64)
    if isinstance(x, FusionInput):
        return FusionInput(expression=x.expression[idx], patches=[x.patches[i] for i in idx])
    return np.asarray(x)[idx]


__all__ = [
    "ConcatFusionNetwork",
    "FusionInput",
    "FusionNetwork",
    "MlpNetwork",
    "ModelInput",
    "Network",
    "Params",
    "attention_unit",
    "build_network",
    "mutual_attention_forward",
    "take_inputs",
    "tokenize_expression",
    "tokenize_patches",
]
