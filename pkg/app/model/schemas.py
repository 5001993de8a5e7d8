from __future__ import annotations

from dataclasses import dataclass
from typing import Annotated, List, Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.autodiff import Tensor
from app.errors import DimensionError
from extraction.schemas import PATCH_FEATURE_DIM


class MlpSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["mlp"] = "mlp"
    input_dim: int = Field(gt=0)
    hidden_sizes: List[int] = Field(default_factory=lambda: [64])
    activation: Literal["tanh", "relu"] = "tanh"
    dropout_rate: float = Field(default=0.2, ge=0.0, lt=1.0)
    output_dim: Literal[1] = 1

    @field_validator("hidden_sizes")
    @classmethod
    def _positive_sizes(cls, v: List[int]) -> List[int]:
        if any(h <= 0 for h in v):
            raise ValueError("hidden layer sizes must be positive")
        return v

    def layer_sizes(self) -> List[int]:
        return [self.input_dim, *self.hidden_sizes, self.output_dim]


class FusionSpec(BaseModel):
    """Mutual-attention fusion of an expression vector and a patch-feature set."""
    model_config = ConfigDict(extra="forbid")

    kind: Literal["fusion"] = "fusion"
    expr_dim: int = Field(gt=0)
    patch_dim: int = Field(default=PATCH_FEATURE_DIM, gt=0)
    expr_token_count: int = Field(default=32, gt=0)
    token_dim: int = Field(default=256, gt=0)
    max_patch_tokens: int = Field(default=128, gt=0)
    heads_per_mha: int = Field(default=4, gt=0)
    mha_output_dim: int = Field(default=256, gt=0)
    head_hidden_sizes: List[int] = Field(default_factory=lambda: [1000, 200])
    activation: Literal["tanh", "relu"] = "tanh"
    dropout_rate: float = Field(default=0.2, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def _heads_divide(self) -> "FusionSpec":
        if self.token_dim % self.heads_per_mha:
            raise ValueError(f"token_dim {self.token_dim} not divisible by {self.heads_per_mha} heads")
        return self

    @property
    def head_mlp(self) -> MlpSpec:
        return MlpSpec(
            input_dim=2 * self.mha_output_dim,
            hidden_sizes=self.head_hidden_sizes,
            activation=self.activation,
            dropout_rate=self.dropout_rate,
        )


class ConcatSpec(BaseModel):
    """Supervised multimodal baseline: project both views, concatenate, MLP."""
    model_config = ConfigDict(extra="forbid")

    kind: Literal["concat"] = "concat"
    expr_dim: int = Field(gt=0)
    patch_dim: int = Field(default=PATCH_FEATURE_DIM, gt=0)
    embed_dim: int = Field(default=64, gt=0)
    head_hidden_sizes: List[int] = Field(default_factory=lambda: [64])
    activation: Literal["tanh", "relu"] = "tanh"
    dropout_rate: float = Field(default=0.2, ge=0.0, lt=1.0)

    @property
    def head_mlp(self) -> MlpSpec:
        return MlpSpec(
            input_dim=2 * self.embed_dim,
            hidden_sizes=self.head_hidden_sizes,
            activation=self.activation,
            dropout_rate=self.dropout_rate,
        )


ModelSpec = Annotated[Union[MlpSpec, FusionSpec, ConcatSpec], Field(discriminator="kind")]


class PairConfig(BaseModel):
    """Mean-teacher perturbation and EMA settings."""
    model_config = ConfigDict(extra="forbid")

    alpha: float = Field(default=0.99, ge=0.0, lt=1.0)
    noise_sigma: float = Field(default=0.1, ge=0.0)
    student_dropout: float = Field(default=0.2, ge=0.0, lt=1.0)
    teacher_dropout: float = Field(default=0.2, ge=0.0, lt=1.0)


@dataclass
class TokenSequence:
    tokens: Tensor        # (1 + seq_len) × token_dim, row 0 = CLS
    pad_mask: np.ndarray  # True where the position is padding

    def __post_init__(self) -> None:
        self.pad_mask = np.asarray(self.pad_mask, dtype=bool)
        if self.tokens.ndim != 2 or self.pad_mask.shape != (self.tokens.shape[0],):
            raise DimensionError("pad mask must have one entry per token", self.tokens.shape, self.pad_mask.shape)

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def n_real(self) -> int:
        return int((~self.pad_mask).sum())
