from __future__ import annotations

from typing import Any, Dict, Iterator, List, Literal, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from sklearn.model_selection import ParameterGrid

from app.errors import ConfigError, LedgerMismatchError
from app.loss.service import LossConfig
from app.model.schemas import FusionSpec, ConcatSpec, MlpSpec, PairConfig


class TrainConfig(BaseModel):
    """Defaults are the ablation baseline: α=0.99, w=1, σ=0.1, both dropouts 0.2."""
    model_config = ConfigDict(extra="forbid")

    alpha: float = Field(default=0.99, ge=0.0, lt=1.0)
    consistency_weight: float = Field(default=1.0, ge=0.0)
    noise_sigma: float = Field(default=0.1, ge=0.0)
    student_dropout: float = Field(default=0.2, ge=0.0, lt=1.0)
    teacher_dropout: float = Field(default=0.2, ge=0.0, lt=1.0)
    learning_rate: float = Field(default=0.002, gt=0.0)
    optimizer: Literal["adam", "sgd"] = "adam"
    epochs: int = Field(default=200, ge=0)
    early_stop_patience: int = Field(default=20, ge=1)
    batch_mode: Literal["full_batch", "risk_set_minibatch"] = "full_batch"
    minibatch_events: int = Field(default=32, gt=0)
    risk_controls_per_event: int = Field(default=16, gt=0)
    consistency_batch: int = Field(default=64, gt=0)
    evaluate_with: Literal["teacher", "student"] = "teacher"
    standardize: bool = True
    seed: int = 0

    def pair_config(self) -> PairConfig:
        return PairConfig(
            alpha=self.alpha,
            noise_sigma=self.noise_sigma,
            student_dropout=self.student_dropout,
            teacher_dropout=self.teacher_dropout,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(
            consistency_weight=self.consistency_weight,
            batch_mode=self.batch_mode,
            minibatch_events=self.minibatch_events,
            risk_controls_per_event=self.risk_controls_per_event,
            consistency_batch=self.consistency_batch,
        )


# hyperparameters that live on the architecture rather than TrainConfig
STRUCTURE_KEYS = ("hidden_sizes",)


def apply_structure(model_spec, hidden_sizes: Optional[List[int]]):
    if hidden_sizes is None:
        return model_spec
    if isinstance(model_spec, MlpSpec):
        return model_spec.model_copy(update={"hidden_sizes": list(hidden_sizes)})
    if isinstance(model_spec, (FusionSpec, ConcatSpec)):
        return model_spec.model_copy(update={"head_hidden_sizes": list(hidden_sizes)})
    raise ConfigError(f"cannot set hidden sizes on {type(model_spec).__name__}")


def override(cfg: TrainConfig, model_spec, name: str, value: Any) -> Tuple[TrainConfig, Any]:
    """One hyperparameter changed; the others stay at their current values."""
    if name in STRUCTURE_KEYS:
        return cfg, apply_structure(model_spec, value)
    if name not in TrainConfig.model_fields:
        raise ConfigError(f"unknown hyperparameter: {name}")
    data = cfg.model_dump()
    data[name] = value
    return TrainConfig(**data), model_spec


class SearchSpace(BaseModel):
    """Finite grid; an omitted hyperparameter stays at the base TrainConfig value."""
    model_config = ConfigDict(extra="forbid")

    learning_rate: Optional[List[float]] = None
    student_dropout: Optional[List[float]] = None
    teacher_dropout: Optional[List[float]] = None
    alpha: Optional[List[float]] = None
    noise_sigma: Optional[List[float]] = None
    consistency_weight: Optional[List[float]] = None
    hidden_sizes: Optional[List[List[int]]] = None

    @field_validator("*")
    @classmethod
    def _non_empty(cls, v):
        if v is not None and len(v) == 0:
            raise ValueError("candidate lists must not be empty")
        return v

    def axes(self) -> Dict[str, list]:
        return {k: v for k, v in self.model_dump().items() if v is not None}

    def size(self) -> int:
        return len(ParameterGrid(self.axes())) if self.axes() else 1

    def candidates(self, base: TrainConfig, model_spec) -> Iterator[Tuple[Dict[str, Any], TrainConfig, Any]]:
        axes = self.axes()
        if not axes:
            yield {}, base, model_spec
            return
        for point in ParameterGrid(axes):
            cfg, spec = base, model_spec
            for name, value in sorted(point.items()):
                cfg, spec = override(cfg, spec, name, value)
            yield dict(point), cfg, spec


class RunRecord(BaseModel):
    repeat: int
    fold: int
    seed: int
    c_index: float
    ibs: float
    stratification_p: Optional[float] = None
    ibs_horizon: Optional[float] = None
    validation_c_index: Optional[float] = None
    hyperparameters: Dict[str, Any] = Field(default_factory=dict)
    train_ids: List[str] = Field(default_factory=list)
    val_ids: List[str] = Field(default_factory=list)
    test_ids: List[str] = Field(default_factory=list)
    scaler_ids: List[str] = Field(default_factory=list)
    checkpoint: Optional[str] = None

    def flat(self) -> Dict[str, Any]:
        return {
            "repeat": self.repeat,
            "fold": self.fold,
            "seed": self.seed,
            "c_index": self.c_index,
            "ibs": self.ibs,
            "stratification_p": self.stratification_p,
            "ibs_horizon": self.ibs_horizon,
            "validation_c_index": self.validation_c_index,
            "hyperparameters": ";".join(f"{k}={v}" for k, v in sorted(self.hyperparameters.items())),
            "n_train": len(self.train_ids),
            "n_val": len(self.val_ids),
            "n_test": len(self.test_ids),
            "checkpoint": self.checkpoint,
        }


class RunLedger(BaseModel):
    name: str = "protocol"
    repeats: int
    k: int
    seed: int
    model_kind: str = "mlp"
    records: List[RunRecord]

    @model_validator(mode="after")
    def _complete(self) -> "RunLedger":
        if len(self.records) != self.repeats * self.k:
            raise LedgerMismatchError(
                f"ledger has {len(self.records)} records, expected {self.repeats} × {self.k}"
            )
        keys = {(r.repeat, r.fold) for r in self.records}
        if len(keys) != len(self.records):
            raise LedgerMismatchError("duplicate (repeat, fold) in ledger")
        return self

    def __len__(self) -> int:
        return len(self.records)

    def metric(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.flat() for r in self.records])

    def summary(self) -> Dict[str, Any]:
        c = self.metric("c_index")
        ibs = self.metric("ibs")
        return {
            "name": self.name,
            "model_kind": self.model_kind,
            "runs": len(self.records),
            "repeats": self.repeats,
            "k": self.k,
            "seed": self.seed,
            "mean_c_index": float(c.mean()),
            "std_c_index": float(c.std(ddof=1)) if c.size > 1 else 0.0,
            "mean_ibs": float(ibs.mean()),
            "std_ibs": float(ibs.std(ddof=1)) if ibs.size > 1 else 0.0,
        }


class MetricComparison(BaseModel):
    metric: str
    mean_a: float
    mean_b: float
    box_a: Dict[str, float]
    box_b: Dict[str, float]
    p_value: float


class ComparisonRecord(BaseModel):
    name_a: str
    name_b: str
    runs: int
    metrics: List[MetricComparison]

    def by_metric(self, name: str) -> MetricComparison:
        for m in self.metrics:
            if m.metric == name:
                return m
        raise KeyError(name)
