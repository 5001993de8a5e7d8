from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, ValidationError

from app.errors import ConfigError, IngestionFormatError
from app.experiment.schemas import SearchSpace, TrainConfig
from app.model.schemas import ModelSpec
from extraction.schemas import SurvivalDataset

OUTPUT_ROOT = os.getenv("COXMT_OUTPUT_ROOT", "runs")


class ModelSection(BaseModel):
    """Architecture choice; input widths are taken from the dataset when omitted."""
    model_config = ConfigDict(extra="forbid")

    kind: Literal["mlp", "fusion", "concat"] = "mlp"
    options: Dict[str, Any] = Field(default_factory=dict)

    def resolve(self, ds: SurvivalDataset):
        options = dict(self.options)
        if self.kind == "mlp":
            options.setdefault("input_dim", ds.dim)
        else:
            options.setdefault("expr_dim", ds.dim)
            if ds.patches:
                options.setdefault("patch_dim", ds.patches[0].width)
        try:
            return TypeAdapter(ModelSpec).validate_python({"kind": self.kind, **options})
        except ValidationError as exc:
            raise ConfigError(f"invalid model options: {exc.errors()[0]['msg']}") from None


class ProtocolSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    k: int = Field(default=5, ge=2)
    repeats: int = Field(default=4, ge=1)
    val_fraction: float = Field(default=0.2, ge=0.0, lt=1.0)
    seed: int = 0
    baseline: bool = False


class AblationSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    parameter: str
    values: List[Any] = Field(min_length=1)


class ScalingSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    unlabeled_pool: str
    sizes: List[int] = Field(min_length=1)


class CompareSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    ledger_a: str
    ledger_b: str


class JobConfig(BaseModel):
    """One experiment document; every command reads the sections it needs."""
    model_config = ConfigDict(extra="forbid")

    version: Literal[1]
    name: str = "coxmt"
    dataset: Optional[str] = None
    output_dir: Optional[str] = None
    workers: Optional[int] = Field(default=None, ge=1)
    model: ModelSection = Field(default_factory=ModelSection)
    train: TrainConfig = Field(default_factory=TrainConfig)
    search: SearchSpace = Field(default_factory=SearchSpace)
    protocol: ProtocolSection = Field(default_factory=ProtocolSection)
    ablation: Optional[AblationSection] = None
    scaling: Optional[ScalingSection] = None
    compare: Optional[CompareSection] = None

    def output_path(self) -> Path:
        return Path(self.output_dir) if self.output_dir else Path(OUTPUT_ROOT) / self.name

    def require(self, section: str):
        value = getattr(self, section)
        if value is None:
            raise ConfigError(f"job config needs a '{section}' section for this command")
        return value


def load_job_config(path: str | Path, overrides: Optional[Dict[str, Any]] = None) -> JobConfig:
    """Reads a JSON job document; dotted overrides ("train.epochs": 5) win over file values."""
    path = Path(path)
    if not path.exists():
        raise IngestionFormatError("job config not found", path=str(path))
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise IngestionFormatError(f"invalid JSON: {exc.msg}", path=str(path), row=exc.lineno,
                                   column=exc.colno) from None
    if not isinstance(document, dict):
        raise IngestionFormatError("job config must be a JSON object", path=str(path))
    for dotted, value in (overrides or {}).items():
        apply_override(document, dotted, value)
    return JobConfig.model_validate(document)


def apply_override(document: Dict[str, Any], dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = document
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override '{dotted}': '{key}' is not a section")
    node[keys[-1]] = value
