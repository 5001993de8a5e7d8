from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from app.errors import DimensionError, DuplicateSampleError, InputError


class SampleStatus(str, Enum):
    EVENT = "event"
    CENSORED = "censored"
    UNLABELED = "unlabeled"


# int8 kodları: vektörel maskeler için
STATUS_CODE = {SampleStatus.EVENT: 1, SampleStatus.CENSORED: 0, SampleStatus.UNLABELED: -1}
CODE_STATUS = {v: k for k, v in STATUS_CODE.items()}

# Preprocessing stages, in the only order the pipeline accepts them
PREPROCESSING_STAGES = ("ingested", "normalized", "selected", "log_transformed")

PATCH_FEATURE_DIM = 1024


@dataclass(frozen=True)
class ExpressionMatrix:
    sample_ids: Tuple[str, ...]
    gene_ids: Tuple[str, ...]
    values: np.ndarray  # samples × genes
    stage: str = "ingested"
    dropped_genes: Tuple[str, ...] = ()
    normalization_factor: Optional[float] = None

    def __post_init__(self) -> None:
        if self.values.shape != (len(self.sample_ids), len(self.gene_ids)):
            raise DimensionError(
                "expression values do not match id lists",
                self.values.shape, (len(self.sample_ids), len(self.gene_ids)),
            )

    @property
    def n_samples(self) -> int:
        return len(self.sample_ids)

    @property
    def n_genes(self) -> int:
        return len(self.gene_ids)

    def with_values(self, values: np.ndarray, **changes) -> "ExpressionMatrix":
        return replace(self, values=values, **changes)

    def select_genes(self, columns: Sequence[int], **changes) -> "ExpressionMatrix":
        cols = list(columns)
        return replace(
            self,
            gene_ids=tuple(self.gene_ids[c] for c in cols),
            values=self.values[:, cols],
            **changes,
        )


class ClinicalRecord(BaseModel):
    sample_id: str
    time: float = Field(gt=0, allow_inf_nan=False)
    status: SampleStatus

    @field_validator("status")
    @classmethod
    def _labeled_only(cls, v: SampleStatus) -> SampleStatus:
        if v == SampleStatus.UNLABELED:
            raise ValueError("clinical records are either event or censored")
        return v


@dataclass(frozen=True)
class PatchFeatureSet:
    sample_id: str
    patch_features: np.ndarray  # n × 1024, one row per patch
    augmented_patch_features: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.patch_features.ndim != 2 or self.patch_features.shape[0] < 1:
            raise InputError(f"{self.sample_id}: patch features must be a non-empty n × width matrix")
        aug = self.augmented_patch_features
        if aug is not None and aug.shape != self.patch_features.shape:
            raise DimensionError(
                f"{self.sample_id}: augmented patch features differ in shape",
                self.patch_features.shape, aug.shape,
            )

    @property
    def n_patches(self) -> int:
        return self.patch_features.shape[0]

    @property
    def width(self) -> int:
        return self.patch_features.shape[1]


@dataclass(frozen=True)
class SurvivalDataset:
    """
    Samples × features plus per-sample (time, status).
    time is NaN exactly for unlabeled samples (D_u).
    teacher_features / patches are optional extra views used by the image
    and fusion models.
    """
    sample_ids: Tuple[str, ...]
    features: np.ndarray
    times: np.ndarray
    status: np.ndarray  # int8 codes, see STATUS_CODE
    feature_ids: Tuple[str, ...] = ()
    teacher_features: Optional[np.ndarray] = None
    patches: Optional[Tuple[PatchFeatureSet, ...]] = None

    def __post_init__(self) -> None:
        n = len(self.sample_ids)
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise DimensionError("features must be samples × d", self.features.shape, (n,))
        if self.times.shape != (n,) or self.status.shape != (n,):
            raise DimensionError("times/status must have one entry per sample", self.times.shape, self.status.shape)
        if len(set(self.sample_ids)) != n:
            raise InputError("sample ids must be unique")
        unlabeled = self.status == STATUS_CODE[SampleStatus.UNLABELED]
        if not np.array_equal(unlabeled, np.isnan(self.times)):
            raise InputError("time must be absent exactly for unlabeled samples")
        labeled_times = self.times[~unlabeled]
        if labeled_times.size and (not np.all(np.isfinite(labeled_times)) or labeled_times.min() <= 0):
            raise InputError("labeled times must be finite and positive")
        if self.teacher_features is not None and self.teacher_features.shape != self.features.shape:
            raise DimensionError("teacher view must match features", self.teacher_features.shape, self.features.shape)
        if self.patches is not None and len(self.patches) != n:
            raise DimensionError("one patch set per sample required", (len(self.patches),), (n,))

    # ---------- masks ---------- #
    @property
    def n_samples(self) -> int:
        return len(self.sample_ids)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def event_mask(self) -> np.ndarray:
        return self.status == STATUS_CODE[SampleStatus.EVENT]

    @property
    def censored_mask(self) -> np.ndarray:
        return self.status == STATUS_CODE[SampleStatus.CENSORED]

    @property
    def unlabeled_mask(self) -> np.ndarray:
        return self.status == STATUS_CODE[SampleStatus.UNLABELED]

    @property
    def labeled_mask(self) -> np.ndarray:
        return ~self.unlabeled_mask

    @property
    def n_events(self) -> int:
        return int(self.event_mask.sum())

    def status_counts(self) -> Dict[str, int]:
        return {s.value: int((self.status == STATUS_CODE[s]).sum()) for s in SampleStatus}

    def statuses(self) -> List[SampleStatus]:
        return [CODE_STATUS[int(c)] for c in self.status]

    # ---------- slicing ---------- #
    def subset(self, indices: Sequence[int]) -> "SurvivalDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return SurvivalDataset(
            sample_ids=tuple(self.sample_ids[i] for i in idx),
            features=self.features[idx],
            times=self.times[idx],
            status=self.status[idx],
            feature_ids=self.feature_ids,
            teacher_features=None if self.teacher_features is None else self.teacher_features[idx],
            patches=None if self.patches is None else tuple(self.patches[i] for i in idx),
        )

    def labeled_part(self) -> "SurvivalDataset":
        return self.subset(np.flatnonzero(self.labeled_mask))

    def unlabeled_part(self) -> "SurvivalDataset":
        return self.subset(np.flatnonzero(self.unlabeled_mask))

    def with_features(self, features: np.ndarray, teacher_features: Optional[np.ndarray] = None) -> "SurvivalDataset":
        return replace(self, features=features, teacher_features=teacher_features)

    def as_unlabeled(self) -> "SurvivalDataset":
        return replace(
            self,
            times=np.full(self.n_samples, np.nan),
            status=np.full(self.n_samples, STATUS_CODE[SampleStatus.UNLABELED], dtype=np.int8),
        )

    @staticmethod
    def concat(first: "SurvivalDataset", second: "SurvivalDataset") -> "SurvivalDataset":
        if first.dim != second.dim:
            raise DimensionError("feature dimensions differ", first.features.shape, second.features.shape)
        shared = set(first.sample_ids) & set(second.sample_ids)
        if shared:
            raise DuplicateSampleError(sorted(shared)[0])

        def _join(a, b):
            if a is None or b is None:
                return None
            return np.concatenate([a, b])

        patches = None
        if first.patches is not None and second.patches is not None:
            patches = first.patches + second.patches
        return SurvivalDataset(
            sample_ids=first.sample_ids + second.sample_ids,
            features=np.concatenate([first.features, second.features]),
            times=np.concatenate([first.times, second.times]),
            status=np.concatenate([first.status, second.status]).astype(np.int8),
            feature_ids=first.feature_ids or second.feature_ids,
            teacher_features=_join(first.teacher_features, second.teacher_features),
            patches=patches,
        )


class IngestionReport(BaseModel):
    """Human-readable summary written next to every dataset archive."""
    model_config = ConfigDict(extra="forbid")

    expression_path: Optional[str] = None
    clinical_path: Optional[str] = None
    n_genes_loaded: int = 0
    dropped_genes: List[str] = []
    deduplicated_samples: List[str] = []
    dropped_samples: List[str] = []
    normalization_factor: Optional[float] = None
    selected_genes: int = 0
    log_transformed: bool = False
    status_counts: Dict[str, int] = {}
    extra: Dict[str, str] = {}

    @field_validator("dropped_genes", "dropped_samples", "deduplicated_samples")
    @classmethod
    def _sorted_unique(cls, v: List[str]) -> List[str]:
        return list(dict.fromkeys(v))
