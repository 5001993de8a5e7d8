"""
Synthetic Cox cohorts for desk-scale verification.

    x ~ N(0, I_d)
    T ~ Exp(baseline_rate · exp(βᵀx))
    C ~ Exp(c), c calibrated so that E[P(C < T)] ≈ censor_rate
    observed time = min(T, C), event = T <= C
"""
from __future__ import annotations

from typing import Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.logging_utils import get_logger
from extraction.schemas import STATUS_CODE, PatchFeatureSet, SampleStatus, SurvivalDataset

logger = get_logger("Synthetic")


class SyntheticConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_samples: int = Field(gt=0)
    d: int = Field(gt=0)
    true_beta_sparsity: float = Field(default=0.0, ge=0.0, le=1.0)  # fraction of zero coefficients
    beta_scale: float = Field(default=1.0, ge=0.0)  # sd of βᵀx when x ~ N(0, I)
    baseline_rate: float = Field(default=0.1, gt=0.0)
    censor_rate: float = Field(default=0.3, ge=0.0, lt=1.0)
    unlabeled_fraction: float = Field(default=0.0, ge=0.0, le=1.0)
    seed: int = 0
    id_prefix: str = Field(default="S", min_length=1)

    @model_validator(mode="after")
    def _labeled_left(self) -> "SyntheticConfig":
        if self.unlabeled_fraction == 1.0:
            raise ValueError("unlabeled_fraction=1 leaves no labeled samples")
        return self


def _expected_censored_fraction(rate: float, hazards: np.ndarray) -> float:
    # P(C < T) for independent exponentials = c / (c + λ)
    return float(np.mean(rate / (rate + hazards)))


def calibrate_censoring_rate(hazards: np.ndarray, target: float, tol: float = 1e-10,
                             max_iter: int = 200) -> float:
    """Bisection on log(c) for the censoring-exponential rate."""
    if target <= 0.0:
        return 0.0
    lo, hi = np.log(hazards.min()) - 30.0, np.log(hazards.max()) + 30.0
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if _expected_censored_fraction(np.exp(mid), hazards) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return float(np.exp(0.5 * (lo + hi)))


def draw_beta(cfg: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    n_zero = int(round(cfg.true_beta_sparsity * cfg.d))
    n_active = cfg.d - n_zero
    beta = np.zeros(cfg.d)
    if n_active == 0 or cfg.beta_scale == 0.0:
        return beta
    active = np.sort(rng.choice(cfg.d, size=n_active, replace=False))
    raw = rng.normal(size=n_active)
    beta[active] = cfg.beta_scale * raw / np.linalg.norm(raw)
    return beta


def generate_synthetic(cfg: SyntheticConfig) -> Tuple[SurvivalDataset, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    beta = draw_beta(cfg, rng)
    x = rng.standard_normal((cfg.n_samples, cfg.d))
    hazards = cfg.baseline_rate * np.exp(x @ beta)
    event_times = rng.exponential(1.0 / hazards)

    c = calibrate_censoring_rate(hazards, cfg.censor_rate)
    if c > 0.0:
        censor_times = rng.exponential(1.0 / c, size=cfg.n_samples)
    else:
        censor_times = np.full(cfg.n_samples, np.inf)

    times = np.minimum(event_times, censor_times)
    status = np.where(event_times <= censor_times,
                      STATUS_CODE[SampleStatus.EVENT], STATUS_CODE[SampleStatus.CENSORED]).astype(np.int8)

    n_unlabeled = int(round(cfg.unlabeled_fraction * cfg.n_samples))
    if n_unlabeled:
        stripped = rng.choice(cfg.n_samples, size=n_unlabeled, replace=False)
        times[stripped] = np.nan
        status[stripped] = STATUS_CODE[SampleStatus.UNLABELED]

    ds = SurvivalDataset(
        sample_ids=tuple(f"{cfg.id_prefix}{i:05d}" for i in range(cfg.n_samples)),
        features=x,
        times=times,
        status=status,
        feature_ids=tuple(f"g{j}" for j in range(cfg.d)),
    )
    counts = ds.status_counts()
    logger.debug(f"generated n={cfg.n_samples} d={cfg.d} counts={counts} censor_rate_c={c:.4g}")
    return ds, beta


def generate_patch_sets(ds: SurvivalDataset, width: int = 1024,
                        n_patches: Tuple[int, int] = (1, 200), noise: float = 1.0,
                        seed: int = 0):
    """
    Image-side companion cohort: every sample gets a variable number of patch
    rows whose mean carries the same linear signal as its expression vector,
    plus an augmented copy (small perturbation of every row).
    """
    rng = np.random.default_rng(seed)
    mixing = rng.normal(size=(ds.dim, width)) / np.sqrt(ds.dim)
    sets = []
    for i, sid in enumerate(ds.sample_ids):
        n = int(rng.integers(n_patches[0], n_patches[1] + 1))
        centre = ds.features[i] @ mixing
        rows = centre + noise * rng.normal(size=(n, width))
        augmented = rows + 0.1 * noise * rng.normal(size=(n, width))
        sets.append(PatchFeatureSet(sample_id=sid, patch_features=rows, augmented_patch_features=augmented))
    return tuple(sets)
