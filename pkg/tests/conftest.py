from pathlib import Path

import numpy as np
import pytest

from extraction.synthetic import SyntheticConfig, generate_synthetic

FIXTURES = Path(__file__).parent / "fixtures"
CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def configs_dir() -> Path:
    return CONFIGS


@pytest.fixture
def small_cohort():
    """80 samples, d=4, ~30% censored among labeled, a quarter unlabeled."""
    cfg = SyntheticConfig(n_samples=80, d=4, censor_rate=0.3, unlabeled_fraction=0.25,
                          beta_scale=1.5, seed=3)
    return generate_synthetic(cfg)


@pytest.fixture
def labeled_cohort():
    cfg = SyntheticConfig(n_samples=60, d=3, censor_rate=0.3, beta_scale=1.5, seed=11)
    ds, beta = generate_synthetic(cfg)
    return ds, beta


@pytest.fixture
def numeric_grad():
    """Central finite differences of a scalar function over every entry of an array (in place)."""
    def _grad(fn, values: np.ndarray, eps: float = 1e-5) -> np.ndarray:
        out = np.zeros_like(values)
        it = np.nditer(values, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            original = values[idx]
            values[idx] = original + eps
            up = fn()
            values[idx] = original - eps
            down = fn()
            values[idx] = original
            out[idx] = (up - down) / (2 * eps)
        return out
    return _grad
