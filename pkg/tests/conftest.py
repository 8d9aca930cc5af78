import string

import numpy as np
import pytest

from editflow.rate_model import RatePrediction
from editflow.schemas.config_schemas import ModelSpec
from editflow.structures import Vocab


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def ab():
    return Vocab(size=2, names=("A", "B"))


@pytest.fixture
def letters():
    return Vocab(size=26, names=tuple(string.ascii_lowercase))


@pytest.fixture
def featurized_spec():
    return ModelSpec(kind="featurized", vocab_size=3, max_length=6, window=1, init_scale=0.5)


def _constant_rates(lam_ins=0.0, lam_del=0.0, lam_sub=0.0, m=2):
    """Rate function with the same per-anchor rates everywhere (BOS never deleted or substituted)."""
    def rates(x, t):
        n = len(x)
        dele = np.full(n, float(lam_del))
        sub = np.full(n, float(lam_sub)) if m > 1 else np.zeros(n)
        dele[0] = sub[0] = 0.0
        q_sub = np.full((n, m), 1.0 / max(m - 1, 1))
        for i, a in enumerate(x[1:], start=1):
            q_sub[i, a] = 0.0
        q_sub[0] = 1.0 / m
        return RatePrediction(tuple(x), np.full(n, float(lam_ins)), dele, sub, np.full((n, m), 1.0 / m), q_sub)

    return rates


@pytest.fixture
def constant_rates():
    return _constant_rates

