import os
import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from retropanel.errors import NoMissingCellsWarning
from retropanel.panel_data import PanelDataset

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(autouse=True)
def _quiet_full_mask():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NoMissingCellsWarning)
        yield


def block_treatment(n_at, n_lt, T, t0):
    W = np.ones((n_at + n_lt, T), dtype=np.int8)
    W[n_at:, :t0] = 0
    return W


@pytest.fixture
def small_panel():
    rng = np.random.default_rng(11)
    W = block_treatment(2, 2, 6, 3)
    Y = rng.normal(size=W.shape)
    return PanelDataset(Y, W, unit_ids=("a", "b", "c", "d"), period_ids=tuple("123456"))
