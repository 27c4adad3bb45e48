from __future__ import annotations

import numpy as np
import pytest

from kvmerger import synth_trace


@pytest.fixture
def small_trace():
    """A small deterministic trace with queries, enough for full pipelines."""
    return synth_trace(layers=2, heads=2, T=48, d=8, locality=0.1, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
