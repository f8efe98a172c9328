import numpy as np
import pytest

from mtair.gradcheck import randomize_probe_point  # noqa: F401  (shared by tests)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rel_err(got, want):
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(got), np.abs(want)), 1e-8)
    return float(np.max(np.abs(got - want) / denom))


def abs_err(got, want):
    return float(np.max(np.abs(np.asarray(got, np.float64) - np.asarray(want, np.float64))))


def scale_err(got, want):
    """Max absolute error normalized by the reference magnitude."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    scale = max(float(np.max(np.abs(want))), 1e-8)
    return float(np.max(np.abs(got - want))) / scale
