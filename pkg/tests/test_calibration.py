import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from acid.calibration import (
    FAIL_TO_REJECT,
    REJECT,
    DegenerateSampleError,
    NullDistribution,
    calibrate,
    collect_null_logits,
    decide,
    fit_skew_normal,
    moment_init,
    p_value,
)
from acid.model import ACID, ModelConfig
from acid.synthgen import ConfigError, ConfigSpace

TINY = ModelConfig(e=4, h=2, L=1)
SPACE = ConfigSpace(n=(12,), dz=(2,))


def test_fit_standard_normal():
    null = fit_skew_normal(np.random.default_rng(0).standard_normal(10_000))
    assert abs(null.shape) < 0.3
    assert abs(null.location) < 0.1
    assert abs(null.scale - 1) < 0.1


def test_fit_standard_normal_goodness():
    null = fit_skew_normal(np.random.default_rng(0).standard_normal(10_000))
    mean = null.location + null.scale * null.shape / np.sqrt(1 + null.shape**2) * np.sqrt(2 / np.pi)
    assert abs(mean) < 0.05
    assert null.ks_statistic < 0.08


def test_fit_recovers_skewed_shape():
    x = stats.skewnorm.rvs(5, loc=0, scale=1, size=10_000, random_state=1)
    null = fit_skew_normal(x)
    assert 3 <= null.shape <= 8
    assert abs(null.location) < 0.15 and abs(null.scale - 1) < 0.1
    assert null.ks_statistic < 0.08


def test_fit_affine_equivariance():
    x = stats.skewnorm.rvs(3, size=5000, random_state=2)
    base = fit_skew_normal(x)
    moved = fit_skew_normal(2.5 * x - 4.0)
    assert abs(moved.location - (2.5 * base.location - 4.0)) < 0.1 * 2.5
    assert abs(moved.scale - 2.5 * base.scale) < 0.1 * 2.5
    assert abs(moved.shape - base.shape) < 0.3


def test_fit_errors():
    with pytest.raises(DegenerateSampleError):
        fit_skew_normal(np.full(200, 3.0))
    with pytest.raises(ConfigError):
        fit_skew_normal(np.zeros(50))
    with pytest.raises(ValueError):
        fit_skew_normal(np.r_[np.random.default_rng(0).normal(size=200), np.nan])


def test_moment_init_clips_extreme_skew():
    x = np.r_[np.zeros(990), np.full(10, 100.0)]  # skewness far past the family bound
    loc, scale, shape = moment_init(x)
    assert np.isfinite([loc, scale, shape]).all() and scale > 0


def test_p_value_examples():
    normal = NullDistribution(0.0, 1.0, 0.0)
    assert abs(p_value(0.0, normal) - 0.5) < 1e-12
    assert abs(p_value(1.6449, normal) - 0.05) < 1e-3
    assert p_value(60.0, normal) < 1e-300 or p_value(60.0, normal) == 0.0
    assert p_value(-60.0, normal) == 1.0


@pytest.mark.parametrize("seed", range(20))
def test_survival_matches_scipy(seed):
    rng = np.random.default_rng(seed)
    loc, scale, shape = rng.normal(), rng.uniform(0.2, 3), rng.normal(scale=4)
    null = NullDistribution(loc, scale, shape)
    t = rng.normal(loc, 3 * scale, size=25)
    np.testing.assert_allclose(null.sf(t), stats.skewnorm.sf(t, shape, loc, scale), rtol=1e-9, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(0.1, 5), st.floats(-10, 10), st.floats(-8, 8), st.floats(0.01, 3))
def test_p_value_strictly_decreasing(loc, scale, shape, t, dt):
    null = NullDistribution(loc, scale, shape)
    u = (t - loc) / scale
    hi = p_value(t, null)
    lo = p_value(t + dt * scale, null)
    assert 0.0 <= lo <= hi <= 1.0
    if 1e-6 < hi < 1 - 1e-6 and abs(u) < 5:
        assert lo < hi


def test_decide_boundary():
    assert decide(0.01, 0.05) == REJECT
    assert decide(0.05, 0.05) == FAIL_TO_REJECT
    assert decide(0.99, 0.05) == FAIL_TO_REJECT
    with pytest.raises(ValueError):
        decide(0.5, 1.0)


def test_null_distribution_roundtrip():
    null = NullDistribution(0.3, 1.2, -2.0, n_fit=100, provenance={"seed": 1})
    assert NullDistribution.from_dict(null.to_dict()) == null
    with pytest.raises(ValueError):
        NullDistribution(0.0, 0.0, 1.0)


def test_collect_null_logits():
    model = ACID(TINY, seed=0)
    a = collect_null_logits(model, SPACE, 100, seed=3)
    b = collect_null_logits(model, SPACE, 100, seed=3)
    assert a.shape == (100,) and np.isfinite(a).all()
    assert np.array_equal(a, b)
    with pytest.raises(ConfigError):
        collect_null_logits(model, SPACE, 99, seed=3)
    with pytest.raises(ConfigError):
        collect_null_logits(model, ConfigSpace(n=(12,), dz=(2,), models=("M4",)), 100, seed=3)


def test_calibrate_records_provenance():
    null = calibrate(ACID(TINY, seed=1), SPACE, count=150, seed=2)
    assert null.n_fit == 150
    assert null.provenance["config_space"] == SPACE.to_dict()
    assert null.provenance["seed"] == 2
