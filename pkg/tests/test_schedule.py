import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfolab.numcore import RngStream
from sfolab.schedule import T_CLAMP, TimestepDist, logit_moments, sample_t, t_from_normal


@given(st.floats(-2.5, 2.5), st.floats(0.3, 2.0), st.integers(0, 10 ** 6))
@settings(max_examples=20, deadline=None)
def test_logit_normal_moments(mu, sigma, seed):
    t = sample_t(TimestepDist.logit_normal(mu, sigma), RngStream(seed), 20000)
    m, s = logit_moments(t)
    assert abs(m - mu) < 0.06 and abs(s - sigma) < 0.06


@given(st.sampled_from([TimestepDist.uniform(), TimestepDist.logit_normal(), TimestepDist.logit_normal(-2, 1),
                        TimestepDist.logit_normal(2, 1)]), st.integers(0, 10 ** 6))
@settings(max_examples=20, deadline=None)
def test_draws_are_strictly_inside_unit_interval(dist, seed):
    t = sample_t(dist, RngStream(seed), 1000)
    assert np.all(t >= T_CLAMP) and np.all(t <= 1 - T_CLAMP)


def test_extreme_normals_are_clamped():
    t = t_from_normal(TimestepDist.logit_normal(0, 1), np.array([-1e3, 0.0, 1e3]))
    assert t[0] == T_CLAMP and t[1] == 0.5 and t[2] == 1 - T_CLAMP


@given(st.lists(st.floats(-8, 8), min_size=2, max_size=20), st.floats(-2, 2), st.floats(0.1, 3))
def test_t_from_normal_is_monotone(z, mu, sigma):
    z = np.sort(np.asarray(z))
    t = t_from_normal(TimestepDist.logit_normal(mu, sigma), z)
    assert np.all(np.diff(t) >= 0)


def test_mu_shifts_mass():
    r = RngStream(0)
    lo = sample_t(TimestepDist.logit_normal(-2, 1), r.split(1), 5000).mean()
    hi = sample_t(TimestepDist.logit_normal(2, 1), r.split(2), 5000).mean()
    assert lo < 0.25 < 0.75 < hi


def test_validation_and_serialization():
    with pytest.raises(ValueError):
        TimestepDist("beta")
    with pytest.raises(ValueError):
        TimestepDist.logit_normal(0, 0)
    with pytest.raises(ValueError):
        TimestepDist.from_dict({"variant": "uniform", "shape": 2})
    for d in (TimestepDist.uniform(), TimestepDist.logit_normal(2, 0.5)):
        assert TimestepDist.from_dict(d.to_dict()) == d
    assert TimestepDist.logit_normal(-2, 1).label == "logit_normal(-2,1)"


def test_logit_moments_rejects_boundary():
    with pytest.raises(ValueError):
        logit_moments([0.5, 1.0])
