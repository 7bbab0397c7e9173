import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfolab.adapters import attach
from sfolab.model import FieldLayout
from sfolab.numcore import RngStream
from sfolab.objectives import LN2, LossError, QuadBatch, delta, sfo_loss, sfo_value, sft_loss, sigmoid, softplus

from _util import randomize_adapter, small_stack

LAYOUT = FieldLayout(2, 2, n_freq=1)


def _quad(seed, n=5, scale=1.0):
    r = RngStream(seed)
    return QuadBatch(scale * r.normal((n, 2)), scale * r.normal((n, 2)), r.normal((n, 2)), r.normal((n, 2)),
                     r.uniform(n))


def _stack(seed=0):
    s = attach(small_stack(LAYOUT, (8,), seed), "ref", 2, RngStream(seed + 1))
    s = randomize_adapter(s, "ref", seed + 2)
    return attach(s, "sfo", 2, RngStream(seed + 3))


def test_scalar_oracle():
    assert abs(sfo_value(0.1, 0.4, 0.2, 0.3, 1.0) - np.log1p(np.exp(-0.2))) < 1e-12
    assert abs(sfo_value(0.1, 0.4, 0.2, 0.3, 1.0) - 0.598139) < 1e-6


def test_zero_adapter_gives_ln2():
    out, grads = sfo_loss(_stack(), LAYOUT, _quad(0), beta=1000.0)
    assert abs(out.value - LN2) < 1e-12
    assert np.all(out.inner == 0.0)
    assert set(k.split(".")[0] for k in grads) == {"sfo"}


@given(st.floats(-50, 50), st.floats(0.01, 100))
def test_swap_identity(inner, beta):
    # softplus(z) - softplus(-z) = z: swapping positive and negative flips the sign of the inner term
    a = sfo_value(inner, 0.0, 0.0, 0.0, beta)
    b = sfo_value(0.0, inner, 0.0, 0.0, beta)
    assert a - b == pytest.approx(beta * inner, rel=1e-9, abs=1e-9)


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=10))
def test_softplus_monotone_and_positive(z):
    z = np.sort(np.asarray(z))
    s = softplus(z)
    assert np.all(s > 0) and np.all(np.diff(s) >= 0)


def test_numerical_stability_at_extremes():
    assert softplus(np.array([1e4]))[0] == 1e4
    assert softplus(np.array([-1e4]))[0] == 0.0
    assert np.all(np.isfinite(sigmoid(np.array([-1e4, 1e4]))))
    assert sfo_value(0.0, 10.0, 0.0, 0.0, 1e6) == 0.0


def test_beta_validation_and_non_finite_inner():
    with pytest.raises(ValueError):
        sfo_loss(_stack(), LAYOUT, _quad(0), beta=0.0)
    q = _quad(0)
    bad = QuadBatch(q.x_pos * 1e200, q.x_neg, q.cond, q.eps, q.t)
    with pytest.raises(LossError), np.errstate(all="ignore"):
        sfo_loss(randomize_adapter(_stack(), "sfo", 9), LAYOUT, bad, beta=1e200)


def test_quad_batch_shape_checks():
    q = _quad(0)
    with pytest.raises(ValueError):
        QuadBatch(q.x_pos, q.x_neg[:2], q.cond, q.eps, q.t)
    with pytest.raises(ValueError):
        QuadBatch(q.x_pos, q.x_neg, q.cond[:2], q.eps, q.t)


def test_shared_noise_between_pair_members():
    stack = randomize_adapter(_stack(), "sfo", 4)
    q = _quad(1)
    out, _ = sfo_loss(stack, LAYOUT, q, beta=2.0, with_grads=False)
    d = delta(stack, LAYOUT, {"ref", "sfo"}, q.x_pos, q.x_neg, q.cond, q.t, q.eps)
    assert np.allclose(out.delta_policy, d)
    assert out.value == pytest.approx(sfo_value(out.err_pos_policy, out.err_neg_policy, out.err_pos_ref,
                                                out.err_neg_ref, 2.0))
    assert len(out.per_example) == len(q)
    assert set(out.metrics()) == {"loss", "delta_policy", "delta_ref", "inner", "implicit_acc"}


def test_identical_targets_give_ln2_everywhere():
    stack = randomize_adapter(_stack(), "sfo", 4)
    q = _quad(2)
    same = QuadBatch(q.x_pos, q.x_pos.copy(), q.cond, q.eps, q.t)
    out, _ = sfo_loss(stack, LAYOUT, same, beta=50.0)
    assert abs(out.value - LN2) < 1e-12


def test_sft_loss_oracle():
    stack = small_stack(LAYOUT, (4,))
    r = RngStream(0)
    x, cond, eps, t = r.normal((6, 2)), r.normal((6, 2)), r.normal((6, 2)), r.uniform(6)
    value, _ = sft_loss(stack, LAYOUT, x, cond, t, eps, with_grads=False)
    x_t = (1 - t[:, None]) * x + t[:, None] * eps
    pred = stack.forward(LAYOUT.encode(x_t, t, cond))
    assert value == pytest.approx(np.mean((pred - (eps - x)) ** 2), rel=1e-12)
    with pytest.raises(ValueError):
        sft_loss(stack, LAYOUT, x, cond, t, eps[:, :1])


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000))
def test_sfo_gradient_direction_lowers_loss(seed):
    stack = randomize_adapter(_stack(seed % 7), "sfo", seed)
    q = _quad(seed)
    out, g = sfo_loss(stack, LAYOUT, q, beta=1.0)
    step = {k: stack.named_params()[k] - 1e-4 * v for k, v in g.items()}
    after, _ = sfo_loss(stack.with_params(step), LAYOUT, q, beta=1.0, with_grads=False)
    assert after.value <= out.value + 1e-12


@given(st.floats(1e-3, 10), st.floats(0.01, 50), st.floats(0.01, 50))
def test_beta_scaling_direction(a, b1, b2):
    lo, hi = sorted((b1, b2))
    if hi - lo < 1e-6:
        return
    # positive inner argument: loss grows with beta; negative: it shrinks
    assert sfo_value(a, 0, 0, 0, hi) > sfo_value(a, 0, 0, 0, lo)
    assert sfo_value(-a, 0, 0, 0, hi) < sfo_value(-a, 0, 0, 0, lo)
