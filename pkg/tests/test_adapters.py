import numpy as np
import pytest

from sfolab.adapters import attach, grad_mask, set_enabled
from sfolab.model import FieldLayout
from sfolab.numcore import RngStream

from _util import central_difference, grads_match, randomize_adapter, small_stack

LAYOUT = FieldLayout(2, 2, n_freq=1)


def test_fresh_adapter_is_a_noop():
    base = small_stack(LAYOUT)
    x = RngStream(1).normal((5, LAYOUT.input_dim))
    stack = attach(base, "ref", 3, RngStream(2))
    assert stack.enabled == {"ref"}
    assert np.array_equal(stack.forward(x), base.forward(x))
    ad = stack.adapters["ref"]
    assert ad.scale == pytest.approx(1 / 3)
    assert all(not np.any(b) for b in ad.B)
    assert abs(np.concatenate([a.ravel() for a in ad.A]).var() - 1 / 3) < 0.1


def test_effective_weight_is_base_plus_scaled_product():
    stack = randomize_adapter(attach(small_stack(LAYOUT), "ref", 2, RngStream(0)), "ref", 1)
    ad = stack.adapters["ref"]
    eff = stack.effective_params()
    for k, w in enumerate(stack.base.weights):
        assert np.allclose(eff.weights[k], w + 0.5 * ad.B[k] @ ad.A[k])
    assert np.array_equal(stack.effective_params(set()).weights[0], stack.base.weights[0])


def test_enable_sets_and_errors():
    stack = attach(small_stack(LAYOUT), "ref", 2, RngStream(0))
    with pytest.raises(ValueError):
        stack.attach("ref", 2, RngStream(0))
    with pytest.raises(ValueError):
        stack.attach("x", 0, RngStream(0))
    with pytest.raises(KeyError):
        set_enabled(stack, {"nope"})
    with pytest.raises(KeyError):
        grad_mask(stack, {"nope"})
    off = set_enabled(stack, set())
    assert off.enabled == frozenset() and stack.enabled == {"ref"}


def test_stacks_are_values():
    stack = attach(small_stack(LAYOUT), "ref", 2, RngStream(0))
    before = stack.base.weights[0].copy()
    changed = stack.with_params({"base.W.0": before + 1.0, "ref.B.0": np.ones_like(stack.adapters["ref"].B[0])})
    assert np.array_equal(stack.base.weights[0], before)
    assert not np.any(stack.adapters["ref"].B[0])
    assert np.any(changed.adapters["ref"].B[0])


def test_attach_is_seed_deterministic():
    a = attach(small_stack(LAYOUT), "sfo", 4, RngStream(3)).adapters["sfo"].A[0]
    b = attach(small_stack(LAYOUT), "sfo", 4, RngStream(3)).adapters["sfo"].A[0]
    c = attach(small_stack(LAYOUT), "sfo", 4, RngStream(4)).adapters["sfo"].A[0]
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_adapter_gradients_match_finite_differences():
    stack = attach(small_stack(LAYOUT, (6,)), "ref", 2, RngStream(0))
    stack = attach(stack, "sfo", 3, RngStream(1))
    stack = randomize_adapter(randomize_adapter(stack, "ref", 2), "sfo", 3)
    r = RngStream(5)
    x, up = r.normal((4, LAYOUT.input_dim)), r.normal((4, 2))

    def loss(s):
        return float(np.sum(up * s.forward(x)))

    grads, _ = stack.backward(x, up)
    assert set(k.split(".")[0] for k in grads) == {"base", "ref", "sfo"}
    for name, g in grads.items():
        assert grads_match(g, central_difference(loss, stack, name)), name


def test_disabled_and_frozen_adapters_get_no_gradient():
    stack = attach(small_stack(LAYOUT), "ref", 2, RngStream(0)).attach("sfo", 2, RngStream(1), enable=False)
    x, up = RngStream(2).normal((3, LAYOUT.input_dim)), np.ones((3, 2))
    g, _ = stack.backward(x, up, trainable={"sfo"})
    assert set(g) == {f"sfo.{p}.{k}" for p in "AB" for k in range(2)}
    assert all(not np.any(v) for v in g.values())
    keep = grad_mask(stack, {"ref"})
    assert all(k.startswith("ref.") for k in keep({**g, "ref.A.0": np.ones(1), "base.W.0": np.ones(1)}))
