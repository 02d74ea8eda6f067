import math
import time

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from quantunet.errors import ContractError
from quantunet.quant import (
    ActQuantState,
    QuantParams,
    avg_bitwidth,
    effective_bitwidth,
    fake_quant_activation,
    fake_quant_bias,
    fake_quant_weight,
    quantize_weight_int,
    round_ste,
    weight_meta,
)
from quantunet.tensor import Tensor

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False, width=32)
weights = st.one_of(
    hnp.arrays(np.float32, hnp.array_shapes(max_dims=3, max_side=6), elements=finite),
    hnp.arrays(np.float64, hnp.array_shapes(max_dims=3, max_side=6), elements=finite),
)
bit_values = st.floats(-5.0, 15.0, allow_nan=False)


@given(weights, st.integers(2, 8))
def test_grid_membership(w, b):
    out, meta = fake_quant_weight(Tensor(w), QuantParams.create(float(b)))
    q = out.data.astype(np.float64) / meta.scale
    assert meta.q_max == 2 ** (b - 1) - 1
    np.testing.assert_allclose(q, np.round(q), atol=1e-6 * max(1, meta.q_max))
    assert np.all(np.abs(np.round(q)) <= meta.q_max)
    assert out.dtype == w.dtype


@given(weights, st.integers(2, 8))
def test_idempotent(w, b):
    p = QuantParams.create(float(b))
    once, _ = fake_quant_weight(Tensor(w), p)
    twice, _ = fake_quant_weight(Tensor(once.data), p)
    np.testing.assert_array_equal(once.data, twice.data)


@given(weights, st.integers(2, 8))
def test_integer_grid_matches_fake_quant(w, b):
    meta = weight_meta(w.astype(np.float64), b)
    q = quantize_weight_int(w, meta)
    out, _ = fake_quant_weight(Tensor(w), QuantParams.create(float(b)))
    np.testing.assert_array_equal((meta.scale * q).astype(w.dtype), out.data)


def test_zero_tensor_uses_floor_scale():
    meta = weight_meta(np.zeros(5), 4)
    assert meta.scale == pytest.approx(1e-8 / 7)


@given(hnp.arrays(np.float64, st.integers(1, 40), elements=st.floats(-10, 10)), st.floats(2.01, 7.99))
def test_ste_weight_and_bitwidth_gradients_closed_form(w, bval):
    p = QuantParams.create(bval)
    wt = Tensor(w.copy(), requires_grad=True)
    out, meta = fake_quant_weight(wt, p)
    g = np.random.default_rng(len(w)).standard_normal(w.shape)
    (out * Tensor(g)).sum().backward()

    s, qm, b = meta.scale, meta.q_max, meta.b_eff
    u = w / s
    r = np.round(u)
    inside = np.abs(r) <= qm
    np.testing.assert_array_equal(wt.grad, g * inside)
    expected = np.sum(g * np.where(inside, r - u, 0.0)) * (-s / qm) * 2.0 ** (b - 1) * math.log(2.0)
    assert p.b_param.grad == pytest.approx(expected, rel=1e-12, abs=1e-300)


def test_bitwidth_gradient_zero_on_rails():
    for v in (2.0, 8.0, 1.0, 9.5):
        p = QuantParams.create(v)
        out, _ = fake_quant_weight(Tensor(np.linspace(-1, 1, 11), requires_grad=True), p)
        out.sum().backward()
        assert p.b_param.grad is None or float(p.b_param.grad) == 0.0


@given(bit_values)
def test_effective_bitwidth_clamps_to_integer_range(v):
    p = QuantParams.create(v)
    e = effective_bitwidth(p)
    assert float(e.data) in {2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0}
    assert float(e.data) == np.round(min(max(v, 2.0), 8.0))
    assert p.b_eff == int(e.data)
    e.backward()
    assert float(p.b_param.grad) == (1.0 if 2.0 < v < 8.0 else 0.0)


def test_effective_bitwidth_rounds_half_to_even():
    assert QuantParams.create(4.5).b_eff == 4
    assert QuantParams.create(5.5).b_eff == 6
    assert QuantParams.create(2.5).b_eff == 2


@given(st.lists(st.floats(2.01, 7.99), min_size=1, max_size=30))
def test_avg_bitwidth_gradient_is_one_over_count(vals):
    params = [QuantParams.create(v) for v in vals]
    avg = avg_bitwidth(params)
    assert float(avg.data) == pytest.approx(np.mean(vals), rel=1e-12)
    avg.backward()
    for p in params:
        assert float(p.b_param.grad) == 1.0 / len(vals)


def test_avg_bitwidth_23_layers_exact():
    params = [QuantParams.create(4.0) for _ in range(23)]
    avg_bitwidth(params).backward()
    assert all(float(p.b_param.grad) == 1 / 23 for p in params)


def test_avg_bitwidth_empty_is_error():
    with pytest.raises(ContractError):
        avg_bitwidth([])


def test_round_ste_half_to_even_and_passthrough():
    x = Tensor(np.array([0.5, 1.5, 2.5, -0.5, -1.5]), requires_grad=True)
    y = round_ste(x)
    np.testing.assert_array_equal(y.data, [0, 2, 2, -0, -2])
    y.sum().backward()
    np.testing.assert_array_equal(x.grad, 1.0)


class TestActivationState:
    def test_first_batch_initializes_directly(self):
        st_ = ActQuantState()
        st_.observe(np.array([0.5, 3.0]), signed=False)
        assert st_.running_max == 3.0

    def test_ema_update(self):
        st_ = ActQuantState()
        st_.observe(np.array([2.0]), False)
        st_.observe(np.array([4.0]), False)
        assert st_.running_max == pytest.approx(0.9 * 2.0 + 0.1 * 4.0)

    def test_signed_uses_absolute_max(self):
        st_ = ActQuantState()
        st_.observe(np.array([-5.0, 1.0]), True)
        assert st_.running_max == 5.0

    def test_floor(self):
        st_ = ActQuantState()
        st_.observe(np.zeros(3), False)
        assert st_.running_max == 1e-8

    def test_frozen_state_does_not_move(self):
        st_ = ActQuantState(running_max=2.0, frozen=True)
        fake_quant_activation(Tensor(np.array([10.0])), 8, st_, training=True)
        assert st_.running_max == 2.0

    def test_eval_without_calibration_initializes_once(self):
        st_ = ActQuantState(frozen=True)
        fake_quant_activation(Tensor(np.array([3.0])), 8, st_, training=False)
        assert st_.running_max == 3.0

    def test_unset_scale_is_error(self):
        with pytest.raises(ContractError):
            ActQuantState().scale(8, False)


@given(hnp.arrays(np.float64, st.integers(1, 30), elements=st.floats(-4, 4)), st.booleans(), st.integers(2, 8))
def test_activation_grid_and_range(x, signed, bits):
    state = ActQuantState(running_max=2.0, frozen=True)
    y = fake_quant_activation(Tensor(x), bits, state, training=False, signed=signed)
    s = state.scale(bits, signed)
    q = y.data / s
    np.testing.assert_allclose(q, np.round(q), atol=1e-9)
    qmax = 2 ** (bits - 1) - 1 if signed else 2**bits - 1
    assert q.max() <= qmax + 1e-9 and q.min() >= (-qmax if signed else 0) - 1e-9


def test_activation_clip_grad_mask():
    state = ActQuantState(running_max=1.0, frozen=True)
    x = Tensor(np.array([-0.5, 0.5, 2.0]), requires_grad=True)
    fake_quant_activation(x, 8, state, False, signed=False, clip_grad=True).sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])
    x2 = Tensor(np.array([-0.5, 0.5, 2.0]), requires_grad=True)
    fake_quant_activation(x2, 8, state, False, signed=False).sum().backward()
    np.testing.assert_array_equal(x2.grad, 1.0)


@given(hnp.arrays(np.float64, st.integers(1, 10), elements=st.floats(-100, 100)),
       st.floats(1e-6, 1.0, allow_subnormal=False))
def test_bias_on_accumulator_grid(b, scale):
    out = fake_quant_bias(Tensor(b), scale)
    q = out.data / scale
    np.testing.assert_allclose(q, np.round(q), atol=1e-6)


def test_suite_budget():
    # the full closed-form quantizer checks above are cheap; keep one timing guard
    t = time.perf_counter()
    for _ in range(200):
        fake_quant_weight(Tensor(np.random.default_rng(0).standard_normal((64, 64, 3, 3))), QuantParams.create(4.0))
    assert time.perf_counter() - t < 10
