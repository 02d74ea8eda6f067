import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from quantunet.errors import ConfigError, ShapeError
from quantunet.losses import total_loss
from quantunet.model import UNetConfig, build, layer_plan, param_count, quant_layer_names
from quantunet.tensor import Tensor, no_grad


def enumerate_params(base, depth=4, cin=1, cout=1):
    """Independent count straight from the layer table: conv (k*k*Cin + 1) * Cout."""
    conv = lambda ci, co, k: (k * k * ci + 1) * co
    total, c_prev = 0, cin
    widths = [base * 2**i for i in range(depth + 1)]
    for c in widths[:-1]:
        total += conv(c_prev, c, 3) + conv(c, c, 3)
        c_prev = c
    total += conv(c_prev, widths[-1], 3) + conv(widths[-1], widths[-1], 3)
    for c in reversed(widths[:-1]):
        total += conv(2 * c, c, 2)  # 2x2 transposed conv from 2c to c channels
        total += conv(2 * c, c, 3) + conv(c, c, 3)
    return total + conv(widths[0], cout, 1)


def test_twenty_three_layers_in_order():
    names = quant_layer_names(build(UNetConfig(base_channels=2)))
    assert len(names) == 23
    assert names[:4] == ["enc1.conv1", "enc1.conv2", "enc2.conv1", "enc2.conv2"]
    assert names[8:10] == ["bottleneck.conv1", "bottleneck.conv2"]
    assert names[10:13] == ["up4", "dec4.conv1", "dec4.conv2"]
    assert names[-1] == "outseg"


@pytest.mark.parametrize("base", [1, 2, 8, 64])
def test_param_count_matches_enumeration(base):
    cfg = UNetConfig(base_channels=base)
    plan_count = sum(int(np.prod(s)) + (s[1] if k == "convT" else s[0]) for _, k, s in layer_plan(cfg))
    assert plan_count == enumerate_params(base)
    if base <= 8:
        assert param_count(build(cfg)) == plan_count


def test_base64_enumeration_value():
    assert enumerate_params(64) == 31_030_593


@settings(max_examples=15)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3))
def test_shape_round_trip(hk, wk, n):
    m = build(UNetConfig(base_channels=2))
    x = np.random.default_rng(hk * 10 + wk).random((n, 1, 16 * hk, 16 * wk)).astype(np.float32)
    with no_grad():
        y = m.forward(x, training=False)
    assert y.shape == (n, 1, 16 * hk, 16 * wk)
    assert np.all((y.data > 0) & (y.data < 1))


@pytest.mark.parametrize("shape", [(1, 1, 20, 16), (1, 2, 16, 16), (1, 16, 16)])
def test_bad_input_shape(shape):
    m = build(UNetConfig(base_channels=2))
    with pytest.raises(ShapeError):
        m.forward(np.zeros(shape, dtype=np.float32))


def test_depth_changes_divisibility():
    m = build(UNetConfig(base_channels=2, depth=2))
    assert len(m.layers) == 2 * 2 + 2 + 3 * 2 + 1
    with no_grad():
        assert m.forward(np.zeros((1, 1, 12, 8), dtype=np.float32)).shape == (1, 1, 12, 8)


@pytest.mark.parametrize("kw", [{"base_channels": 0}, {"depth": 0}, {"act_bitwidth": 1}, {"in_channels": 0}])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        build(UNetConfig(**kw))


def test_config_dict_round_trip():
    cfg = UNetConfig(base_channels=3, act_bitwidth=6, quantized=False)
    assert UNetConfig.from_dict(cfg.to_dict()) == cfg


def test_eight_bit_close_to_float_baseline():
    rng = np.random.default_rng(3)
    x = rng.random((2, 1, 32, 32)).astype(np.float64)
    q = build(UNetConfig(base_channels=4, init_bitwidth=8.0), seed=5)
    f = build(UNetConfig(base_channels=4, quantized=False), seed=5)
    with no_grad():
        q.forward(Tensor(x), training=True)  # observe activation ranges on this batch
        yq = q.forward(Tensor(x), training=False).data
        yf = f.forward(Tensor(x), training=False).data
    assert np.max(np.abs(yq - yf)) < 0.05


def test_every_bitwidth_receives_gradient():
    rng = np.random.default_rng(0)
    m = build(UNetConfig(base_channels=2))
    x = rng.random((2, 1, 16, 16)).astype(np.float32)
    y = (rng.random((2, 1, 16, 16)) > 0.5).astype(np.float32)
    loss, _ = total_loss(m.forward(x, training=True), y, m.quant_params())
    loss.backward()
    grads = [float(p.b_param.grad) for p in m.quant_params()]
    assert len(grads) == 23 and all(g != 0.0 for g in grads)


def test_eval_freezes_and_train_thaws():
    m = build(UNetConfig(base_channels=2))
    x = np.random.default_rng(0).random((1, 1, 16, 16)).astype(np.float32)
    with no_grad():
        m.forward(x, training=True)
    before = [st.running_max for _, st in m.act_states()]
    with no_grad():
        m.forward(x * 3, training=False)
    assert [st.running_max for _, st in m.act_states()] == before
    m.train()
    assert not any(st.frozen for _, st in m.act_states())


def test_build_is_seeded():
    a = build(UNetConfig(base_channels=2), seed=1)
    b = build(UNetConfig(base_channels=2), seed=1)
    c = build(UNetConfig(base_channels=2), seed=2)
    assert all(np.array_equal(x.weight.data, y.weight.data) for x, y in zip(a.layers, b.layers))
    assert not np.array_equal(a.layers[0].weight.data, c.layers[0].weight.data)


def test_weight_dtype_and_init():
    m = build(UNetConfig(base_channels=4))
    for layer in m.layers:
        assert layer.weight.data.dtype == np.float32
        assert not layer.bias.data.any()
        assert layer.qparams.value == 4.0
