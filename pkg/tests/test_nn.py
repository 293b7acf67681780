import numpy as np
import pytest

from ecnp.errors import ShapeMismatch
from ecnp.nn import MLP, AdamState, adam_step, init, mlp_forward
from ecnp.tape import Tape


def forward(mlp, x):
    tape = Tape()
    return mlp_forward(mlp, tape.constant(np.asarray(x, float)), tape).value


def test_identity_layer():
    mlp = MLP([2, 2])
    mlp.layers[0].weight[...] = np.eye(2)
    np.testing.assert_array_equal(forward(mlp, [[1.0, 2.0]]), [[1.0, 2.0]])


def test_bias_passthrough():
    mlp = MLP([3, 1])
    mlp.layers[0].bias[...] = 3.0
    np.testing.assert_array_equal(forward(mlp, [[0.3, -7.0, 2.0]]), [[3.0]])


def test_hand_computed_two_layer():
    mlp = MLP([2, 2, 1])
    for layer in mlp.layers:
        layer.weight[...] = 1.0
    np.testing.assert_array_equal(forward(mlp, [[1.0, 1.0]]), [[4.0]])


def test_no_relu_after_last_layer():
    mlp = MLP([1, 1])
    mlp.layers[0].weight[...] = -1.0
    np.testing.assert_array_equal(forward(mlp, [[2.0]]), [[-2.0]])


def test_input_width_checked():
    with pytest.raises(ShapeMismatch):
        forward(MLP([3, 2]), [[1.0, 2.0]])


def test_init_bounds_and_determinism():
    a, b, c = MLP([4, 8, 3]), MLP([4, 8, 3]), MLP([4, 8, 3])
    init(a, 1)
    init(b, 1)
    init(c, 2)
    assert np.all(np.abs(a.layers[0].weight) <= 0.5)
    assert np.all(np.abs(a.layers[1].weight) <= np.sqrt(1 / 8))
    assert all(np.all(l.bias == 0) for l in a.layers)
    for la, lb, lc in zip(a.layers, b.layers, c.layers):
        np.testing.assert_array_equal(la.weight, lb.weight)
        assert not np.array_equal(la.weight, lc.weight)


def test_adam_first_step():
    p = {"w": np.zeros(5)}
    st = AdamState(lr=1e-3)
    assert adam_step(p, {"w": np.ones(5)}, st)
    assert st.t == 1
    np.testing.assert_allclose(p["w"], -1e-3, rtol=1e-7)


def test_adam_zero_gradient_is_bitwise_noop():
    rng = np.random.default_rng(0)
    p = {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=4)}
    before = {k: v.copy() for k, v in p.items()}
    st = AdamState()
    adam_step(p, {k: np.zeros_like(v) for k, v in p.items()}, st)
    for k in p:
        assert p[k].tobytes() == before[k].tobytes()


def test_adam_parameters_independent():
    p = {"a": np.zeros(2), "b": np.zeros(2)}
    adam_step(p, {"a": np.ones(2), "b": np.zeros(2)}, AdamState())
    assert np.all(p["a"] < 0)
    np.testing.assert_array_equal(p["b"], 0.0)


def test_adam_skips_non_finite():
    p = {"a": np.ones(2), "b": np.ones(2)}
    st = AdamState()
    assert not adam_step(p, {"a": np.array([np.nan, 0.0]), "b": np.ones(2)}, st)
    assert st.t == 0
    np.testing.assert_array_equal(p["a"], 1.0)
    np.testing.assert_array_equal(p["b"], 1.0)


def test_clip_norm_scales_gradient():
    p1, p2 = {"a": np.zeros(2)}, {"a": np.zeros(2)}
    s1, s2 = AdamState(), AdamState()
    adam_step(p1, {"a": np.array([30.0, 40.0])}, s1, clip_norm=5.0)
    adam_step(p2, {"a": np.array([3.0, 4.0])}, s2)
    np.testing.assert_array_equal(s1.m["a"], s2.m["a"])


def test_fits_linear_map():
    mlp = MLP([1, 16, 1])
    init(mlp, 0)
    params = mlp.named_parameters()
    names, arrays = list(params), list(params.values())
    x = np.linspace(-1, 1, 32)[:, None]
    st = AdamState(lr=1e-2)
    for _ in range(1000):
        tape = Tape()
        err = mlp_forward(mlp, tape.constant(x), tape) - tape.constant(2 * x)
        loss = tape.mean(tape.square(err))
        adam_step(params, dict(zip(names, tape.grad(loss, arrays))), st)
    assert float(loss.value) < 1e-3
