import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentgeo.numerics import (
    AdamState,
    DimensionError,
    FileFormatError,
    Mlp,
    PiecewiseLinearActivationError,
    activation_eval,
    adam_step,
    finite_diff_check,
    mlp_forward,
    mlp_jacobian,
    mlp_jacobian_dz,
    read_params,
    write_params,
)


@pytest.mark.parametrize("kind, expected", [
    ("tanh", (0.0, 1.0, 0.0)),
    ("sigmoid", (0.5, 0.25, 0.0)),
    ("softplus", (math.log(2.0), 0.5, 0.25)),
    ("linear", (0.0, 1.0, 0.0)),
])
def test_activation_at_zero(kind, expected):
    assert activation_eval(kind, 0.0) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("kind", ["tanh", "sigmoid", "softplus"])
@given(v=st.floats(-800, 800))
@settings(max_examples=60, deadline=None)
def test_activation_finite_and_consistent(kind, v):
    f, d1, d2 = activation_eval(kind, v)
    assert all(math.isfinite(x) for x in (f, d1, d2))
    if abs(v) < 20:
        h = 1e-5
        fp, _, _ = activation_eval(kind, v + h)
        fm, _, _ = activation_eval(kind, v - h)
        assert d1 == pytest.approx((fp - fm) / (2 * h), abs=1e-8)


def test_softplus_large_arguments():
    f, d1, d2 = activation_eval("softplus", 700.0)
    assert f == 700.0 and d1 == 1.0 and d2 == 0.0
    f, d1, _ = activation_eval("softplus", -700.0)
    assert 0 <= f < 1e-300 and 0 <= d1 < 1e-300


@pytest.mark.parametrize("name", ["relu", "ReLU", "leaky_relu"])
def test_piecewise_linear_rejected(name):
    with pytest.raises(PiecewiseLinearActivationError):
        Mlp([np.eye(2)], [np.zeros(2)], [name])


def test_forward_examples():
    lin = Mlp([np.eye(2)], [np.zeros(2)], ["linear"])
    np.testing.assert_array_equal(mlp_forward(lin, [1.0, 2.0]), [1.0, 2.0])
    sig = Mlp([np.eye(2)], [np.zeros(2)], ["sigmoid"])
    np.testing.assert_allclose(mlp_forward(sig, [0.0, 0.0]), [0.5, 0.5])
    with pytest.raises(DimensionError):
        mlp_forward(lin, [1.0, 2.0, 3.0])


def test_forward_matches_plain_reimplementation():
    rng = np.random.default_rng(42)
    net = Mlp.init([3, 7, 4], ["tanh", "tanh"], rng)
    net.biases = [rng.normal(size=7), rng.normal(size=4)]
    z = np.array([0.3, -1.2, 0.8])
    h = z
    for w, b in zip(net.weights, net.biases):
        h = np.array([math.tanh(sum(w[i, j] * h[j] for j in range(len(h))) + b[i])
                      for i in range(w.shape[0])])
    np.testing.assert_allclose(mlp_forward(net, z), h, rtol=1e-14)


def test_jacobian_examples():
    W = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    lin = Mlp([W], [np.ones(3)], ["linear"])
    np.testing.assert_array_equal(mlp_jacobian(lin, [0.7, -0.2]), W)
    sig = Mlp([np.eye(2)], [np.zeros(2)], ["sigmoid"])
    np.testing.assert_allclose(mlp_jacobian(sig, [0.0, 0.0]), 0.25 * np.eye(2))
    np.testing.assert_array_equal(mlp_jacobian_dz(lin, [0.1, 0.2]), np.zeros((3, 2, 2)))
    th = Mlp([np.eye(2)], [np.zeros(2)], ["tanh"])
    np.testing.assert_array_equal(mlp_jacobian_dz(th, [0.0, 0.0]), np.zeros((2, 2, 2)))


@pytest.mark.parametrize("acts", [["tanh", "softplus", "linear"], ["softplus", "softplus"],
                                  ["sigmoid", "tanh", "softplus", "sigmoid"]])
def test_jacobians_match_finite_differences(acts):
    rng = np.random.default_rng(len(acts))
    sizes = [3] + list(rng.integers(3, 9, size=len(acts) - 1)) + [5]
    net = Mlp.init(sizes, acts, rng)
    net.biases = [rng.normal(scale=0.5, size=b.shape) for b in net.biases]
    pts = rng.normal(size=(10, 3))
    assert finite_diff_check(net.forward, net.jacobian, pts, 1e-5) < 1e-5
    assert finite_diff_check(net.jacobian, net.jacobian_dz, pts, 1e-5) < 1e-4
    H = net.jacobian_dz(pts)
    assert np.abs(H - np.swapaxes(H, -1, -2)).max() < 1e-10


def test_batched_jacobian_matches_single():
    rng = np.random.default_rng(3)
    net = Mlp.init([2, 6, 4], ["tanh", "softplus"], rng)
    Z = rng.normal(size=(5, 2))
    J = net.jacobian(Z)
    for k in range(5):
        np.testing.assert_allclose(J[k], net.jacobian(Z[k]), rtol=1e-13, atol=1e-15)


def test_residual_layers():
    rng = np.random.default_rng(5)
    net = Mlp.init([2, 4, 4, 4, 3], ["tanh", "tanh", "tanh", "softplus"], rng,
                   residual=[False, True, True, False])
    pts = rng.normal(size=(4, 2))
    assert finite_diff_check(net.forward, net.jacobian, pts) < 1e-6
    with pytest.raises(DimensionError):
        Mlp.init([2, 3, 4], "tanh", rng, residual=[False, True])


def test_tangent_backward_matches_finite_differences():
    rng = np.random.default_rng(11)
    net = Mlp.init([2, 5, 3], ["tanh", "softplus"], rng)
    z = rng.normal(size=(4, 2))
    T = rng.normal(size=(4, 2, 2))
    gx, gX = rng.normal(size=(4, 3)), rng.normal(size=(4, 2, 3))

    def loss(params):
        net.set_params(params)
        x, X, _ = net.forward_tangent(z, T)
        return float(np.sum(gx * x) + np.sum(gX * X))

    p0 = [p.copy() for p in net.params]
    _, _, cache = net.forward_tangent(z, T, keep_cache=True)
    _, _, grads = net.backward_tangent(cache, gx, gX)
    for k in range(len(p0)):
        for idx in list(np.ndindex(p0[k].shape))[:5]:
            pp = [p.copy() for p in p0]
            pp[k][idx] += 1e-6
            up = loss(pp)
            pp[k][idx] -= 2e-6
            down = loss(pp)
            assert grads[k][idx] == pytest.approx((up - down) / 2e-6, rel=1e-5, abs=1e-8)
    net.set_params(p0)


def test_adam_examples():
    p = [np.array([1.0])]
    st_ = AdamState.for_params(p, learning_rate=0.1)
    out = adam_step(st_, p, [np.array([1.0])])
    assert out[0][0] == pytest.approx(0.9, abs=1e-6)
    assert st_.step == 1
    st2 = AdamState.for_params(p, learning_rate=0.1)
    assert adam_step(st2, p, [np.zeros(1)])[0][0] == 1.0
    a, b = AdamState.for_params(p, 0.1), AdamState.for_params(p, 0.1)
    g = [np.array([0.37])]
    assert adam_step(a, p, g)[0].tobytes() == adam_step(b, p, g)[0].tobytes()
    with pytest.raises(DimensionError):
        adam_step(AdamState.for_params(p), p, [np.zeros(2)])


def test_finite_diff_checker_sanity():
    pts = [np.array([0.3]), np.array([-2.0])]
    assert finite_diff_check(lambda z: z ** 2, lambda z: 2 * z, pts) < 1e-9
    assert finite_diff_check(lambda z: z ** 2, lambda z: 4 * z, pts) == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(ValueError):
        finite_diff_check(lambda z: z, lambda z: z, pts, h=0.0)


def test_param_file_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    nets = {"a": Mlp.init([2, 3, 4], ["tanh", "linear"], rng),
            "b": Mlp.init([4, 4, 4], ["tanh", "tanh"], rng, residual=[True, False])}
    path = tmp_path / "m.params"
    write_params(path, nets, {"note": "x"})
    back, meta = read_params(path)
    assert meta == {"note": "x"}
    for k in nets:
        for p, q in zip(nets[k].params, back[k].params):
            assert p.tobytes() == q.tobytes()
        assert back[k].residual == nets[k].residual
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(FileFormatError):
        read_params(path)
    path.write_bytes(data + b"\0" * 8)
    with pytest.raises(FileFormatError):
        read_params(path)
    path.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(FileFormatError):
        read_params(path)
