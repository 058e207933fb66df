import numpy as np
import pytest
from hypothesis import given, strategies as st

from koopmpc.nn_core import (
    AdamState,
    Mlp,
    NonFiniteGradient,
    NormalizationSpec,
    adam_step,
    global_norm_clip,
    load_checkpoint,
    mlp_backward,
    mlp_forward,
    mlp_from_state,
    mlp_state,
    save_checkpoint,
)


def identity_net(d):
    return Mlp([np.eye(d)], [np.zeros(d)], ["identity"])


def test_identity_layer_forward():
    net = identity_net(2)
    y, _ = mlp_forward(net, np.array([1.0, 2.0]))
    assert np.array_equal(y, [1.0, 2.0])


def test_tanh_zero_weights_zero_output():
    net = Mlp([np.zeros((3, 2))], [np.zeros(3)], ["tanh"])
    y, _ = mlp_forward(net, np.array([0.4, -0.2]))
    assert np.array_equal(y, np.zeros(3))


def test_encoder_shape_2_4_6_8(rng):
    net = Mlp.create([2, 4, 6, 8], rng)
    y, _ = mlp_forward(net, np.array([0.1, 0.9]))
    assert y.shape == (8,)
    yb, _ = mlp_forward(net, rng.random((5, 2)))
    assert yb.shape == (5, 8)


def test_forward_dimension_mismatch():
    net = identity_net(2)
    with pytest.raises(ValueError):
        mlp_forward(net, np.array([1.0, 2.0, 3.0]))


def test_backward_identity_passes_gradient():
    net = identity_net(3)
    _, tape = mlp_forward(net, np.array([1.0, -1.0, 0.5]))
    g = np.array([0.3, 0.1, -0.7])
    gx, _ = mlp_backward(net, tape, g)
    assert np.array_equal(gx, g)


def test_backward_zero_grad_gives_zero():
    rng = np.random.default_rng(0)
    net = Mlp.create([3, 5, 2], rng)
    _, tape = mlp_forward(net, rng.random(3))
    gx, grads = mlp_backward(net, tape, np.zeros(2))
    assert np.all(gx == 0)
    assert all(np.all(g == 0) for g in grads.params())


def test_backward_rejects_stale_tape():
    rng = np.random.default_rng(0)
    a = Mlp.create([2, 3], rng)
    b = Mlp.create([2, 3], rng)
    _, tape = mlp_forward(a, np.array([0.1, 0.2]))
    with pytest.raises(ValueError):
        mlp_backward(b, tape, np.zeros(3))


def test_gradient_check_against_finite_differences():
    rng = np.random.default_rng(7)
    for _ in range(20):
        sizes = [int(rng.integers(1, 5)) for _ in range(rng.integers(2, 5))]
        net = Mlp.create(sizes, rng, output_activation="tanh" if rng.random() < 0.5 else "identity")
        x = rng.normal(size=sizes[0])
        gy = rng.normal(size=sizes[-1])
        _, tape = mlp_forward(net, x)
        gx, grads = mlp_backward(net, tape, gy)

        def loss(net_, x_):
            y, _ = mlp_forward(net_, x_)
            return float(gy @ y)

        eps = 1e-6
        # input gradient
        for i in range(len(x)):
            xp = x.copy(); xp[i] += eps
            xm = x.copy(); xm[i] -= eps
            fd = (loss(net, xp) - loss(net, xm)) / (2 * eps)
            assert abs(fd - gx[i]) / max(1.0, abs(fd)) < 1e-5
        # a few parameter gradients
        for li in range(len(net.weights)):
            W = net.weights[li]
            i, j = int(rng.integers(W.shape[0])), int(rng.integers(W.shape[1]))
            Wp = net.copy(); Wp.weights[li][i, j] += eps
            Wm = net.copy(); Wm.weights[li][i, j] -= eps
            fd = (loss(Wp, x) - loss(Wm, x)) / (2 * eps)
            assert abs(fd - grads.dW[li][i, j]) / max(1.0, abs(fd)) < 1e-5


def test_adam_zero_gradient_keeps_params():
    params = [np.array([1.0, 2.0])]
    opt = AdamState.init(params, lr=0.1)
    adam_step(params, [np.zeros(2)], opt)
    assert np.array_equal(params[0], [1.0, 2.0])
    assert opt.step == 1


def test_adam_descends_quadratic():
    w = [np.array([1.0])]
    opt = AdamState.init(w, lr=0.1)
    adam_step(w, [2.0 * w[0]], opt)  # grad of w^2
    assert w[0][0] < 1.0


def test_adam_converges_to_three():
    w = [np.array([0.0])]
    opt = AdamState.init(w, lr=0.01)
    for _ in range(2000):
        adam_step(w, [2.0 * (w[0] - 3.0)], opt)
    assert abs(w[0][0] - 3.0) < 1e-3


def test_adam_rejects_nonfinite():
    w = [np.array([0.0])]
    opt = AdamState.init(w, lr=0.01)
    with pytest.raises(NonFiniteGradient):
        adam_step(w, [np.array([np.nan])], opt)
    assert opt.step == 0


def test_global_clip_exact_norm():
    rng = np.random.default_rng(1)
    grads = [rng.normal(size=(4, 3)) * 10, rng.normal(size=7) * 10]
    clipped, pre = global_norm_clip(grads, 0.5)
    post = np.sqrt(sum(float(np.sum(g * g)) for g in clipped))
    assert pre > 0.5
    assert abs(post - 0.5) < 1e-12


def test_global_clip_no_change_below_threshold():
    grads = [np.array([0.1, 0.1])]
    before = grads[0].copy()
    _, pre = global_norm_clip(grads, 10.0)
    assert np.array_equal(grads[0], before)
    assert pre < 10.0


def _cstr_spec():
    return NormalizationSpec(
        names=("c", "T"), lower=np.array([0.1231, 0.6]), upper=np.array([0.1504, 0.8])
    )


def test_normalize_bounds_map_to_unit_interval():
    spec = _cstr_spec()
    assert np.allclose(spec.normalize(spec.lower), 0.0)
    assert np.allclose(spec.normalize(spec.upper), 1.0)


def test_normalize_reference_value():
    spec = _cstr_spec()
    got = spec.normalize(np.array([0.1367, 0.7]))[0]
    assert got == pytest.approx((0.1367 - 0.1231) / (0.1504 - 0.1231), abs=1e-12)
    assert got == pytest.approx(0.4982, abs=1e-3)


def test_zero_width_range_rejected():
    with pytest.raises(ValueError):
        NormalizationSpec(names=("a",), lower=np.array([1.0]), upper=np.array([1.0]))


@given(
    c=st.floats(min_value=0.1231, max_value=0.1504),
    T=st.floats(min_value=0.6, max_value=0.8),
)
def test_normalize_round_trip(c, T):
    spec = _cstr_spec()
    v = np.array([c, T])
    back = spec.denormalize(spec.normalize(v))
    assert np.all(np.abs(back - v) < 1e-12)


def test_checkpoint_round_trip_bit_exact(tmp_path, rng):
    net = Mlp.create([2, 4, 3], rng)
    arrays, meta = mlp_state(net, "net")
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, "mlp", arrays, {"net": meta})
    kind, arrays2, meta2 = load_checkpoint(path)
    assert kind == "mlp"
    restored = mlp_from_state(arrays2, meta2["net"], "net")
    for a, b in zip(net.params(), restored.params()):
        assert np.array_equal(a, b)
    assert restored.activations == net.activations
