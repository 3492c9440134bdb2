import math

import numpy as np
import pytest

from a2c2.numkit import (AdamWState, MlpSpec, MlpWeights, NonFiniteGradient, ShapeError,
                         adamw_step, derive_seed, forward_one, grad_check, init_mlp, load_weights,
                         make_rng, mlp_backward, mlp_forward, mse_loss_and_grad, save_weights,
                         sin_embed, weights_from_bytes, weights_to_bytes)


def _linear(w, b=None):
    w = np.asarray(w, np.float32)
    b = np.zeros(w.shape[1], np.float32) if b is None else np.asarray(b, np.float32)
    return w, b


def test_zero_weights_give_zero_output():
    w = init_mlp(MlpSpec((4, 8, 3), True)).zeros_like()
    x = make_rng(0, "x").standard_normal((5, 4))
    assert np.all(mlp_forward(w, x) == 0)


def test_identity_linear_layer():
    W, b = _linear(np.eye(2))
    w = MlpWeights([W], [b], [None], [None])
    np.testing.assert_array_equal(mlp_forward(w, [0.3, -0.7])[0], np.float32([0.3, -0.7]))


def test_two_layer_hand_evaluation():
    W1, b1 = _linear(np.eye(2))
    W2, b2 = _linear([[1.0], [1.0]])
    w = MlpWeights([W1, W2], [b1, b2], [None, None], [None, None])
    # relu(-1) + relu(2) = 2
    assert mlp_forward(w, [-1.0, 2.0])[0, 0] == 2.0
    out, _ = forward_one(w, [-1.0, 2.0])
    assert out[0] == 2.0


def test_shape_mismatch_rejected():
    w = init_mlp(MlpSpec((3, 4, 2)))
    with pytest.raises(ShapeError, match="first layer size 3"):
        mlp_forward(w, np.zeros((2, 5)))
    with pytest.raises(ShapeError):
        mlp_backward(w, np.zeros((2, 3)), np.zeros((2, 3)))


def test_backward_zero_output_grad():
    w = init_mlp(MlpSpec((5, 8, 8, 3), True, 3))
    x = make_rng(1, "x").standard_normal((4, 5))
    g, gx = mlp_backward(w, x, np.zeros((4, 3)))
    assert all(np.all(p == 0) for p in g.params())
    assert np.all(gx == 0)


def test_backward_scalar_linear():
    W, b = _linear([[3.0]])
    w = MlpWeights([W], [b], [None], [None])
    g, gx = mlp_backward(w, [[2.0]], [[1.0]])
    assert g.weights[0][0, 0] == 2.0
    assert g.biases[0][0] == 1.0
    assert gx[0, 0] == 3.0


def test_grad_check_example_spec():
    assert grad_check(MlpSpec((5, 8, 8, 3), True, 11), trials=4) < 1e-3


def test_grad_check_default_spec_16_trials():
    assert grad_check(MlpSpec((10, 32, 32, 4), True, 0), trials=16) < 1e-3


def test_grad_check_single_1x1_layer():
    assert grad_check(MlpSpec((1, 1), (), 5), trials=16) < 1e-4


def test_grad_check_catches_sign_flip():
    def flipped(weights, x, og):
        g, gx = mlp_backward(weights, x, og)
        g.weights[0] = -g.weights[0]
        return g, gx
    assert grad_check(MlpSpec((10, 32, 32, 4), True, 0), trials=2, backward=flipped) > 1e-1


def test_mse_grad_matches_backward():
    w = init_mlp(MlpSpec((3, 6, 2), False, 2))
    rng = make_rng(0, "mse")
    x = rng.standard_normal((7, 3)).astype(np.float32)
    y = rng.standard_normal((7, 2)).astype(np.float32)
    loss, g = mse_loss_and_grad(w, x, y)
    pred = mlp_forward(w, x)
    assert loss == pytest.approx(float(((pred - y) ** 2).sum(axis=1).mean()), rel=1e-6)
    ref, _ = mlp_backward(w, x, 2.0 * (pred - y) / 7)
    for a, b in zip(g.params(), ref.params()):
        np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-7)


def test_forward_deterministic_and_kernel_agrees():
    w = init_mlp(MlpSpec((10, 64, 64, 16), (True, False), 4))
    x = make_rng(2, "x").standard_normal(10).astype(np.float32)
    a, b = mlp_forward(w, x), mlp_forward(w, x)
    assert a.tobytes() == b.tobytes()
    o1, h1 = forward_one(w, x, 1)
    o2, h2 = forward_one(w, x, 1)
    assert o1.tobytes() == o2.tobytes() and h1.tobytes() == h2.tobytes()
    np.testing.assert_allclose(o1, a[0], rtol=1e-5, atol=1e-5)


def test_adamw_zero_grad_zero_decay_is_fixed_point():
    w = init_mlp(MlpSpec((3, 5, 2), True, 1))
    before = w.digest()
    st = AdamWState(learning_rate=1e-2, warmup_steps=3, grad_clip_norm=1.0)
    for _ in range(5):
        adamw_step(st, w, w.zeros_like())
    assert w.digest() == before
    assert st.step == 5


def test_adamw_decoupled_decay_in_isolation():
    w = init_mlp(MlpSpec((3, 2), False, 1))
    w0 = w.weights[0].copy()
    st = AdamWState(learning_rate=1e-2, weight_decay=0.1)
    adamw_step(st, w, w.zeros_like())
    np.testing.assert_allclose(w.weights[0], w0 * np.float32(1 - 1e-2 * 0.1), rtol=1e-6)


def test_adamw_first_step_magnitude_is_lr():
    w = init_mlp(MlpSpec((3, 2), False, 1))
    w0 = w.weights[0].copy()
    g = w.zeros_like()
    g.weights[0][...] = make_rng(0, "g").standard_normal(w0.shape).astype(np.float32)
    adamw_step(AdamWState(learning_rate=1e-3), w, g)
    step = w0 - w.weights[0]
    np.testing.assert_allclose(np.abs(step), 1e-3, rtol=1e-3)
    assert np.all(np.sign(step) == np.sign(g.weights[0]))


def test_adamw_warmup_and_clip():
    st = AdamWState(learning_rate=1.0, warmup_steps=4)
    assert [st.current_lr(t) for t in (1, 2, 4, 9)] == [0.25, 0.5, 1.0, 1.0]
    w = init_mlp(MlpSpec((2, 1), False, 0))
    g = w.zeros_like()
    g.weights[0][...] = 30.0
    g.biases[0][...] = 40.0
    st = AdamWState(grad_clip_norm=5.0)
    assert adamw_step(st, w, g) == pytest.approx(math.sqrt(2 * 900 + 1600))
    np.testing.assert_allclose(st.m[0], 0.1 * 30.0 * 5.0 / math.sqrt(3400.0), rtol=1e-6)


def test_adamw_non_finite_rejected_state_unchanged():
    w = init_mlp(MlpSpec((2, 3, 1), False, 0))
    st = AdamWState()
    adamw_step(st, w, w.zeros_like())
    before, m0 = w.digest(), [m.copy() for m in st.m]
    g = w.zeros_like()
    g.biases[0][0] = np.nan
    with pytest.raises(NonFiniteGradient):
        adamw_step(st, w, g)
    assert w.digest() == before and st.step == 1
    assert all(np.array_equal(a, b) for a, b in zip(m0, st.m))


@pytest.mark.parametrize("k,H,expect", [(0, 8, (0.0, 1.0)), (2, 8, (1.0, 0.0)),
                                        (3, 8, (0.70711, -0.70711)), (0, 1, (0.0, 1.0))])
def test_sin_embed_values(k, H, expect):
    np.testing.assert_allclose(sin_embed(k, H), expect, atol=1e-5)


def test_sin_embed_unit_circle_and_range():
    for H in range(1, 17):
        for k in range(H):
            s, c = sin_embed(k, H).astype(np.float64)
            assert abs(s * s + c * c - 1) < 1e-6
    for k, H in ((-1, 8), (8, 8), (0, 0)):
        with pytest.raises(ValueError):
            sin_embed(k, H)


def test_weight_file_round_trip(tmp_path):
    w = init_mlp(MlpSpec((4, 9, 7, 3), (True, False), 8))
    path = tmp_path / "w.bin"
    save_weights(path, w)
    r = load_weights(path)
    assert r.layer_sizes == w.layer_sizes and r.digest() == w.digest()
    blob = weights_to_bytes(w)
    assert blob[:8] == b"A2C2NN\0\0"
    with pytest.raises(ValueError, match="expected"):
        weights_from_bytes(blob[:-1])
    with pytest.raises(ValueError, match="version"):
        weights_from_bytes(blob[:8] + b"\x02\x00" + blob[10:])


def test_derive_seed_streams():
    assert derive_seed(1, "a", 2) == derive_seed(1, "a", 2)
    assert derive_seed(1, "a", 2) != derive_seed(1, "a", 3)
    assert derive_seed(1, "a") != derive_seed(2, "a")
    assert make_rng(3, "x").random() == make_rng(3, "x").random()


def test_mlp_spec_validation():
    with pytest.raises(ValueError):
        MlpSpec((3,))
    with pytest.raises(ValueError):
        MlpSpec((3, 0, 2))
    with pytest.raises(ValueError):
        MlpSpec((3, 4, 2), (True, True))
