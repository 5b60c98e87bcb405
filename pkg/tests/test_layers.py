import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from speaker_naming.exceptions import ConsistencyError, DimensionError, LabelError
from speaker_naming.gradcheck import (REDUCED_FUSED, check_conv_block, check_dense,
                                      check_network, check_softmax_ce)
from speaker_naming.layers import (BIAS_INIT, Adam, ConvBlockParams, DenseParams,
                                   ModelParams, MomentumSGD, NetSpec, avg_pool2,
                                   backward_pass, conv_block_backward, conv_block_forward,
                                   cross_entropy, dense_forward, forward, init_params,
                                   init_weights, one_hot, sgd_step, softmax)


def conv_block_oracle(x, kernels, bias):
    """Loop-by-loop valid correlation, rectifier, 2x2 mean pool, rectifier."""
    c_in, h, w = x.shape
    maps, _, kh, kw = kernels.shape
    ho, wo = h - kh + 1, w - kw + 1
    act = np.zeros((maps, ho, wo))
    for m in range(maps):
        for i in range(ho):
            for j in range(wo):
                act[m, i, j] = np.sum(x[:, i:i + kh, j:j + kw] * kernels[m]) + bias[m]
    act = np.maximum(act, 0.0)
    hp, wp = ho // 2, wo // 2
    pooled = np.zeros((maps, hp, wp))
    for m in range(maps):
        for i in range(hp):
            for j in range(wp):
                pooled[m, i, j] = act[m, 2 * i:2 * i + 2, 2 * j:2 * j + 2].mean()
    return np.maximum(pooled, 0.0)


def test_conv_block_matches_loop_oracle():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 9, 8))
    p = ConvBlockParams(rng.normal(size=(4, 3, 3, 2)), rng.normal(size=4))
    np.testing.assert_allclose(conv_block_forward(x, p),
                               conv_block_oracle(x, p.kernels, p.bias), atol=1e-12)


def test_conv_identity_kernel_is_rectified_pool():
    x = np.random.default_rng(1).normal(size=(1, 6, 6))
    p = ConvBlockParams(np.ones((1, 1, 1, 1)), np.zeros(1))
    np.testing.assert_allclose(conv_block_forward(x, p),
                               avg_pool2(np.maximum(x, 0.0)), atol=1e-15)


def test_conv_batch_equals_single():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 2, 7, 7))
    p = ConvBlockParams(rng.normal(size=(2, 2, 2, 2)), rng.normal(size=2))
    batched = conv_block_forward(x, p)
    for i in range(3):
        np.testing.assert_allclose(batched[i], conv_block_forward(x[i], p), atol=1e-13)


def test_first_block_shape_and_nonnegative():
    rng = np.random.default_rng(3)
    p = ConvBlockParams(rng.normal(size=(48, 3, 15, 15)) * 0.01, np.full(48, 0.01))
    y = conv_block_forward(rng.random((3, 50, 40)), p)
    assert y.shape == (48, 18, 13)
    assert np.all(y >= 0)


def test_conv_rejects_bad_input_rank():
    p = ConvBlockParams(np.ones((1, 1, 1, 1)), np.zeros(1))
    with pytest.raises(DimensionError):
        conv_block_forward(np.ones((4, 4)), p)


def test_dense_matches_oracle_and_identity():
    rng = np.random.default_rng(4)
    f = rng.normal(size=6)
    p = DenseParams(rng.normal(size=(6, 3)), rng.normal(size=3))
    expected = [max(0.0, sum(f[i] * p.weights[i, j] for i in range(6)) + p.bias[j])
                for j in range(3)]
    np.testing.assert_allclose(dense_forward(f, p), expected, atol=1e-12)
    ident = DenseParams(np.eye(6), np.zeros(6))
    np.testing.assert_array_equal(dense_forward(f, ident, apply_nonlinearity=False), f)


def test_dense_rectifier_floor():
    p = DenseParams(np.eye(3), np.zeros(3))
    np.testing.assert_array_equal(dense_forward(np.array([-1.0, 0.0, 2.0]), p), [0, 0, 2])


def test_dense_dimension_mismatch():
    with pytest.raises(DimensionError):
        dense_forward(np.ones(4), DenseParams(np.ones((5, 2)), np.zeros(2)))


def test_softmax_known_values():
    np.testing.assert_allclose(softmax(np.array([0.0, np.log(2.0)])), [1 / 3, 2 / 3],
                               atol=1e-15)
    np.testing.assert_allclose(softmax(np.zeros(4)), 0.25, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
def test_softmax_sums_to_one_and_shift_invariant(seed, c):
    z = np.random.default_rng(seed).normal(scale=10, size=7)
    p = softmax(z)
    assert abs(p.sum() - 1.0) < 1e-12
    np.testing.assert_allclose(softmax(z + c), p, atol=1e-12)


def test_softmax_large_logits_stay_finite():
    p = softmax(np.array([1000.0, 999.0]))
    assert np.all(np.isfinite(p))


def test_cross_entropy_known_values():
    assert cross_entropy(np.array([0.0, 1.0, 0.0]), np.array([0.0, 1.0, 0.0])) == 0.0
    assert cross_entropy(np.full(6, 1 / 6), one_hot([2], 6)[0]) == pytest.approx(np.log(6))
    capped = cross_entropy(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    assert capped == pytest.approx(-np.log(1e-12))


def test_cross_entropy_rejects_soft_targets():
    with pytest.raises(LabelError):
        cross_entropy(np.array([0.5, 0.5]), np.array([0.5, 0.5]))
    with pytest.raises(LabelError):
        one_hot([3], 3)


def test_init_biases_and_bounds():
    spec = NetSpec((1, 10, 8), ((2, 3, 3),), (8, 12), n_classes=3, audio_dim=5)
    params = init_params(spec, seed=0)
    for block in params.conv_blocks:
        np.testing.assert_array_equal(block.bias, BIAS_INIT)
        assert np.abs(block.kernels).max() <= 1.0 / 9
    for block in params.dense_blocks:
        np.testing.assert_array_equal(block.bias, BIAS_INIT)
        assert np.abs(block.weights).max() <= 1.0 / block.weights.shape[0]


def test_init_fan_in_power_and_modes():
    rng = np.random.default_rng(0)
    w = init_weights(rng, (1000,), 100, fan_in_power=0.5)
    assert np.abs(w).max() <= 0.1
    u = init_weights(rng, (1000,), 4, mode="uniform")
    assert np.abs(u).max() <= 0.25
    with pytest.raises(ValueError):
        init_weights(rng, (2,), 1, mode="laplace")


def test_init_deterministic():
    a = init_params(REDUCED_FUSED, seed=7)
    b = init_params(REDUCED_FUSED, seed=7)
    for (_, x), (_, y) in zip(a.named_arrays(), b.named_arrays()):
        assert np.array_equal(x, y)


def test_hidden_widths_must_increase():
    with pytest.raises(DimensionError):
        NetSpec((1, 10, 8), ((2, 3, 3),), (12, 8), n_classes=3)
    with pytest.raises(DimensionError):
        NetSpec((1, 4, 4), ((2, 5, 5),), (8,), n_classes=3)


def test_sgd_step_worked_example():
    params = ModelParams(["dense1"], [DenseParams(np.ones((1, 1)), np.ones(1))])
    grads = ModelParams(["dense1"], [DenseParams(np.full((1, 1), 0.5), np.full(1, 0.5))])
    out = sgd_step(params, grads, 0.1)
    np.testing.assert_allclose(out.dense_blocks[0].weights, 0.95, atol=1e-15)
    zero = grads.map(np.zeros_like)
    assert np.array_equal(sgd_step(params, zero, 0.1).dense_blocks[0].weights, [[1.0]])
    assert np.array_equal(sgd_step(params, grads, 0.0).dense_blocks[0].bias, [1.0])


def test_momentum_zero_matches_sgd_and_adam_moves_against_gradient():
    params = init_params(REDUCED_FUSED, seed=1)
    grads = params.map(lambda a: np.full_like(a, 0.3))
    plain = sgd_step(params, grads, 0.05)
    mom = MomentumSGD(lr=0.05).step(params, grads)
    for (_, x), (_, y) in zip(plain.named_arrays(), mom.named_arrays()):
        np.testing.assert_allclose(x, y, atol=1e-15)
    # first Adam step moves every entry by lr against the gradient, up to eps
    stepped = Adam(lr=1e-3).step(params, grads)
    for (_, x), (_, y) in zip(params.named_arrays(), stepped.named_arrays()):
        np.testing.assert_allclose(x - y, 1e-3, rtol=1e-5)


def test_gradient_checks_pass_for_every_component():
    for seed in range(3):
        for check in (check_conv_block, check_dense, check_softmax_ce, check_network):
            for key, err in check(seed).items():
                assert err < 1e-4, (seed, key, err)


def test_conv_backward_dead_rectifier_gives_zero_gradient():
    x = np.random.default_rng(5).random((1, 4, 4))
    p = ConvBlockParams(np.ones((1, 1, 2, 2)), np.full(1, -100.0))
    dx, g = conv_block_backward(np.ones((1, 1, 1)), x, p)
    assert np.all(dx == 0) and np.all(g.kernels == 0) and np.all(g.bias == 0)


def test_pre_softmax_gradient_is_p_minus_t():
    rng = np.random.default_rng(6)
    spec = NetSpec((1, 6, 6), ((2, 3, 3),), (4,), n_classes=3)
    params = init_params(spec, seed=0)
    images = rng.random((5, 1, 6, 6))
    t = one_hot(rng.integers(3, size=5), 3)
    probs, trace = forward(params, images)
    grads, _ = backward_pass(params, trace, t)
    h = trace.dense_inputs[-1]
    np.testing.assert_allclose(grads.dense_blocks[-1].weights, h.T @ (probs - t) / 5,
                               atol=1e-12)


def test_backward_rejects_foreign_trace():
    params = init_params(REDUCED_FUSED, seed=0)
    other = init_params(REDUCED_FUSED, seed=1)
    rng = np.random.default_rng(0)
    _, trace = forward(params, rng.random((1, 1, 10, 8)), rng.normal(size=(1, 5)))
    with pytest.raises(ConsistencyError):
        backward_pass(other, trace, one_hot([0], 3))
