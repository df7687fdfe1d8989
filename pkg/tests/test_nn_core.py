import math

import numpy as np
import pytest

from termcast import config
from termcast.errors import ConfigError, ContractError, NumericsError, ShapeError
from termcast.gradcheck import run_suite, suite_passed
from termcast.nn_core import (
    Adam,
    AttentionParams,
    DenseParams,
    Parameter,
    Tape,
    Tensor,
    conv2d,
    dense,
    layer_norm,
    mlp,
    mul,
    multi_head_self_attention,
    positional_encoding,
    relu,
    seeded_init,
    softmax,
    tsum,
)


def _identity_attention(d):
    eye = lambda: DenseParams(Parameter(np.eye(d)), Parameter(np.zeros(d)))
    return AttentionParams(eye(), eye(), eye(), eye())


# ============= Convolution and Dense =============

def test_conv2d_delta_kernel_is_identity():
    x = np.random.default_rng(0).normal(size=(1, 5, 4))
    kernel = np.zeros((1, 1, 3, 3))
    kernel[0, 0, 1, 1] = 1.0
    out = conv2d(Tensor(x), Tensor(kernel), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_ones_kernel_counts_neighbours():
    out = conv2d(Tensor(np.ones((1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1))).data[0]
    assert out[2, 2] == 9
    assert out[0, 0] == out[4, 4] == 4
    assert out[0, 2] == 6


def test_conv2d_zero_kernel():
    out = conv2d(Tensor(np.ones((2, 3, 3))), Tensor(np.zeros((4, 2, 3, 3))), Tensor(np.zeros(4)))
    assert out.shape == (4, 3, 3)
    assert not out.data.any()


def test_conv2d_batched_matches_unbatched():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 2, 4, 5))
    k, b = Tensor(rng.normal(size=(3, 2, 3, 3))), Tensor(rng.normal(size=3))
    batched = conv2d(Tensor(x), k, b).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], conv2d(Tensor(x[i]), k, b).data, atol=1e-12)


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.ones((3, 4, 4))), Tensor(np.ones((1, 2, 3, 3))), Tensor(np.zeros(1)))


def test_dense_examples():
    out = dense(Tensor([1.0, 1.0]), Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([0.0, 0.0]))
    np.testing.assert_array_equal(out.data, [3.0, 7.0])
    x = np.array([0.3, -1.2, 2.0])
    np.testing.assert_array_equal(dense(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)
    np.testing.assert_array_equal(dense(Tensor(x), Tensor(np.zeros((2, 3))), Tensor([5.0, -1.0])).data, [5.0, -1.0])


def test_dense_shape_mismatch():
    with pytest.raises(ShapeError):
        dense(Tensor(np.ones(3)), Tensor(np.ones((2, 4))), Tensor(np.zeros(2)))


def test_mlp_has_no_final_activation():
    layer = DenseParams(Parameter(np.eye(2)), Parameter(np.zeros(2)))
    out = mlp(Tensor([-1.0, 2.0]), [layer, DenseParams(Parameter(-np.eye(2)), Parameter(np.zeros(2)))])
    np.testing.assert_array_equal(out.data, [0.0, -2.0])


# ============= Activations and Normalization =============

def test_softmax_examples():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)
    np.testing.assert_allclose(softmax(Tensor([math.log(2.0), 0.0, 0.0])).data, [0.5, 0.25, 0.25])


def test_softmax_shift_invariance_and_simplex():
    rng = np.random.default_rng(2)
    for _ in range(20):
        x = rng.normal(size=(3, 5)) * 10
        out = softmax(Tensor(x), axis=-1).data
        np.testing.assert_allclose(out, softmax(Tensor(x + 123.0), axis=-1).data, atol=1e-12)
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


def test_relu():
    np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.5])).data, [0.0, 0.0, 2.5])


def test_layer_norm_examples():
    ones, zeros = Tensor(np.ones(2)), Tensor(np.zeros(2))
    np.testing.assert_array_equal(layer_norm(Tensor([4.0, 4.0]), ones, zeros).data, [0.0, 0.0])
    np.testing.assert_allclose(layer_norm(Tensor([1.0, -1.0]), ones, zeros).data, [1.0, -1.0], atol=1e-5)
    shift = Tensor([0.5, -2.0])
    np.testing.assert_array_equal(layer_norm(Tensor([3.0, 1.0]), zeros, shift).data, shift.data)


# ============= Attention and Positions =============

def test_attention_single_position():
    rng = np.random.default_rng(3)
    d = 4
    params = AttentionParams(*(DenseParams(Parameter(rng.normal(size=(d, d))), Parameter(rng.normal(size=d)))
                               for _ in range(4)))
    seq = Tensor(rng.normal(size=(1, d)))
    out, weights = multi_head_self_attention(seq, params, heads=2, return_weights=True)
    np.testing.assert_allclose(weights.data, 1.0)
    value = dense(seq, params.wv.weight, params.wv.bias)
    expected = dense(value, params.wo.weight, params.wo.bias)
    np.testing.assert_allclose(out.data, expected.data, atol=1e-12)


def test_attention_identical_rows_uniform_weights():
    seq = Tensor(np.tile(np.array([[0.3, -0.1, 0.7, 0.2]]), (5, 1)))
    out, weights = multi_head_self_attention(seq, _identity_attention(4), heads=2, return_weights=True)
    np.testing.assert_allclose(weights.data, 0.2, atol=1e-12)
    np.testing.assert_allclose(out.data, np.tile(out.data[:1], (5, 1)), atol=1e-12)


def test_attention_rows_sum_to_one_and_shape():
    rng = np.random.default_rng(4)
    seq = Tensor(rng.normal(size=(2, 6, 8)))
    params = AttentionParams(*(DenseParams(Parameter(rng.normal(size=(8, 8))), Parameter(np.zeros(8)))
                               for _ in range(4)))
    out, weights = multi_head_self_attention(seq, params, heads=4, return_weights=True)
    assert out.shape == seq.shape
    np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-6)


def test_attention_indivisible_heads():
    with pytest.raises(ConfigError):
        multi_head_self_attention(Tensor(np.ones((3, 6))), _identity_attention(6), heads=4)


def test_positional_encoding_examples():
    pe = positional_encoding([0, 1, 1, 37], 8).data
    np.testing.assert_array_equal(pe[0], [0, 1, 0, 1, 0, 1, 0, 1])
    assert pe[1, 0] == pytest.approx(0.841471, abs=1e-6)
    np.testing.assert_array_equal(pe[1], pe[2])
    assert np.all(np.abs(pe) <= 1.0)


def test_positional_encoding_odd_width():
    with pytest.raises(ConfigError):
        positional_encoding([0, 1], 7)


# ============= Autodiff and Optimization =============

def test_sum_of_squares_gradient():
    x = Parameter([1.0, -2.0, 3.5])
    with Tape() as tape:
        loss = tsum(mul(x, x))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, 2.0 * x.data)


def test_backward_requires_scalar():
    x = Parameter([1.0, 2.0])
    with Tape() as tape:
        out = mul(x, 3.0)
    with pytest.raises(ContractError):
        tape.backward(out)


def test_ops_outside_a_tape_are_not_recorded():
    x = Parameter([1.0, 2.0])
    assert not mul(x, 2.0).requires_grad
    with Tape() as tape:
        y = mul(x, 2.0)
    assert y.requires_grad and len(tape) == 1


def test_non_finite_values_trip(monkeypatch):
    monkeypatch.setattr(config, "CHECK_FINITE", True)
    with np.errstate(divide="ignore"), pytest.raises(NumericsError):
        Tensor([1.0]) / Tensor([0.0])


def test_adam_zero_gradient_keeps_parameters():
    p = Parameter(np.array([0.5, -1.5]))
    optimizer = Adam({"p": p})
    for _ in range(3):
        optimizer.zero_grad()
        optimizer.step()
    np.testing.assert_array_equal(p.data, [0.5, -1.5])


def test_adam_first_step_moves_by_lr():
    p = Parameter(np.array([1.0, 1.0]))
    p.grad = np.array([4.0, -0.5])
    Adam({"p": p}, lr=0.01).step()
    np.testing.assert_allclose(p.data, [0.99, 1.01], atol=1e-8)


def test_adam_skips_frozen_parameters():
    p = Parameter(np.ones(2), trainable=False)
    p.grad = np.ones(2)
    Adam({"p": p}).step()
    np.testing.assert_array_equal(p.data, np.ones(2))


def test_seeded_init():
    a = seeded_init((4, 3, 3, 3), "uniform-fan-in", 5)
    np.testing.assert_array_equal(a, seeded_init((4, 3, 3, 3), "uniform-fan-in", 5))
    assert np.abs(a).max() <= 1.0 / math.sqrt(27)
    assert not seeded_init((3, 2), "zeros", 1).any()
    with pytest.raises(ConfigError):
        seeded_init((2,), "normal", 0)


def test_seeded_init_mean_is_centered():
    draws = seeded_init((1000, 1000), "uniform-fan-in", 9)
    bound = 1.0 / math.sqrt(1000)
    sigma = bound / math.sqrt(3.0 * draws.size)
    assert abs(draws.mean()) < 3 * sigma


# ============= Finite Differences =============

@pytest.mark.parametrize("name", ["conv2d", "dense", "relu", "softmax", "layer_norm", "attention"])
def test_layer_gradients_match_finite_differences(name):
    results = run_suite(seeds=(0, 1), names=[name], include_end_to_end=False)
    assert suite_passed(results), [r for r in results if not r.passed]


@pytest.mark.slow
def test_full_gradient_suite():
    assert suite_passed(run_suite())
