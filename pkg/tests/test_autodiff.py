import struct
import threading

import numpy as np
import pytest

from src import autodiff as ad
from src.errors import CheckpointError, GraphError, NonFiniteError, ShapeMismatchError

from .gradcheck import check_gradients

SEEDS = range(20)
TOLERANCE = 1e-4


# ----------------------------
# Forward examples
# ----------------------------
def test_conv2d_hand_example():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    k = np.array([[[[1.0, 0.0], [0.0, 1.0]]]])
    out = ad.conv2d(x, k, np.zeros(1))
    np.testing.assert_array_equal(out.data, [[[[5.0]]]])


def test_conv2d_identity_kernel(rng):
    x = rng.standard_normal((2, 3, 5, 4))
    k = np.zeros((3, 3, 1, 1))
    k[np.arange(3), np.arange(3)] = 1.0
    np.testing.assert_array_equal(ad.conv2d(x, k, np.zeros(3)).data, x)


def test_conv2d_encoder_shape():
    out = ad.conv2d(np.zeros((1, 4, 512, 121)), np.zeros((16, 4, 4, 3)), np.zeros(16), (2, 2), (1, 1))
    assert out.shape == (1, 16, 256, 61)


def test_conv2d_shape_errors():
    with pytest.raises(ShapeMismatchError):
        ad.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 2, 2)), np.zeros(1))
    with pytest.raises(ShapeMismatchError):
        ad.conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 5, 5)), np.zeros(1))


def test_conv_transpose_sizes():
    out = ad.conv_transpose2d(np.zeros((1, 64, 8, 2)), np.zeros((64, 32, 4, 3)), np.zeros(32), (2, 2), (1, 1), (0, 1))
    assert out.shape == (1, 32, 16, 4)
    with pytest.raises(ShapeMismatchError):
        ad.conv_transpose2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)), np.zeros(1), (2, 2), (0, 0), (2, 0))


def test_conv_transpose_is_adjoint_of_conv(rng):
    """<conv(x), y> == <x, conv_transpose(y)> with the same kernel"""
    x = rng.standard_normal((2, 3, 9, 7))
    k = rng.standard_normal((4, 3, 4, 3))
    y_shape = ad.conv2d(x, k, np.zeros(4), (2, 2), (1, 1)).shape
    y = rng.standard_normal(y_shape)
    op = (9 - ad.conv_transpose_output_size(y_shape[2], 4, 2, 1, 0), 7 - ad.conv_transpose_output_size(y_shape[3], 3, 2, 1, 0))
    back = ad.conv_transpose2d(y, k, np.zeros(3), (2, 2), (1, 1), op)
    lhs = np.sum(ad.conv2d(x, k, np.zeros(4), (2, 2), (1, 1)).data * y)
    assert lhs == pytest.approx(np.sum(x * back.data), rel=1e-10)


def test_selu_values():
    out = ad.selu(np.array([-1.0, 0.0, 2.0])).data
    assert out[0] == pytest.approx(ad.SELU_LAMBDA * ad.SELU_ALPHA * (np.exp(-1.0) - 1.0))
    assert out[1] == 0.0
    assert out[2] == pytest.approx(2 * ad.SELU_LAMBDA)


def test_softmax_rows_sum_to_one(rng):
    out = ad.softmax(rng.standard_normal((4, 6)) * 50, axis=1).data
    np.testing.assert_allclose(out.sum(axis=1), 1.0)


def test_batch_norm_train_and_eval(rng):
    x = rng.standard_normal((4, 3, 5, 5)) * 2 + 1
    state = ad.BatchNormState.fresh(3)
    out = ad.batch_norm2d(x, np.ones(3), np.zeros(3), state, training=True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, rtol=1e-3)
    assert np.all(state.running_mean != 0)

    frozen = ad.BatchNormState(np.zeros(3), np.ones(3))
    eval_out = ad.batch_norm2d(x, np.ones(3), np.zeros(3), frozen, training=False).data
    np.testing.assert_allclose(eval_out, x / np.sqrt(1 + 1e-5))


def test_non_finite_surfaces():
    with pytest.raises(NonFiniteError):
        ad.mul(np.array([1e308]), np.array([1e308]))
    with pytest.raises(NonFiniteError):
        ad.sqrt(np.array([-1.0]))


def test_backward_needs_scalar():
    x = ad.parameter(np.ones(3))
    with pytest.raises(ShapeMismatchError):
        ad.scale(x, 2.0).backward()


def test_shared_subexpression_accumulates():
    x = ad.parameter(np.array([3.0]))
    y = ad.mul(x, x)
    ad.sum(ad.add(y, y)).backward()
    np.testing.assert_allclose(x.grad, [12.0])


def test_no_grad_records_nothing():
    x = ad.parameter(np.ones(2))
    with ad.no_grad():
        y = ad.scale(x, 2.0)
    assert y.node is None and not y.requires_grad
    with pytest.raises(GraphError):
        ad.sum(y).backward()


def test_no_grad_is_per_thread():
    a_entered, b_entered, a_exited = threading.Event(), threading.Event(), threading.Event()
    seen = {}

    def first():
        with ad.no_grad():
            a_entered.set()
            b_entered.wait(5)
        a_exited.set()

    def second():
        a_entered.wait(5)
        with ad.no_grad():
            b_entered.set()
            a_exited.wait(5)
            seen["inside"] = ad.grad_enabled()
        seen["after"] = ad.grad_enabled()

    threads = [threading.Thread(target=first), threading.Thread(target=second)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()

    assert seen == {"inside": False, "after": True}
    assert ad.grad_enabled()
    x = ad.parameter(np.array([2.0]))
    ad.sum(ad.square(x)).backward()
    np.testing.assert_allclose(x.grad, [4.0])


def test_l2_norm_zero_gradient():
    x = ad.parameter(np.zeros(4))
    ad.l2_norm(x).backward()
    np.testing.assert_array_equal(x.grad, np.zeros(4))


# ----------------------------
# Gradient checks
# ----------------------------
@pytest.mark.parametrize("seed", SEEDS)
def test_grad_elementwise(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    assert check_gradients(ad.add, [a, b], seed) <= TOLERANCE
    assert check_gradients(ad.sub, [a, b], seed) <= TOLERANCE
    assert check_gradients(ad.mul, [a, b], seed) <= TOLERANCE
    assert check_gradients(lambda x: ad.scale(x, -1.7), [a], seed) <= TOLERANCE
    assert check_gradients(ad.square, [a], seed) <= TOLERANCE
    assert check_gradients(ad.abs, [a], seed) <= TOLERANCE
    assert check_gradients(ad.sqrt, [np.abs(a) + 0.5], seed) <= TOLERANCE


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_shape_ops(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((2, 3, 4))
    b = rng.standard_normal((2, 2, 4))
    assert check_gradients(lambda x: ad.reshape(x, (6, 4)), [a], seed) <= TOLERANCE
    assert check_gradients(lambda x: ad.transpose(x, (2, 0, 1)), [a], seed) <= TOLERANCE
    assert check_gradients(lambda x, y: ad.concat([x, y], axis=1), [a, b], seed) <= TOLERANCE
    assert check_gradients(lambda x: ad.slice_axis(x, 1, 1, 3), [a], seed) <= TOLERANCE
    idx = rng.integers(0, a.size, size=(5, 3))
    assert check_gradients(lambda x: ad.take(x, idx), [a], seed) <= TOLERANCE
    scatter_idx = rng.integers(0, 7, size=(3, 4))
    assert check_gradients(lambda x: ad.scatter_add(x, scatter_idx, 7), [a[0]], seed) <= TOLERANCE


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_reductions_and_activations(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((3, 5))
    assert check_gradients(lambda x: ad.sum(x, axis=1), [a], seed) <= TOLERANCE
    assert check_gradients(lambda x: ad.sum(x, axis=0, keepdims=True), [a], seed) <= TOLERANCE
    assert check_gradients(ad.mean, [a], seed) <= TOLERANCE
    assert check_gradients(ad.l2_norm, [a], seed) <= TOLERANCE
    assert check_gradients(lambda x: ad.softmax(x, axis=1), [a], seed) <= TOLERANCE
    assert check_gradients(ad.leaky_relu, [a], seed) <= TOLERANCE
    assert check_gradients(ad.selu, [a], seed) <= TOLERANCE
    assert check_gradients(ad.matmul, [a, rng.standard_normal((5, 2))], seed) <= TOLERANCE


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_conv2d(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 7, 6))
    k = rng.standard_normal((4, 3, 4, 3))
    b = rng.standard_normal(4)
    fn = lambda x, k, b: ad.conv2d(x, k, b, (2, 2), (1, 1))  # noqa: E731
    assert check_gradients(fn, [x, k, b], seed) <= TOLERANCE


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_conv_transpose2d(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 4, 3))
    k = rng.standard_normal((3, 2, 4, 3))
    b = rng.standard_normal(2)
    fn = lambda x, k, b: ad.conv_transpose2d(x, k, b, (2, 2), (1, 1), (1, 1))  # noqa: E731
    assert check_gradients(fn, [x, k, b], seed) <= TOLERANCE


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_batch_norm(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 2, 4, 3))
    gamma, beta = rng.standard_normal(2), rng.standard_normal(2)
    state = ad.BatchNormState.fresh(2)
    fn = lambda x, g, b: ad.batch_norm2d(x, g, b, state, training=True)  # noqa: E731
    assert check_gradients(fn, [x, gamma, beta], seed) <= TOLERANCE
    fn_eval = lambda x, g, b: ad.batch_norm2d(x, g, b, ad.BatchNormState(np.ones(2), np.full(2, 2.0)), False)  # noqa: E731
    assert check_gradients(fn_eval, [x, gamma, beta], seed) <= TOLERANCE


# ----------------------------
# Adam
# ----------------------------
def test_adam_first_step_moves_by_lr():
    p = ad.parameter(np.array([1.0, -2.0]), "p")
    opt = ad.Adam({"p": p}, lr=0.1)
    p.grad = np.array([0.5, -3.0])
    opt.step()
    np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-6)
    assert opt.state.t == 1
    assert np.all(opt.state.v["p"] >= 0)


def test_adam_zero_lr_keeps_params():
    p = ad.parameter(np.array([1.0, 2.0]), "p")
    opt = ad.Adam({"p": p}, lr=0.0)
    for _ in range(3):
        p.grad = np.array([1.0, -1.0])
        opt.step()
    np.testing.assert_array_equal(p.data, [1.0, 2.0])


def test_adam_minimizes_quadratic():
    p = ad.parameter(np.array([5.0, -3.0]), "p")
    opt = ad.Adam({"p": p}, lr=0.1)
    for _ in range(500):
        opt.zero_grad()
        ad.sum(ad.square(p)).backward()
        opt.step()
    assert np.max(np.abs(p.data)) < 1e-2


def test_adam_shape_mismatch():
    p = ad.parameter(np.ones(3), "p")
    with pytest.raises(ShapeMismatchError):
        ad.adam_step({"p": p}, {"p": np.ones(2)}, ad.AdamState())


# ----------------------------
# RUNT1 container
# ----------------------------
def test_container_round_trip(tmp_path, rng):
    arrays = {"a": rng.standard_normal((2, 3)), "scalar": np.array(1.5), "b.c": rng.standard_normal(4)}
    path = tmp_path / "p.bin"
    ad.save_tensors(path, arrays)
    back = ad.load_tensors(path)
    assert list(back) == list(arrays)
    for name in arrays:
        np.testing.assert_array_equal(back[name], arrays[name])


def test_container_errors(rng):
    blob = ad.encode_tensors({"w": rng.standard_normal(5)})
    with pytest.raises(CheckpointError):
        ad.decode_tensors(b"XXXXX" + blob[5:])
    with pytest.raises(CheckpointError):
        ad.decode_tensors(blob[:-3])
    with pytest.raises(CheckpointError):
        ad.decode_tensors(blob + b"\0")


def test_container_corrupt_name_and_rank(rng):
    blob = bytearray(ad.encode_tensors({"w": rng.standard_normal(5)}))
    name_at = len(ad.CHECKPOINT_MAGIC) + 16
    bad_name = bytearray(blob)
    bad_name[name_at] = 0xFF
    with pytest.raises(CheckpointError):
        ad.decode_tensors(bytes(bad_name))

    bad_rank = bytearray(blob)
    bad_rank[name_at + 1:name_at + 9] = struct.pack("<Q", 2 ** 60)
    with pytest.raises(CheckpointError):
        ad.decode_tensors(bytes(bad_rank))
