"""Forward values against loop oracles, gradients against finite differences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from flowagg import tensor as T
from flowagg.tensor import (
    MlpParams,
    NormActParams,
    NumericalError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    backward,
    finite_diff_grad,
    tensor,
)


def test_matmul_matches_loop_oracle():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(4, 5))
    b = rng.normal(size=(5, 3))
    got = T.matmul(tensor(a), tensor(b)).data
    np.testing.assert_allclose(got, oracles.matmul_loops(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(tensor(np.zeros((2, 3))), tensor(np.zeros((4, 2))))


def test_softmax_small_row():
    got = T.softmax_rows(tensor([[1.0, 2.0, 3.0]])).data
    want = oracles.softmax_rows_direct([[1.0, 2.0, 3.0]])
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)
    assert got.sum() == pytest.approx(1.0, abs=1e-12)


def test_softmax_extreme_logits_stay_finite():
    logits = np.array([[1e3, -1e3, 0.0], [5e2, 5e2, 5e2]])
    out = T.softmax_rows(tensor(logits)).data
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out.sum(axis=1), [1.0, 1.0], atol=1e-12)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_softmax_rows_stochastic(seed):
    rng = np.random.default_rng(seed)
    m = rng.normal(scale=5.0, size=(3, 4))
    out = T.softmax_rows(tensor(m)).data
    assert (out >= 0.0).all()
    np.testing.assert_allclose(out.sum(axis=1), np.ones(3), atol=1e-12)


def test_mlp_matches_loop_oracle():
    rng = np.random.default_rng(1)
    layers = [(rng.normal(size=(4, 6)), rng.normal(size=6)),
              (rng.normal(size=(6, 2)), rng.normal(size=2))]
    p = MlpParams([(tensor(w, trainable=True), tensor(b, trainable=True))
                   for w, b in layers])
    x = rng.normal(size=(5, 4))
    got = T.mlp_forward(p, tensor(x)).data
    np.testing.assert_allclose(got, oracles.mlp_loops(layers, x), rtol=0, atol=1e-12)


def _identity_head(d):
    return NormActParams(
        weight=tensor(np.eye(d), trainable=True),
        bias=tensor(np.zeros(d), trainable=True),
        gain=tensor(np.ones(d), trainable=True),
        shift=tensor(np.zeros(d), trainable=True),
    )


def test_norm_head_two_point_column():
    # Standardizing [-1, 1] gives +-1 up to the epsilon in the
    # denominator; ReLU then clips the negative side to exactly zero.
    out = T.norm_act_head(_identity_head(1), tensor([[-1.0], [1.0]])).data
    assert out[0, 0] == 0.0
    assert out[1, 0] == pytest.approx(1.0, abs=1e-4)


def test_norm_head_constant_column_standardizes_to_zero():
    p = _identity_head(2)
    p.shift = tensor(np.array([0.3, -0.2]), trainable=True)
    x = np.tile([[2.0, -7.0]], (5, 1))
    out = T.norm_act_head(p, tensor(x)).data
    np.testing.assert_allclose(out[:, 0], 0.3, atol=1e-15)
    np.testing.assert_allclose(out[:, 1], 0.0, atol=0)


def test_norm_head_mean_tracks_shift_when_relu_inactive():
    rng = np.random.default_rng(2)
    p = _identity_head(3)
    p.shift = tensor(np.full(3, 5.0), trainable=True)
    out = T.norm_act_head(p, tensor(rng.normal(size=(40, 3)))).data
    assert (out > 0.0).all()
    np.testing.assert_allclose(out.mean(axis=0), 5.0, atol=1e-9)


def test_norm_head_matches_loop_oracle():
    rng = np.random.default_rng(3)
    w, b = rng.normal(size=(4, 4)), rng.normal(size=4)
    g, s = rng.normal(size=4), rng.normal(size=4)
    p = NormActParams(weight=tensor(w, trainable=True), bias=tensor(b, trainable=True),
                      gain=tensor(g, trainable=True), shift=tensor(s, trainable=True))
    x = rng.normal(size=(7, 4))
    got = T.norm_act_head(p, tensor(x)).data
    np.testing.assert_allclose(got, oracles.norm_head_loops(w, b, g, s, x),
                               rtol=0, atol=1e-12)


def test_norm_head_rejects_single_row():
    with pytest.raises(ShapeError):
        T.norm_act_head(_identity_head(2), tensor([[1.0, 2.0]]))


def _grad_of(build, params):
    """Analytic gradient of a scalar-valued builder for each param array."""
    tensors = [tensor(p, trainable=True) for p in params]
    with Tape() as tape:
        out = build(*tensors)
    grads = backward(tape, out)
    return [grads.wrt(t) for t in tensors]


def _numeric(build, params, i):
    def f(x):
        args = [np.array(p) for p in params]
        args[i] = x
        return float(build(*[tensor(a) for a in args]).data)
    return finite_diff_grad(f, np.array(params[i]))


def _assert_grads_match(build, *params):
    analytic = _grad_of(build, params)
    for i in range(len(params)):
        numeric = _numeric(build, params, i)
        np.testing.assert_allclose(analytic[i], numeric, rtol=1e-6, atol=1e-7)


def test_grad_elementwise_chain():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4)) + 3.0  # keep the divisor away from zero
    _assert_grads_match(
        lambda ta, tb: T.reduce_sum(T.div(T.mul(T.add(ta, tb), T.sub(ta, tb)), tb)),
        a, b)


def test_grad_broadcast_row_bias():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=4)
    _assert_grads_match(lambda ta, tb: T.reduce_sum(T.mul(T.add(ta, tb), T.add(ta, tb))),
                        a, b)


def test_grad_unary_ops():
    rng = np.random.default_rng(6)
    x = np.abs(rng.normal(size=(3, 3))) + 0.5
    _assert_grads_match(lambda t: T.reduce_sum(T.sqrt(t)), x)
    _assert_grads_match(lambda t: T.reduce_sum(T.softplus(T.neg(t))), x)
    _assert_grads_match(lambda t: T.reduce_sum(T.relu(T.add_const(t, -1.0))), x)
    _assert_grads_match(lambda t: T.reduce_sum(T.scale(t, -2.5)), x)


def test_grad_matmul_and_transpose():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    _assert_grads_match(
        lambda ta, tb: T.reduce_sum(T.matmul(ta, tb)), a, b)
    _assert_grads_match(
        lambda ta: T.reduce_sum(T.matmul(T.transpose2(ta), ta)), a)


def test_grad_reduce_and_reshape():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(2, 6))
    _assert_grads_match(
        lambda t: T.reduce_sum(T.mul(T.reduce_sum(t, axis=0, keepdims=True),
                                     T.reduce_sum(t, axis=0, keepdims=True))), x)
    _assert_grads_match(
        lambda t: T.reduce_sum(T.mul(T.reshape(t, (3, 4)), T.reshape(t, (3, 4)))), x)
    _assert_grads_match(
        lambda t: T.reduce_sum(T.mul(T.reduce_sum(t, axis=1), T.reduce_sum(t, axis=1))), x)


def test_grad_reduce_sum_3d_axis():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(12,))
    _assert_grads_match(
        lambda t: T.reduce_sum(
            T.mul(T.reduce_sum(T.reshape(t, (2, 3, 2)), axis=1),
                  T.reduce_sum(T.reshape(t, (2, 3, 2)), axis=1))), x)


def test_grad_concat_and_gather():
    rng = np.random.default_rng(10)
    a = rng.normal(size=(3, 2))
    b = rng.normal(size=(3, 3))
    _assert_grads_match(
        lambda ta, tb: T.reduce_sum(T.mul(T.concat_cols([ta, tb]),
                                          T.concat_cols([ta, tb]))), a, b)
    idx = np.array([0, 0, 2, 1])
    _assert_grads_match(
        lambda ta: T.reduce_sum(T.mul(T.gather_rows(ta, idx), T.gather_rows(ta, idx))), a)


def test_gather_rows_duplicate_index_accumulates():
    v = tensor(np.arange(6.0).reshape(3, 2), trainable=True)
    with Tape() as tape:
        out = T.reduce_sum(T.gather_rows(v, np.array([0, 0, 1])))
    g = backward(tape, out).wrt(v)
    np.testing.assert_array_equal(g, [[2.0, 2.0], [1.0, 1.0], [0.0, 0.0]])


def test_grad_softmax_rows():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 4))
    _assert_grads_match(
        lambda t: T.reduce_sum(T.mul(T.softmax_rows(t), tensor(w))), x)


def test_grad_norm_head_full():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(6, 3))
    w, b = rng.normal(size=(3, 3)), rng.normal(size=3)
    g, s = rng.normal(size=3), rng.normal(size=3)

    def build(tx, tw, tb, tg, ts):
        p = NormActParams(weight=tw, bias=tb, gain=tg, shift=ts)
        return T.reduce_sum(T.norm_act_head(p, tx))

    _assert_grads_match(build, x, w, b, g, s)


def test_grad_mlp_forward():
    rng = np.random.default_rng(13)
    x = rng.normal(size=(5, 3))
    w0, b0 = rng.normal(size=(3, 4)), rng.normal(size=4)
    w1, b1 = rng.normal(size=(4, 1)), rng.normal(size=1)

    def build(tx, tw0, tb0, tw1, tb1):
        p = MlpParams([(tw0, tb0), (tw1, tb1)])
        return T.reduce_sum(T.mlp_forward(p, tx))

    _assert_grads_match(build, x, w0, b0, w1, b1)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_grad_random_composite(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(2, 3))
    b = rng.normal(size=(3, 2))
    _assert_grads_match(
        lambda ta, tb: T.reduce_sum(T.softmax_rows(T.matmul(ta, tb))), a, b)


def test_shared_input_gradients_accumulate():
    x = tensor(np.array([2.0, 3.0]), trainable=True)
    with Tape() as tape:
        out = T.reduce_sum(T.add(x, x))
    np.testing.assert_array_equal(backward(tape, out).wrt(x), [2.0, 2.0])


def test_unreachable_tensor_gets_zero_gradient():
    x = tensor(np.ones((2, 2)), trainable=True)
    y = tensor(np.ones((2, 2)), trainable=True)
    with Tape() as tape:
        out = T.reduce_sum(x)
    np.testing.assert_array_equal(backward(tape, out).wrt(y), np.zeros((2, 2)))


def test_backward_rejects_nonscalar_and_foreign_targets():
    x = tensor(np.ones((2, 2)))
    with Tape() as tape:
        y = T.add(x, x)
    with pytest.raises(TapeError):
        backward(tape, y)
    with Tape() as other:
        z = T.reduce_sum(x)
    with pytest.raises(TapeError):
        backward(tape, z)


def test_ops_work_without_a_tape():
    out = T.reduce_sum(T.mul(tensor([1.0, 2.0]), tensor([3.0, 4.0])))
    assert float(out.data) == 11.0


def test_replay_reproduces_outputs_bitwise():
    rng = np.random.default_rng(14)
    a = tensor(rng.normal(size=(4, 4)), trainable=True)
    with Tape() as tape:
        out = T.reduce_sum(T.softmax_rows(T.matmul(a, T.transpose2(a))))
    before = out.data.tobytes()
    tape.replay()
    assert out.data.tobytes() == before


def test_tensor_factory_rejects_nonfinite():
    with pytest.raises(ValueError):
        tensor([1.0, float("nan")])
    with pytest.raises(ValueError):
        tensor([float("inf")])


def test_finite_diff_grad_quadratic():
    x = np.array([1.0, -2.0, 0.5])
    got = finite_diff_grad(lambda v: float((v * v).sum()), x)
    np.testing.assert_allclose(got, 2 * x, atol=1e-8)


@pytest.mark.filterwarnings("ignore:invalid value encountered")
def test_finite_diff_grad_flags_nonfinite_probe():
    with pytest.raises(NumericalError):
        finite_diff_grad(lambda v: float(np.log(v).sum()), np.array([1e-6, 1.0]))


def test_mlp_params_validates_chain():
    w0 = tensor(np.zeros((3, 4)), trainable=True)
    b_bad = tensor(np.zeros(5), trainable=True)
    with pytest.raises(ShapeError):
        MlpParams([(w0, b_bad)])
