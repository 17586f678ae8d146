import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from oracles import adam_by_hand, central_difference, rel_error

from astnmt.autodiff import AdamState, ShapeError, Tape, Tensor, adam_step, ops


def _rand(rng, *shape):
    return rng.standard_normal(shape)


# name -> (input shapes, function of input tensors). Outputs are projected on a
# fixed random tensor to get a scalar loss.
PRIMITIVES = {
    "matmul": ([(3, 4), (4, 2)], lambda a, b: ops.matmul(a, b)),
    "matmul_batched": ([(2, 3, 4), (2, 4, 2)], lambda a, b: ops.matmul(a, b)),
    "matmul_nd_by_2d": ([(2, 3, 4), (4, 5)], lambda a, b: ops.matmul(a, b)),
    "add_broadcast": ([(3, 4), (4,)], lambda a, b: ops.add(a, b)),
    "sub": ([(3, 4), (3, 1)], lambda a, b: ops.sub(a, b)),
    "mul_broadcast": ([(2, 3, 4), (3, 1)], lambda a, b: ops.mul(a, b)),
    "sigmoid": ([(3, 5)], ops.sigmoid),
    "tanh": ([(3, 5)], ops.tanh),
    "relu": ([(3, 5)], ops.relu),
    "clip": ([(3, 5)], lambda x: ops.clip(x, -0.5, 0.5)),
    "softmax": ([(3, 5)], lambda x: ops.softmax(x, axis=-1)),
    "softmax_masked": (
        [(2, 4)],
        lambda x: ops.softmax(x, mask=np.array([[1, 1, 0, 1], [1, 0, 0, 0]])),
    ),
    "log_softmax": ([(3, 5)], ops.log_softmax),
    "embedding": (
        [(6, 3)],
        lambda e: ops.embedding(e, np.array([[1, 5, 1], [0, 2, 2]])),
    ),
    "concat": ([(2, 3), (2, 2)], lambda a, b: ops.concat([a, b], axis=-1)),
    "stack": ([(2, 3), (2, 3)], lambda a, b: ops.stack([a, b], axis=1)),
    "slice": ([(3, 6)], lambda x: x[:, 1:4]),
    "slice_fancy": ([(4, 3)], lambda x: ops.slice_(x, np.array([0, 2, 2]))),
    "reshape": ([(2, 6)], lambda x: ops.reshape(x, (3, 4))),
    "transpose": ([(2, 3, 4)], lambda x: ops.transpose(x, (1, 2, 0))),
    "mean": ([(3, 4)], lambda x: ops.mean(x, axis=0)),
    "mean_all": ([(3, 4)], lambda x: ops.mean(x)),
    "sum": ([(3, 4)], lambda x: ops.sum_(x, axis=1, keepdims=True)),
    "layer_norm": ([(3, 5), (5,), (5,)], lambda x, g, b: ops.layer_norm(x, g, b)),
    "conv1d": ([(2, 6, 3), (3, 3, 4), (4,)], lambda x, w, b: ops.conv1d(x, w, b)),
    "max_over_time": (
        [(2, 5, 3)],
        lambda x: ops.max_over_time(x, np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]])),
    ),
    "binary_cross_entropy": (
        [(4,)],
        lambda x: ops.binary_cross_entropy(ops.sigmoid(x), np.array([1, 0, 1, 0])),
    ),
    "categorical_cross_entropy": (
        [(2, 3, 5)],
        lambda x: ops.categorical_cross_entropy(
            x, np.array([[1, 4, 0], [2, 2, 3]]), np.array([[1, 1, 0], [1, 1, 1]])
        ),
    ),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_matches_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    shapes, fn = PRIMITIVES[name]
    inputs = [Tensor(_rand(rng, *s), requires_grad=True) for s in shapes]
    probe = None

    def loss_value():
        nonlocal probe
        out = fn(*inputs)
        if probe is None:
            probe = _rand(rng, *out.shape)
        return out, ops.sum_(ops.mul(out, probe))

    with Tape() as tape:
        _, loss = loss_value()
    tape.backward(loss)
    analytic = [t.grad.copy() for t in inputs]
    numeric = central_difference(
        lambda: loss_value()[1].item(), [t.data for t in inputs]
    )
    for a, n in zip(analytic, numeric):
        assert rel_error(a, n) <= 1e-4


def test_softmax_of_zeros_is_uniform():
    np.testing.assert_allclose(ops.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 7), elements=st.floats(-50, 50)))
def test_softmax_is_a_distribution(x):
    out = ops.softmax(Tensor(x)).data
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)


def test_masked_softmax_zero_exactly():
    out = ops.softmax(Tensor([1.0, 2.0, 3.0]), mask=np.array([1, 0, 1])).data
    assert out[1] == 0.0
    assert abs(out.sum() - 1) < 1e-12


def test_layer_norm_constant_row_is_zero():
    np.testing.assert_array_equal(
        ops.layer_norm(Tensor([[2.5, 2.5, 2.5]])).data, [[0.0, 0.0, 0.0]]
    )


def test_conv_then_max_over_time_by_hand():
    # one filter of width 2 over a length-3 sequence of scalars
    x = Tensor(np.array([[[1.0], [2.0], [-1.0]]]))
    w = Tensor(np.array([[[0.5]], [[-1.0]]]))  # (W=2, C_in=1, C_out=1)
    windows = [0.5 * 1.0 - 1.0 * 2.0, 0.5 * 2.0 - 1.0 * -1.0]  # -1.5, 2.0
    out = ops.max_over_time(ops.conv1d(x, w))
    assert out.data[0, 0] == max(windows)


def test_sum_gives_all_ones_gradient():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum_(x)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_square_gradient():
    x = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        loss = x * x
    tape.backward(loss)
    assert x.grad == 6.0


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ValueError):
        tape.backward(y)


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))


def test_backward_twice_is_identical(rng):
    w = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    x = Tensor(rng.standard_normal((2, 4)))
    with Tape() as tape:
        loss = ops.sum_(ops.tanh(x @ w))
    tape.backward(loss)
    first = w.grad.copy()
    tape.backward(loss)
    np.testing.assert_array_equal(first, w.grad)


def test_no_tape_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    y = ops.tanh(x)
    assert not y.requires_grad


class TestGradReverse:
    def test_forward_identity(self):
        x = Tensor([1.5, -2.0], requires_grad=True)
        out = ops.grad_reverse(x)
        np.testing.assert_array_equal(out.data, x.data)

    def test_sum_gives_minus_ones(self):
        x = Tensor([1.5, -2.0], requires_grad=True)
        with Tape() as tape:
            loss = ops.sum_(ops.grad_reverse(x))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [-1.0, -1.0])

    def test_weighted(self):
        x = Tensor([0.3, 0.7], requires_grad=True)
        with Tape() as tape:
            loss = ops.sum_(ops.mul(np.array([2.0, 3.0]), ops.grad_reverse(x)))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [-2.0, -3.0])


class TestDropout:
    def test_rate_zero_is_identity(self, rng):
        x = Tensor(rng.standard_normal(5))
        assert ops.dropout(x, 0.0, rng).data is x.data

    def test_eval_is_identity(self, rng):
        x = Tensor(rng.standard_normal(5))
        np.testing.assert_array_equal(
            ops.dropout(x, 0.5, rng, train=False).data, x.data
        )

    def test_inverted_scaling_preserves_expectation(self):
        rng = np.random.default_rng(7)
        x = Tensor(np.array([1.0, -2.0, 0.5]))
        draws = np.stack([ops.dropout(x, 0.3, rng).data for _ in range(10_000)])
        np.testing.assert_allclose(draws.mean(axis=0), x.data, rtol=0.02)

    def test_gradient_uses_the_same_mask(self, rng):
        x = Tensor(rng.standard_normal(50), requires_grad=True)
        with Tape() as tape:
            out = ops.dropout(x, 0.5, rng)
            loss = ops.sum_(out)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad == 0, out.data == 0)


class TestAdam:
    def test_first_step_moves_by_lr(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        p.grad = np.array([1.0])
        adam_step({"p": p}, AdamState(eps=1e-8), lr=1e-3)
        assert abs(p.data[0] + 1e-3) < 1e-10

    def test_zero_grad_leaves_param(self):
        p = Tensor(np.array([0.7]), requires_grad=True)
        p.grad = np.array([0.0])
        st = AdamState()
        adam_step({"p": p}, st, lr=0.1)
        assert p.data[0] == 0.7
        assert st.t == 1

    def test_two_steps_against_hand_computation(self):
        p = Tensor(np.array([0.5]), requires_grad=True)
        st = AdamState()
        for _ in range(2):
            p.grad = np.array([1.0])
            adam_step({"p": p}, st, lr=0.1)
        assert abs(p.data[0] - adam_by_hand(0.5, [1.0, 1.0], 0.1)) < 1e-15
        assert st.t == 2

    def test_missing_grad_is_skipped_with_warning(self):
        p = Tensor(np.array([0.5]), requires_grad=True)
        st = AdamState()
        adam_step({"p": p}, st, lr=0.1)
        assert p.data[0] == 0.5
        assert st.t == 1
        assert "no gradient for p" in st.warnings[0]

    def test_state_round_trip(self):
        p = Tensor(np.array([0.5, 1.0]), requires_grad=True)
        p.grad = np.array([0.2, -0.1])
        st = adam_step({"p": p}, AdamState(), lr=0.1)
        back = AdamState.from_arrays(st.to_arrays())
        assert back.t == st.t
        np.testing.assert_array_equal(back.m["p"], st.m["p"])
        np.testing.assert_array_equal(back.v["p"], st.v["p"])
