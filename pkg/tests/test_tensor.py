"""Autodiff engine: forward correctness, gradient checks, error handling."""

import numpy as np
import pytest

import oracles
from shiftlab import tensor as T
from shiftlab.tensor import (
    GradTape,
    NumericError,
    ShapeError,
    Tensor,
    backward,
    finite_difference_check,
)


def rand(shape, seed, scale=1.0, offset=0.0):
    return np.random.default_rng(seed).standard_normal(shape) * scale + offset


class TestForward:
    def test_elementwise_match_numpy(self):
        a = rand((3, 4), 0)
        b = rand((3, 4), 1)
        np.testing.assert_array_equal(T.add(Tensor(a), Tensor(b)).data, a + b)
        np.testing.assert_array_equal(T.sub(Tensor(a), Tensor(b)).data, a - b)
        np.testing.assert_array_equal(T.mul(Tensor(a), Tensor(b)).data, a * b)
        np.testing.assert_array_equal(T.neg(Tensor(a)).data, -a)

    def test_broadcasting(self):
        a = rand((3, 4), 2)
        b = rand((4,), 3)
        np.testing.assert_array_equal((Tensor(a) + Tensor(b)).data, a + b)
        np.testing.assert_array_equal((Tensor(a) * 2.0).data, a * 2.0)
        np.testing.assert_array_equal((1.0 - Tensor(a)).data, 1.0 - a)

    def test_matmul_and_shapes(self):
        a = rand((3, 5), 4)
        b = rand((5, 2), 5)
        np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, a @ b)
        with pytest.raises(ShapeError):
            T.matmul(Tensor(a), Tensor(a))
        with pytest.raises(ShapeError):
            T.matmul(Tensor(rand((3,), 6)), Tensor(b))

    def test_reductions(self):
        a = rand((4, 6), 7)
        np.testing.assert_allclose(T.mean(Tensor(a)).data, a.mean())
        np.testing.assert_allclose(T.mean(Tensor(a), axis=1).data, a.mean(axis=1))
        np.testing.assert_allclose(T.tsum(Tensor(a), axis=0, keepdims=True).data, a.sum(axis=0, keepdims=True))
        np.testing.assert_allclose(T.l2_norm(Tensor(a)).data, np.linalg.norm(a))
        np.testing.assert_allclose(T.l2_norm(Tensor(a), axis=1).data, np.linalg.norm(a, axis=1))

    def test_softmax_rows_sum_to_one(self):
        a = rand((5, 7), 8, scale=4.0)
        s = T.softmax(Tensor(a)).data
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(s > 0)

    def test_softmax_cross_entropy_matches_manual(self):
        logits = rand((6, 4), 9, scale=3.0)
        labels = np.array([0, 1, 2, 3, 1, 2])
        onehot = np.eye(4)[labels]
        loss = T.softmax_cross_entropy(Tensor(logits), onehot).item()
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        manual = -np.log(p[np.arange(6), labels]).mean()
        assert abs(loss - manual) < 1e-12

    def test_softmax_cross_entropy_shape_check(self):
        with pytest.raises(ShapeError):
            T.softmax_cross_entropy(Tensor(rand((3, 4), 0)), np.zeros((4, 3)))

    def test_conv2d_matches_reference(self):
        rng = np.random.default_rng(10)
        for stride, padding in [(1, 0), (1, 1), (2, 1), (2, 0)]:
            x = rng.standard_normal((2, 3, 7, 6))
            w = rng.standard_normal((4, 3, 3, 3))
            got = T.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding).data
            want = oracles.conv2d_reference(x, w, stride=stride, padding=padding)
            np.testing.assert_allclose(got, want, atol=1e-12)

    def test_conv2d_rejects_bad_shapes(self):
        x = Tensor(rand((1, 2, 5, 5), 11))
        with pytest.raises(ShapeError):
            T.conv2d(x, Tensor(rand((4, 3, 3, 3), 12)))  # channel mismatch
        with pytest.raises(ShapeError):
            T.conv2d(x, Tensor(rand((4, 2, 9, 9), 13)))  # empty output

    def test_group_norm_matches_reference(self):
        rng = np.random.default_rng(14)
        x = rng.standard_normal((2, 8, 5, 5))
        gamma = rng.standard_normal(8)
        beta = rng.standard_normal(8)
        got = T.group_norm(Tensor(x), Tensor(gamma), Tensor(beta), groups=4).data
        want = oracles.group_norm_reference(x, gamma, beta, groups=4)
        np.testing.assert_allclose(got, want, atol=1e-10)

    def test_group_norm_normalizes_each_group(self):
        x = rand((3, 8, 4, 4), 15, scale=5.0, offset=2.0)
        out = T.group_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8)), groups=2).data
        grouped = out.reshape(3, 2, 4 * 4 * 4)
        np.testing.assert_allclose(grouped.mean(axis=2), 0.0, atol=1e-10)
        np.testing.assert_allclose(grouped.var(axis=2), 1.0, atol=1e-4)

    def test_group_norm_validation(self):
        x = Tensor(rand((2, 6, 3, 3), 16))
        with pytest.raises(ShapeError):
            T.group_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6)), groups=4)
        with pytest.raises(ShapeError):
            T.group_norm(x, Tensor(np.ones(5)), Tensor(np.zeros(6)), groups=2)

    def test_weight_standardize_moments(self):
        w = rand((5, 3, 3, 3), 17, scale=2.0, offset=1.0)
        out = T.weight_standardize(Tensor(w)).data.reshape(5, -1)
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-4)

    def test_weight_standardize_shift_invariant(self):
        w = rand((4, 2, 3, 3), 18)
        a = T.weight_standardize(Tensor(w)).data
        b = T.weight_standardize(Tensor(w + 3.7)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_gather_and_concat(self):
        a = rand((5, 3), 19)
        np.testing.assert_array_equal(T.gather(Tensor(a), [4, 0, 0]).data, a[[4, 0, 0]])
        with pytest.raises(ShapeError):
            T.gather(Tensor(a), [5])
        parts = [Tensor(rand((2, 3), s)) for s in (20, 21)]
        np.testing.assert_array_equal(
            T.concat(parts, axis=0).data, np.concatenate([p.data for p in parts], axis=0)
        )

    def test_cosine_similarity(self):
        u = np.array([1.0, 0.0, 1.0])
        v = np.array([1.0, 1.0, 0.0])
        got = T.cosine_similarity(Tensor(u), Tensor(v)).item()
        assert abs(got - 0.5) < 1e-12
        with pytest.raises(NumericError):
            T.cosine_similarity(Tensor(np.zeros(3)), Tensor(v))


class TestNumericErrors:
    def test_div_by_zero(self):
        with pytest.raises(NumericError):
            T.div(Tensor(np.ones(3)), Tensor(np.array([1.0, 0.0, 2.0])))

    def test_log_domain(self):
        with pytest.raises(NumericError):
            T.log(Tensor(np.array([1.0, 0.0])))
        with pytest.raises(NumericError):
            T.log(Tensor(np.array([-1.0])))

    def test_exp_overflow(self):
        with pytest.raises(NumericError):
            T.exp(Tensor(np.array([1e4])))

    def test_nan_propagation_rejected(self):
        with pytest.raises(NumericError):
            T.add(Tensor(np.array([np.nan])), Tensor(np.array([1.0])))

    def test_l2_norm_backward_at_zero(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        with GradTape() as tape:
            n = T.l2_norm(x)
        with pytest.raises(NumericError):
            backward(tape, n)


class TestBackward:
    def test_scalar_loss_required(self):
        x = Tensor(rand((2, 2), 22), requires_grad=True)
        with GradTape() as tape:
            y = T.mul(x, x)
        with pytest.raises(ShapeError):
            backward(tape, y)

    def test_unreachable_leaf_gets_zeros(self):
        x = Tensor(rand((3,), 23), requires_grad=True)
        y = Tensor(rand((3,), 24), requires_grad=True)
        with GradTape() as tape:
            lx = T.tsum(T.mul(x, x))
            T.tsum(y)  # recorded but not part of lx
        grads = backward(tape, lx)
        np.testing.assert_allclose(grads[x.tid], 2.0 * x.data)
        np.testing.assert_array_equal(grads[y.tid], np.zeros(3))

    def test_gather_accumulates_repeated_rows(self):
        a = Tensor(rand((4, 2), 25), requires_grad=True)
        with GradTape() as tape:
            loss = T.tsum(T.gather(a, [1, 1, 3]))
        g = backward(tape, loss)[a.tid]
        expected = np.zeros((4, 2))
        expected[1] = 2.0
        expected[3] = 1.0
        np.testing.assert_array_equal(g, expected)

    def test_broadcast_gradient_sums_back(self):
        a = Tensor(rand((3, 4), 26), requires_grad=True)
        b = Tensor(rand((4,), 27), requires_grad=True)
        with GradTape() as tape:
            loss = T.tsum(T.mul(T.add(a, b), Tensor(np.ones((3, 4)))))
        grads = backward(tape, loss)
        np.testing.assert_allclose(grads[a.tid], np.ones((3, 4)))
        np.testing.assert_allclose(grads[b.tid], np.full(4, 3.0))

    def test_gradients_wrapper_names(self):
        w = Tensor(rand((2, 2), 28), requires_grad=True)
        u = Tensor(rand((2, 2), 29), requires_grad=True)
        with GradTape() as tape:
            loss = T.tsum(T.matmul(w, w))
        grads = tape.gradients(loss, {"w": w, "unused": u})
        assert set(grads) == {"w", "unused"}
        np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))

    def test_nested_tapes_are_independent(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        with GradTape() as outer:
            loss_outer = T.tsum(T.mul(x, x), axis=0)
            with GradTape() as inner:
                z = T.mul(x, Tensor(np.array([3.0])))
            g_inner = backward(inner, z)[x.tid]
        g_outer = backward(outer, loss_outer)[x.tid]
        np.testing.assert_allclose(g_inner, [3.0])
        np.testing.assert_allclose(g_outer, [4.0])

    def test_no_tape_records_nothing(self):
        x = Tensor(rand((3,), 30), requires_grad=True)
        y = T.mul(x, x)
        assert y.requires_grad is False


FD_CASES = {
    "add": lambda x: T.tsum(T.add(x, Tensor(rand(x.shape, 90)))),
    "sub": lambda x: T.tsum(T.sub(Tensor(rand(x.shape, 91)), x)),
    "mul": lambda x: T.tsum(T.mul(x, x)),
    "div": lambda x: T.tsum(T.div(Tensor(rand(x.shape, 92)), T.add(T.mul(x, x), Tensor(np.ones(x.shape))))),
    "neg": lambda x: T.tsum(T.neg(x)),
    "matmul": lambda x: T.tsum(T.matmul(x, Tensor(rand((x.shape[1], 3), 93)))),
    "transpose": lambda x: T.tsum(T.mul(T.transpose(x), Tensor(rand(x.shape[::-1], 94)))),
    "reshape": lambda x: T.tsum(T.mul(T.reshape(x, (-1,)), Tensor(rand(x.size, 95)))),
    "gather": lambda x: T.tsum(T.gather(x, [0, 0, 2])),
    "relu": lambda x: T.tsum(T.relu(x)),
    "exp": lambda x: T.tsum(T.exp(x)),
    "log": lambda x: T.tsum(T.log(T.add(T.mul(x, x), Tensor(np.full(x.shape, 0.5))))),
    "mean": lambda x: T.mean(T.mul(x, x)),
    "sum": lambda x: T.tsum(T.mul(x, T.tsum(x, axis=1, keepdims=True))),
    "l2_norm": lambda x: T.l2_norm(x),
    "softmax": lambda x: T.tsum(T.mul(T.softmax(x), Tensor(rand(x.shape, 96)))),
    "concat": lambda x: T.tsum(T.concat([x, T.mul(x, x)], axis=0)),
}


class TestFiniteDifference:
    """A quick gradient check per op; the acceptance suite runs the full
    multi-point sweep with timing."""

    @pytest.mark.parametrize("name", sorted(FD_CASES))
    def test_op_gradient(self, name):
        point = Tensor(rand((4, 3), hash(name) % 1000, scale=0.8))
        err = finite_difference_check(FD_CASES[name], point)
        assert err < 1e-3, f"{name}: max rel err {err}"

    def test_softmax_cross_entropy_gradient(self):
        targets = np.eye(4)[[0, 2, 1]]
        err = finite_difference_check(
            lambda x: T.softmax_cross_entropy(x, targets), Tensor(rand((3, 4), 97))
        )
        assert err < 1e-3

    def test_conv2d_gradients(self):
        x0 = rand((2, 2, 5, 5), 98)
        w0 = rand((3, 2, 3, 3), 99)
        err_w = finite_difference_check(
            lambda w: T.tsum(T.conv2d(Tensor(x0), w, stride=2, padding=1)), Tensor(w0)
        )
        err_x = finite_difference_check(
            lambda x: T.tsum(T.mul(T.conv2d(x, Tensor(w0), stride=1, padding=1),
                                   Tensor(rand((2, 3, 5, 5), 100)))),
            Tensor(x0),
        )
        assert err_w < 1e-3 and err_x < 1e-3

    def test_group_norm_gradients(self):
        x0 = rand((2, 4, 3, 3), 101)
        g0 = rand((4,), 102, offset=1.0)
        b0 = rand((4,), 103)
        weights = rand((2, 4, 3, 3), 104)
        err_x = finite_difference_check(
            lambda x: T.tsum(T.mul(T.group_norm(x, Tensor(g0), Tensor(b0), groups=2), Tensor(weights))),
            Tensor(x0),
        )
        err_g = finite_difference_check(
            lambda g: T.tsum(T.mul(T.group_norm(Tensor(x0), g, Tensor(b0), groups=2), Tensor(weights))),
            Tensor(g0),
        )
        assert err_x < 1e-3 and err_g < 1e-3

    def test_weight_standardize_gradient(self):
        w0 = rand((3, 2, 3, 3), 105)
        weights = rand((3, 2, 3, 3), 106)
        err = finite_difference_check(
            lambda w: T.tsum(T.mul(T.weight_standardize(w), Tensor(weights))), Tensor(w0)
        )
        assert err < 1e-3


class TestMisc:
    def test_item_requires_scalar(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros(2)).item()

    def test_forward_op_dispatch(self):
        out = T.forward_op("add", (Tensor(np.ones(2)), Tensor(np.ones(2))))
        np.testing.assert_array_equal(out.data, [2.0, 2.0])
        with pytest.raises(KeyError):
            T.forward_op("nope", ())

    def test_ops_registry_is_complete(self):
        # every differentiable primitive is reachable by name
        assert set(T.OPS) == {
            "add", "sub", "mul", "div", "neg", "matmul", "transpose", "reshape",
            "concat", "gather", "relu", "exp", "log", "mean", "sum", "l2_norm",
            "softmax", "softmax_cross_entropy", "group_norm", "weight_standardize",
            "conv2d",
        }
