import numpy as np
import pytest

from voiceanalogy import tensor as T
from voiceanalogy.tensor import (Adam, GraphError, MissingGradientError, SGD,
                                 ShapeMismatchError, Tensor)


class TestElementwise:
    def test_add(self):
        out = Tensor([1.0, 2.0]) + Tensor([3.0, 4.0])
        np.testing.assert_array_equal(out.data, [4.0, 6.0])

    def test_mul_identity(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
        out = x * Tensor(np.ones((3, 4)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_sub(self):
        out = T.elementwise("sub", Tensor([5.0, 1.0]), Tensor([2.0, 3.0]))
        np.testing.assert_array_equal(out.data, [3.0, -2.0])

    def test_mul_backward(self):
        x = Tensor([2.0, 3.0], requires_grad=True)
        y = Tensor([5.0, 7.0], requires_grad=True)
        (x * y).sum().backward()
        np.testing.assert_array_equal(x.grad, [5.0, 7.0])
        np.testing.assert_array_equal(y.grad, [2.0, 3.0])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeMismatchError, match=r"\(3,\)"):
            Tensor([1.0, 2.0]) + Tensor([1.0, 2.0, 3.0])

    def test_broadcast_trailing(self):
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        out = x + b
        np.testing.assert_array_equal(out.data, [[2.0, 3.0, 4.0]] * 2)
        out.sum().backward()
        np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])

    def test_broadcast_does_not_expand_first_operand(self):
        with pytest.raises(ShapeMismatchError):
            Tensor([1.0, 2.0]) + Tensor(np.ones((3, 2)))


class TestMatmul:
    def test_identity(self):
        b = Tensor(np.random.default_rng(1).normal(size=(2, 5)))
        out = Tensor(np.eye(2)) @ b
        np.testing.assert_array_equal(out.data, b.data)

    def test_hand_example(self):
        out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[5.0], [6.0]])
        np.testing.assert_array_equal(out.data, [[17.0], [39.0]])

    def test_against_loop_oracle(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 5))
        expected = np.zeros((3, 5))
        for i in range(3):
            for j in range(5):
                for k in range(4):
                    expected[i, j] += a[i, k] * b[k, j]
        np.testing.assert_allclose((Tensor(a) @ Tensor(b)).data, expected, atol=1e-12)

    def test_inner_dim_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))

    def test_backward_matches_finite_difference(self):
        rng = np.random.default_rng(3)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        err = T.gradient_check(lambda: ((a @ b) * (a @ b)).sum(), {"a": a, "b": b})
        assert err < 1e-7


class TestActivations:
    def test_relu(self):
        out = T.activation("relu", Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_sigmoid_at_zero(self):
        assert T.activation("sigmoid", Tensor([0.0])).data[0] == 0.5

    def test_relu_derivative_at_zero_is_zero(self):
        x = Tensor([0.0], requires_grad=True)
        x.relu().sum().backward()
        assert x.grad[0] == 0.0

    def test_leaky_relu(self):
        out = T.activation("leaky_relu", Tensor([-1.0, 2.0]))
        np.testing.assert_allclose(out.data, [-0.2, 2.0])

    @pytest.mark.parametrize("kind", ["relu", "tanh", "sigmoid", "leaky_relu"])
    def test_gradient(self, kind):
        x = Tensor(np.random.default_rng(4).normal(size=(7,)) + 0.3,
                   requires_grad=True)
        err = T.gradient_check(lambda: T.activation(kind, x).sum(), {"x": x})
        assert err < 1e-6

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            T.activation("swish", Tensor([1.0]))


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        for c in (3, 9):
            loss = T.softmax_cross_entropy(Tensor(np.zeros((2, c))), [0, c - 1])
            np.testing.assert_allclose(loss.data[0], np.log(c), atol=1e-12)

    def test_confident_logits_closed_form(self):
        loss = T.softmax_cross_entropy(Tensor([[10.0, -10.0]]), [0])
        np.testing.assert_allclose(loss.data[0], np.log1p(np.exp(-20.0)), atol=1e-15)
        assert loss.data[0] == pytest.approx(2.06e-9, rel=0.01)

    def test_target_out_of_range(self):
        with pytest.raises(IndexError):
            T.softmax_cross_entropy(Tensor(np.zeros((1, 4))), [4])

    def test_gradient(self):
        logits = Tensor(np.random.default_rng(5).normal(size=(2, 4)),
                        requires_grad=True)
        err = T.gradient_check(lambda: T.softmax_cross_entropy(logits, [1, 3]),
                               {"logits": logits})
        assert err < 1e-5

    def test_large_logits_stable(self):
        loss = T.softmax_cross_entropy(Tensor([[1000.0, 0.0]]), [0])
        assert np.isfinite(loss.data[0])


class TestMseLoss:
    def test_zero_on_equal(self):
        x = Tensor([[1.0, 2.0]])
        assert T.mse_loss(x, np.array([[1.0, 2.0]])).data[0] == 0.0

    def test_single_sample(self):
        assert T.mse_loss(Tensor([1.0, 1.0]), np.zeros(2)).data[0] == 1.0

    def test_batch_mean(self):
        pred = Tensor(np.ones((4, 3)))
        loss = T.mse_loss(pred, np.zeros((4, 3)))
        np.testing.assert_allclose(loss.data[0], 0.5 * 3)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            T.mse_loss(Tensor(np.ones((2, 2))), np.zeros((2, 3)))

    def test_gradient(self):
        pred = Tensor(np.random.default_rng(6).normal(size=(3, 5)),
                      requires_grad=True)
        target = np.random.default_rng(7).normal(size=(3, 5))
        err = T.gradient_check(lambda: T.mse_loss(pred, target), {"pred": pred})
        assert err < 1e-6
        T.mse_loss(pred, target).backward()
        np.testing.assert_allclose(pred.grad, (pred.data - target) / 3, atol=1e-12)


class TestBackward:
    def test_non_scalar_rejected(self):
        with pytest.raises(GraphError):
            Tensor([1.0, 2.0], requires_grad=True).backward()

    def test_accumulation_doubles(self):
        def grad_of(n_uses):
            x = Tensor([1.5, -0.5], requires_grad=True)
            terms = (x * x).sum()
            for _ in range(n_uses - 1):
                terms = terms + (x * x).sum()
            terms.backward()
            return x.grad

        np.testing.assert_array_equal(grad_of(2), 2 * grad_of(1))

    def test_deterministic_forward(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.normal(size=(2, 3, 4, 4)))
        w = Tensor(rng.normal(size=(2, 3, 3, 3)))
        a = T.conv2d(x, w, 1, 1).data
        b = T.conv2d(x, w, 1, 1).data
        assert a.tobytes() == b.tobytes()

    def test_rank_limits(self):
        with pytest.raises(ShapeMismatchError):
            Tensor(np.ones((1, 1, 1, 1, 1)))


class TestConcat:
    def test_forward_and_backward(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(2 * np.ones((2, 2)), requires_grad=True)
        out = T.concat([a, b], axis=1)
        assert out.shape == (2, 5)
        (out * out).sum().backward()
        np.testing.assert_array_equal(a.grad, 2 * np.ones((2, 3)))
        np.testing.assert_array_equal(b.grad, 4 * np.ones((2, 2)))


class TestOptimizers:
    def test_sgd_step(self):
        p = Tensor([1.0], requires_grad=True)
        p.grad = np.array([2.0])
        SGD(0.1).step({"p": p})
        np.testing.assert_allclose(p.data, [0.8])
        assert p.grad is None

    def test_sgd_missing_grad(self):
        with pytest.raises(MissingGradientError):
            SGD(0.1).step({"p": Tensor([1.0], requires_grad=True)})

    @pytest.mark.parametrize("g", [1.0, 100.0, 1e-3])
    def test_adam_first_step_scale_invariant(self, g):
        p = Tensor([1.0], requires_grad=True)
        p.grad = np.array([g])
        opt = Adam(learning_rate=0.01, epsilon=1e-12)
        opt.step({"p": p})
        np.testing.assert_allclose(p.data, [1.0 - 0.01], rtol=1e-6)

    def test_zero_gradient_no_change(self):
        p = Tensor([3.0], requires_grad=True)
        p.grad = np.zeros(1)
        Adam().step({"p": p})
        np.testing.assert_array_equal(p.data, [3.0])

    def test_adam_step_count_increments(self):
        opt = Adam()
        p = Tensor([1.0], requires_grad=True)
        for expected in (1, 2, 3):
            p.grad = np.ones(1)
            opt.step({"p": p})
            assert opt.step_count == expected

    def test_adam_state_round_trip(self):
        opt = Adam()
        p = Tensor([1.0], requires_grad=True)
        p.grad = np.array([0.5])
        opt.step({"p": p})
        other = Adam()
        other.load_state_tensors(opt.state_tensors())
        assert other.step_count == 1
        np.testing.assert_array_equal(other._m["p"], opt._m["p"])


class TestGradientCheck:
    def test_linear_function_near_exact(self):
        x = Tensor(np.random.default_rng(9).normal(size=(5,)), requires_grad=True)
        c = np.arange(1.0, 6.0)
        err = T.gradient_check(lambda: (x * Tensor(c)).sum(), {"x": x})
        assert err < 1e-9
