from typing import Callable, Sequence

import numpy as np
from django.test import SimpleTestCase

from trl3d import tensor as T
from trl3d.exceptions import GradientTapeError, NumericError, ShapeError
from trl3d.gradcheck import check_tensor
from trl3d.nn import Mlp
from trl3d.optim import SGD, Adam, clip_grad_norm, make_optimizer, sgd_step
from trl3d.tensor import Rng, Tensor, no_grad, parameter


def max_gradient_error(inputs: Sequence[Tensor], loss_fn: Callable[[], Tensor], seed: int = 0) -> float:
    for x in inputs:
        x.zero_grad()
    loss_fn().backward()
    return max(
        check_tensor(f"input{i}", x, loss_fn, x.size, Rng(seed).child(i)).max_rel_error for i, x in enumerate(inputs)
    )


class ElementwiseTests(SimpleTestCase):
    def test_relu_clamps_negatives(self) -> None:
        np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_add(self) -> None:
        np.testing.assert_array_equal((Tensor([1.0, 2.0]) + Tensor([3.0, 4.0])).data, [4.0, 6.0])

    def test_add_rejects_incompatible_shapes(self) -> None:
        with self.assertRaises(ShapeError):
            T.add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))

    def test_mul_gradient_is_other_operand(self) -> None:
        a = parameter([1.5, -2.0, 0.25])
        b = Tensor([3.0, 4.0, -5.0])
        T.tsum(a * b).backward()
        assert a.grad is not None
        np.testing.assert_allclose(a.grad, b.data)

    def test_division_by_zero_raises(self) -> None:
        with self.assertRaises(NumericError):
            T.div(Tensor([1.0]), Tensor([0.0]))

    def test_non_finite_values_are_rejected(self) -> None:
        with self.assertRaises(NumericError):
            Tensor([np.nan])
        with self.assertRaises(NumericError):
            T.log(Tensor([0.0]))

    def test_elementwise_dispatch(self) -> None:
        np.testing.assert_array_equal(T.elementwise("sub", Tensor([3.0]), Tensor([1.0])).data, [2.0])
        np.testing.assert_allclose(T.elementwise("exp", Tensor([0.0])).data, [1.0])
        with self.assertRaises(ValueError):
            T.elementwise("tan", Tensor([0.0]))

    def test_unary_gradients_match_finite_differences(self) -> None:
        for seed in range(20):
            rng = Rng(seed)
            x = parameter(rng.uniform(0.2, 2.0, (3, 4)))
            for op in (T.exp, T.log, T.sqrt, T.sin, T.cos, T.softplus, T.neg):
                self.assertLess(max_gradient_error([x], lambda: T.tsum(op(x) * x), seed), 1e-4, op.__name__)

    def test_binary_gradients_broadcast(self) -> None:
        for seed in range(20):
            rng = Rng(seed)
            a = parameter(rng.normal(0.0, 1.0, (2, 3)))
            b = parameter(rng.uniform(0.5, 1.5, (3,)))
            self.assertLess(max_gradient_error([a, b], lambda: T.tsum(T.div(a * b - b, b + a * a + 1.0)), seed), 1e-4)


class MatmulTests(SimpleTestCase):
    def test_identity_leaves_matrix_unchanged(self) -> None:
        M = Rng(1).normal(0.0, 1.0, (3, 3))
        np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), Tensor(M)).data, M)

    def test_small_product(self) -> None:
        out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_gradient_of_sum_is_ones_times_b_transposed(self) -> None:
        A = parameter(Rng(2).normal(0.0, 1.0, (2, 3)))
        B = Tensor(Rng(3).normal(0.0, 1.0, (3, 4)))
        T.tsum(T.matmul(A, B)).backward()
        assert A.grad is not None
        np.testing.assert_allclose(A.grad, np.ones((2, 4)) @ B.data.T)

    def test_inner_mismatch_raises(self) -> None:
        with self.assertRaises(ShapeError):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_rank_one_operands_raise(self) -> None:
        with self.assertRaises(ShapeError):
            T.matmul(Tensor(np.zeros(3)), Tensor(np.zeros((3, 1))))

    def test_batched_gradients(self) -> None:
        rng = Rng(4)
        A = parameter(rng.normal(0.0, 1.0, (2, 3, 4)))
        B = parameter(rng.normal(0.0, 1.0, (4, 2)))
        self.assertLess(max_gradient_error([A, B], lambda: T.tsum(T.matmul(A, B) * T.matmul(A, B))), 1e-4)


class LinearTests(SimpleTestCase):
    def test_zero_weight_gives_bias(self) -> None:
        out = T.linear(Tensor(np.ones((2, 3))), Tensor(np.zeros((3, 2))), Tensor([5.0, -1.0]))
        np.testing.assert_array_equal(out.data, [[5.0, -1.0], [5.0, -1.0]])

    def test_identity_weight_returns_input(self) -> None:
        x = Rng(5).normal(0.0, 1.0, (4, 3))
        np.testing.assert_array_equal(T.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)

    def test_single_vector_input(self) -> None:
        out = T.linear(Tensor([1.0, 2.0]), Tensor([[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]]))
        np.testing.assert_array_equal(out.data, [1.0, 2.0, 3.0])

    def test_width_mismatch_raises(self) -> None:
        with self.assertRaises(ShapeError):
            T.linear(Tensor(np.zeros((2, 4))), Tensor(np.zeros((3, 2))))

    def test_gradients_match_finite_differences(self) -> None:
        for seed in range(20):
            rng = Rng(seed)
            x = parameter(rng.normal(0.0, 1.0, (3, 4)))
            W = parameter(rng.normal(0.0, 1.0, (4, 2)))
            b = parameter(rng.normal(0.0, 1.0, 2))
            self.assertLess(max_gradient_error([x, W, b], lambda: T.tsum(T.relu(T.linear(x, W, b)) * 2.0), seed), 1e-4)


class ReductionTests(SimpleTestCase):
    def test_mean(self) -> None:
        self.assertEqual(T.mean(Tensor([1.0, 2.0, 3.0])).item(), 2.0)

    def test_argmax_takes_lowest_index_on_ties(self) -> None:
        self.assertEqual(T.argmax(Tensor([0.0, 5.0, 5.0])).item(), 1.0)
        self.assertEqual(T.reduce("argmax", Tensor([0.0, 5.0, 5.0])).item(), 1.0)

    def test_sum_gradient_is_all_ones(self) -> None:
        x = parameter(np.arange(6.0).reshape(2, 3))
        T.tsum(x).backward()
        assert x.grad is not None
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_max_gradient_flows_to_first_maximiser(self) -> None:
        x = parameter([[1.0, 3.0, 3.0], [2.0, 0.0, 2.0]])
        T.tsum(T.tmax(x, axis=1)).backward()
        assert x.grad is not None
        np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])

    def test_axis_out_of_range_raises(self) -> None:
        with self.assertRaises(ShapeError):
            T.tsum(Tensor(np.zeros((2, 3))), axis=2)

    def test_unknown_reduction_raises(self) -> None:
        with self.assertRaises(ValueError):
            T.reduce("median", Tensor([1.0]))

    def test_axis_reductions_match_finite_differences(self) -> None:
        x = parameter(Rng(6).normal(0.0, 1.0, (3, 4)))
        self.assertLess(
            max_gradient_error([x], lambda: T.tsum(T.mean(x * x, axis=0) + T.tmax(x, axis=1, keepdims=True))), 1e-4
        )


class NormalisationTests(SimpleTestCase):
    def test_softmax_of_equal_logits_is_uniform(self) -> None:
        np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_softmax_is_shift_invariant(self) -> None:
        x = Rng(7).normal(0.0, 3.0, (4, 5))
        np.testing.assert_allclose(T.softmax(Tensor(x + 11.0)).data, T.softmax(Tensor(x)).data, atol=1e-12)

    def test_layer_norm_output_statistics(self) -> None:
        out = T.layer_norm(Tensor(Rng(8).normal(2.0, 5.0, (3, 16)))).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.std(axis=-1), 1.0, atol=1e-5)

    def test_gradients_match_finite_differences(self) -> None:
        for seed in range(20):
            rng = Rng(seed)
            x = parameter(rng.normal(0.0, 1.0, (3, 6)))
            gamma = parameter(rng.normal(1.0, 0.1, 6))
            beta = parameter(rng.normal(0.0, 0.1, 6))
            weights = rng.normal(0.0, 1.0, (3, 6))

            def loss() -> Tensor:
                normed = T.layer_norm(x, gamma, beta)
                return T.tsum(T.softmax(normed) * weights) + T.tsum(T.log_softmax(x, axis=0) * weights)

            self.assertLess(max_gradient_error([x, gamma, beta], loss, seed), 1e-4)

    def test_l2_normalize_gives_unit_rows(self) -> None:
        out = T.l2_normalize(Tensor(Rng(9).normal(0.0, 1.0, (5, 3)))).data
        np.testing.assert_allclose(np.linalg.norm(out, axis=-1), 1.0)


class MovementTests(SimpleTestCase):
    def test_getitem_concat_stack_gradients(self) -> None:
        rng = Rng(10)
        a = parameter(rng.normal(0.0, 1.0, (2, 3)))
        b = parameter(rng.normal(0.0, 1.0, (2, 3)))

        def loss() -> Tensor:
            joined = T.concat([a, b[:, ::-1]], axis=1)
            stacked = T.stack([a, b], axis=-1)
            return T.tsum(joined * joined) + T.tsum(T.transpose(stacked, (2, 0, 1))[1] * a)

        self.assertLess(max_gradient_error([a, b], loss), 1e-4)

    def test_repeated_index_accumulates(self) -> None:
        x = parameter([1.0, 2.0, 3.0])
        T.tsum(x[np.array([0, 0, 2])]).backward()
        assert x.grad is not None
        np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0])

    def test_reshape_mismatch_raises(self) -> None:
        with self.assertRaises(ShapeError):
            T.reshape(Tensor(np.zeros(6)), (4, 2))

    def test_broadcast_to_gradient_sums(self) -> None:
        x = parameter(np.ones((1, 3)))
        T.tsum(T.broadcast_to(x, (4, 3))).backward()
        assert x.grad is not None
        np.testing.assert_array_equal(x.grad, np.full((1, 3), 4.0))


class BackwardTests(SimpleTestCase):
    def test_sum_of_squares(self) -> None:
        x = parameter([1.0, 2.0])
        T.tsum(x * x).backward()
        assert x.grad is not None
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_loss_independent_of_values_gives_zero_grads(self) -> None:
        x = parameter([1.0, 2.0])
        T.tsum(x * 0.0).backward()
        assert x.grad is not None
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    def test_untracked_loss_raises(self) -> None:
        with self.assertRaises(GradientTapeError):
            T.tsum(Tensor([1.0, 2.0])).backward()

    def test_non_scalar_loss_raises(self) -> None:
        with self.assertRaises(GradientTapeError):
            (parameter([1.0, 2.0]) * 2.0).backward()

    def test_second_backward_on_same_loss_raises(self) -> None:
        loss = T.tsum(parameter([1.0]) * 3.0)
        loss.backward()
        with self.assertRaises(GradientTapeError):
            loss.backward()

    def test_gradients_accumulate_until_cleared(self) -> None:
        x = parameter([1.0])
        T.tsum(x * 2.0).backward()
        T.tsum(x * 3.0).backward()
        assert x.grad is not None
        np.testing.assert_array_equal(x.grad, [5.0])
        x.zero_grad()
        self.assertIsNone(x.grad)

    def test_no_grad_disables_recording(self) -> None:
        x = parameter([1.0])
        with no_grad():
            y = x * 2.0
        self.assertFalse(y.requires_grad)

    def test_composite_mlp_matches_finite_differences(self) -> None:
        for seed in range(3):
            rng = Rng(seed)
            mlp = Mlp([4, 6, 3], rng.child("mlp"))
            x = Tensor(rng.normal(0.0, 1.0, (5, 4)))
            target = rng.normal(0.0, 1.0, (5, 3))

            def loss() -> Tensor:
                diff = mlp(x) - target
                return T.mean(diff * diff)

            self.assertLess(max_gradient_error(mlp.parameters(), loss, seed), 1e-4)


class OptimizerTests(SimpleTestCase):
    def test_zero_learning_rate_leaves_params(self) -> None:
        p = parameter([1.0, -1.0])
        p.grad = np.array([3.0, 4.0])
        SGD([p], lr=0.0).step()
        np.testing.assert_array_equal(p.data, [1.0, -1.0])
        self.assertIsNone(p.grad)

    def test_plain_step_moves_against_gradient(self) -> None:
        p = parameter([1.0, -1.0])
        p.grad = np.array([3.0, 4.0])
        sgd_step([p], lr=0.1, momentum=0.0)
        np.testing.assert_allclose(p.data, [0.7, -1.4])

    def test_momentum_matches_unrolled_recurrence(self) -> None:
        p = parameter([2.0])
        optimizer = SGD([p], lr=0.5, momentum=0.9)
        g1, g2 = 1.0, -3.0
        p.grad = np.array([g1])
        optimizer.step()
        p.grad = np.array([g2])
        optimizer.step()
        v1 = g1
        v2 = 0.9 * v1 + g2
        np.testing.assert_allclose(p.data, [2.0 - 0.5 * v1 - 0.5 * v2])

    def test_step_without_gradients_raises(self) -> None:
        with self.assertRaises(GradientTapeError):
            SGD([parameter([1.0])], lr=0.1).step()

    def test_invalid_settings_raise(self) -> None:
        with self.assertRaises(ValueError):
            SGD([], lr=0.1, momentum=1.0)

    def test_adam_first_step_moves_each_coordinate_by_lr(self) -> None:
        p = parameter([1.0, -2.0])
        p.grad = np.array([0.5, -3e-4])
        Adam([p], lr=0.01).step()
        np.testing.assert_allclose(p.data, [0.99, -1.99], atol=1e-6)
        self.assertIsNone(p.grad)

    def test_adam_matches_unrolled_moments(self) -> None:
        p = parameter([0.0])
        optimizer = Adam([p], lr=0.1, betas=(0.5, 0.75), eps=1e-12)
        for g in (2.0, -3.0):
            p.grad = np.array([g])
            optimizer.step()
        m = 0.5 * (0.5 * 2.0) + 0.5 * -3.0
        v = 0.75 * (0.25 * 4.0) + 0.25 * 9.0
        first = 0.1 * 2.0 / 2.0
        second = 0.1 * (m / 0.75) / np.sqrt(v / (1.0 - 0.75**2))
        np.testing.assert_allclose(p.data, [-first - second], atol=1e-10)

    def test_make_optimizer(self) -> None:
        self.assertIsInstance(make_optimizer("sgd", [], 0.1, 0.9), SGD)
        self.assertIsInstance(make_optimizer("adam", [], 0.1), Adam)
        with self.assertRaises(ValueError):
            make_optimizer("lbfgs", [], 0.1)

    def test_clip_rescales_to_max_norm(self) -> None:
        a, b = parameter([0.0, 0.0]), parameter([0.0])
        a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
        self.assertAlmostEqual(clip_grad_norm([a, b], 1.0), 5.0)
        assert a.grad is not None and b.grad is not None
        np.testing.assert_allclose(np.concatenate([a.grad, b.grad]), [0.6, 0.0, 0.8], atol=1e-6)

    def test_clip_below_max_or_disabled_is_noop(self) -> None:
        p = parameter([0.0, 0.0])
        p.grad = np.array([3.0, 4.0])
        self.assertAlmostEqual(clip_grad_norm([p], 10.0), 5.0)
        self.assertAlmostEqual(clip_grad_norm([p], 0.0), 5.0)
        np.testing.assert_array_equal(p.grad, [3.0, 4.0])
        self.assertEqual(clip_grad_norm([parameter([1.0])], 1.0), 0.0)


class RngTests(SimpleTestCase):
    def test_same_seed_same_draws(self) -> None:
        np.testing.assert_array_equal(Rng(42).normal(size=5), Rng(42).normal(size=5))

    def test_children_are_independent_and_reproducible(self) -> None:
        root = Rng(42)
        np.testing.assert_array_equal(root.child("a").uniform(size=4), Rng(42).child("a").uniform(size=4))
        self.assertFalse(np.array_equal(root.child("a").uniform(size=4), root.child("b").uniform(size=4)))

    def test_child_does_not_consume_parent_stream(self) -> None:
        first = Rng(3)
        first.child("x").normal(size=10)
        np.testing.assert_array_equal(first.normal(size=3), Rng(3).normal(size=3))

    def test_seed_range(self) -> None:
        Rng(2**64 - 1)
        with self.assertRaises(ValueError):
            Rng(2**64)
        with self.assertRaises(ValueError):
            Rng(-1)
