import numpy as np
import pytest

from cmunet import tensor as T
from cmunet.errors import ContractError, DimensionError
from cmunet.tensor import Tensor, finite_diff_grad


class TestTensorBasics:
    def test_shape_data_consistency(self, rng):
        t = Tensor(rng.standard_normal((3, 4)))
        assert t.shape == (3, 4)
        assert t.size == 12
        assert t.data.flags["C_CONTIGUOUS"]

    def test_integer_input_promotes_to_real(self):
        t = Tensor([[1, 2], [3, 4]])
        assert t.dtype == np.float32

    def test_grad_matches_shape_and_dtype(self, rng):
        t = Tensor(rng.standard_normal((2, 3)), requires_grad=True, dtype=np.float64)
        (t * 2.0).sum().backward()
        assert t.grad.shape == t.data.shape
        assert t.grad.dtype == t.data.dtype

    def test_ops_are_pure(self, rng):
        a = Tensor(rng.standard_normal((4, 4)))
        b = Tensor(rng.standard_normal((4, 4)))
        first = (a * b + a).data.copy()
        second = (a * b + a).data
        assert np.array_equal(first, second)


class TestAutodiff:
    def test_linear_loss_grad_is_input(self, rng):
        x = rng.standard_normal((3, 3))
        w = Tensor(rng.standard_normal((3, 3)), requires_grad=True, dtype=np.float64)
        (w * Tensor(x, dtype=np.float64)).sum().backward()
        assert np.allclose(w.grad, x)

    def test_quadratic_loss_grad_is_w(self, rng):
        w = Tensor(rng.standard_normal(5), requires_grad=True, dtype=np.float64)
        ((w * w) * 0.5).sum().backward()
        assert np.allclose(w.grad, w.data)

    def test_repeated_backward_accumulates(self):
        w = Tensor([2.0], requires_grad=True, dtype=np.float64)
        loss = (w * 3.0).sum()
        loss.backward()
        loss.backward()
        assert np.allclose(w.grad, [6.0])

    def test_non_scalar_backward_rejected(self, rng):
        t = Tensor(rng.standard_normal(4), requires_grad=True)
        with pytest.raises(ContractError):
            (t * 2.0).backward()

    def test_diamond_graph_accumulates_once_per_path(self):
        x = Tensor([1.5], requires_grad=True, dtype=np.float64)
        y = x * 2.0 + x * 3.0
        y.sum().backward()
        assert np.allclose(x.grad, [5.0])

    def test_deep_chain_does_not_recurse(self):
        x = Tensor([1.0], requires_grad=True, dtype=np.float64)
        y = x
        for _ in range(5000):
            y = y + 1.0
        y.sum().backward()
        assert np.allclose(x.grad, [1.0])

    def test_no_grad_context_blocks_graph(self):
        x = Tensor([1.0], requires_grad=True)
        with T.no_grad():
            y = x * 2.0
        assert y._backward is None and not y.requires_grad


class TestBroadcast:
    def test_channel_map_broadcast_matches_loop(self, rng):
        a = rng.standard_normal((2, 3, 4, 4))
        b = rng.standard_normal((2, 3, 1, 1))
        got = (Tensor(a, dtype=np.float64) * Tensor(b, dtype=np.float64)).data
        expect = np.empty_like(a)
        for bi in range(2):
            for ci in range(3):
                expect[bi, ci] = a[bi, ci] * b[bi, ci, 0, 0]
        assert np.array_equal(got, expect)

    def test_broadcast_grad_sum_reduces(self, rng):
        a = Tensor(rng.standard_normal((2, 3, 4, 4)), dtype=np.float64)
        b = Tensor(rng.standard_normal((2, 3, 1, 1)), requires_grad=True, dtype=np.float64)
        (a * b).sum().backward()
        assert np.allclose(b.grad[..., 0, 0], a.data.sum(axis=(2, 3)))

    def test_incompatible_shapes_raise(self):
        with pytest.raises(DimensionError):
            Tensor(np.zeros((2, 3))) + Tensor(np.zeros((4, 5)))


class TestReductionsAndShape:
    def test_max_routes_to_first_tie(self):
        x = Tensor(np.array([[1.0, 3.0, 3.0]]), requires_grad=True, dtype=np.float64)
        x.max(axis=1).sum().backward()
        assert np.array_equal(x.grad, [[0.0, 1.0, 0.0]])

    def test_select_and_stack_roundtrip(self, rng):
        x = Tensor(rng.standard_normal((3, 4)), dtype=np.float64)
        parts = [x.select(0, i) for i in range(3)]
        assert np.array_equal(T.stack(parts, axis=0).data, x.data)

    def test_concat_grad_splits(self, rng):
        a = Tensor(rng.standard_normal((2, 2)), requires_grad=True, dtype=np.float64)
        b = Tensor(rng.standard_normal((2, 3)), requires_grad=True, dtype=np.float64)
        (T.concat([a, b], axis=1) * 2.0).sum().backward()
        assert np.allclose(a.grad, 2.0) and np.allclose(b.grad, 2.0)

    def test_transpose_reshape_grads(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True, dtype=np.float64)
        w = Tensor(rng.standard_normal((4, 3, 2)), dtype=np.float64)
        (x.transpose(2, 1, 0) * w).sum().backward()
        assert np.allclose(x.grad, w.data.transpose(2, 1, 0))


class TestFiniteDiffOracle:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.standard_normal((2, 3)), dtype=np.float64)
        g = finite_diff_grad(lambda t: t.sum(), x)
        assert np.allclose(g.data, 1.0)

    def test_square_at_three(self):
        x = Tensor([3.0], dtype=np.float64)
        g = finite_diff_grad(lambda t: (t * t).sum(), x, h=1e-5)
        assert abs(g.data[0] - 6.0) < 1e-8

    def test_matches_backward_on_composite(self, rng):
        x = Tensor(rng.standard_normal((3, 3)), requires_grad=True, dtype=np.float64)
        w = Tensor(rng.standard_normal((3, 3)), dtype=np.float64)

        def f(t):
            return ((t * w).exp() * 0.1).sum()

        f(x).backward()
        fd = finite_diff_grad(f, x)
        rel = np.abs(x.grad - fd.data).max() / np.abs(fd.data).max()
        assert rel < 1e-7

    def test_rejects_bad_step(self):
        with pytest.raises(ContractError):
            finite_diff_grad(lambda t: t.sum(), Tensor([1.0]), h=0.0)
