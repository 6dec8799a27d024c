import numpy as np
import pytest

from cmunet import functional as F
from cmunet import tensor as T
from cmunet.errors import DimensionError
from cmunet.tensor import Tensor


def rel_err(a, b):
    scale = max(np.abs(b).max(), 1e-12)
    return np.abs(np.asarray(a) - np.asarray(b)).max() / scale


class TestLinear:
    def test_identity_weights(self):
        y = F.linear(Tensor([1.0, 2.0]), Tensor(np.eye(2, dtype=np.float32)))
        assert np.allclose(y.data, [1.0, 2.0])

    def test_hand_matrix_product(self):
        y = F.linear(Tensor([1.0, 0.0]), Tensor([[2.0, 3.0], [4.0, 5.0]]),
                     Tensor([1.0, 1.0]))
        assert np.allclose(y.data, [3.0, 5.0])

    def test_zero_weights_annihilate(self, rng):
        x = Tensor(rng.standard_normal((4, 6)))
        y = F.linear(x, Tensor(np.zeros((3, 6), dtype=np.float32)))
        assert not y.data.any()

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            F.linear(Tensor(rng.standard_normal((2, 5))),
                     Tensor(rng.standard_normal((3, 4))))


class TestConv2d:
    def test_1x1_identity_kernel(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 5, 5)), dtype=np.float64)
        y = F.conv2d(x, Tensor([[[[1.0]]]], dtype=np.float64))
        assert np.array_equal(y.data, x.data)

    def test_all_ones_kernel_on_constant(self):
        x = Tensor(np.full((1, 1, 5, 5), 2.0), dtype=np.float64)
        y = F.conv2d(x, Tensor(np.ones((1, 1, 3, 3)), dtype=np.float64))
        assert np.allclose(y.data, 18.0)

    @pytest.mark.parametrize("stride,padding,groups", [(1, 0, 1), (1, 1, 1), (2, 1, 1), (1, 1, 3)])
    def test_matches_naive_oracle(self, rng, stride, padding, groups):
        cin = 3
        x = Tensor(rng.standard_normal((2, cin, 5, 5)), dtype=np.float64)
        w = Tensor(rng.standard_normal((6, cin // groups, 3, 3)), dtype=np.float64)
        b = Tensor(rng.standard_normal(6), dtype=np.float64)
        fast = F.conv2d(x, w, b, stride, padding, groups)
        naive = F.conv2d_naive(x, w, b, stride, padding, groups)
        assert rel_err(fast.data, naive) < 1e-12

    def test_random_input_against_oracle_f32(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 5, 5)).astype(np.float32))
        w = Tensor(rng.standard_normal((4, 3, 3, 3)).astype(np.float32))
        fast = F.conv2d(x, w)
        naive = F.conv2d_naive(x, w)
        assert rel_err(fast.data, naive) < 1e-5

    def test_depthwise_equals_per_channel(self, rng):
        x = rng.standard_normal((1, 4, 6, 6))
        w = rng.standard_normal((4, 1, 3, 3))
        grouped = F.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64),
                           padding=1, groups=4)
        per = [F.conv2d(Tensor(x[:, i:i + 1], dtype=np.float64),
                        Tensor(w[i:i + 1], dtype=np.float64), padding=1).data
               for i in range(4)]
        assert np.array_equal(grouped.data, np.concatenate(per, axis=1))

    def test_kernel_exceeding_extent_raises(self, rng):
        with pytest.raises(DimensionError):
            F.conv2d(Tensor(rng.standard_normal((1, 1, 2, 2))),
                     Tensor(rng.standard_normal((1, 1, 5, 5))))

    def test_group_divisibility_checked(self, rng):
        with pytest.raises(DimensionError):
            F.conv2d(Tensor(rng.standard_normal((1, 3, 4, 4))),
                     Tensor(rng.standard_normal((2, 1, 1, 1))), groups=2)


class TestPool:
    def test_global_mean_constant(self):
        x = Tensor(np.full((2, 3, 4, 4), 2.5))
        assert np.allclose(F.pool(x, "global_mean").data, 2.5)

    def test_max_window(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        assert F.pool(x, "max", 2, 2).data.reshape(-1)[0] == 4.0

    def test_mean_pool_matches_window_average(self, rng):
        x = rng.standard_normal((1, 1, 8, 8))
        got = F.pool(Tensor(x, dtype=np.float64), "mean", 2, 2).data
        expect = x.reshape(1, 1, 4, 2, 4, 2).mean(axis=(3, 5))
        assert np.array_equal(got, expect)

    def test_global_shapes(self, rng):
        x = Tensor(rng.standard_normal((2, 5, 6, 7)))
        assert F.pool(x, "global_max").data.shape == (2, 5, 1, 1)

    def test_max_tie_routes_first_in_scan_order(self):
        x = Tensor(np.array([[[[2.0, 2.0], [2.0, 2.0]]]]), requires_grad=True,
                   dtype=np.float64)
        F.pool(x, "max", 2, 2).sum().backward()
        assert np.array_equal(x.grad, [[[[1.0, 0.0], [0.0, 0.0]]]])

    def test_oversized_window_raises(self, rng):
        with pytest.raises(DimensionError):
            F.pool(Tensor(rng.standard_normal((1, 1, 3, 3))), "max", 5, 1)


class TestLayerNorm:
    def test_constant_vector_maps_to_zero(self):
        x = Tensor(np.full((3, 8), 4.0), dtype=np.float64)
        y = F.layer_norm(x, Tensor(np.ones(8), dtype=np.float64),
                         Tensor(np.zeros(8), dtype=np.float64))
        assert np.abs(y.data).max() < 1e-6

    def test_unit_variance_input_nearly_fixed(self):
        x = Tensor(np.array([[1.0, -1.0]]), dtype=np.float64)
        y = F.layer_norm(x, Tensor(np.ones(2), dtype=np.float64),
                         Tensor(np.zeros(2), dtype=np.float64), eps=1e-12)
        assert np.allclose(y.data, [[1.0, -1.0]], atol=1e-6)

    def test_output_moments(self, rng):
        x = Tensor(rng.standard_normal((4, 8)), dtype=np.float64)
        y = F.layer_norm(x, Tensor(np.ones(8), dtype=np.float64),
                         Tensor(np.zeros(8), dtype=np.float64), eps=1e-5).data
        assert np.abs(y.mean(axis=1)).max() < 1e-6
        assert np.abs(y.var(axis=1) - 1.0).max() < 1e-4

    def test_inverse_affine_recovers_standardized(self, rng):
        x = Tensor(rng.standard_normal((5, 6)), dtype=np.float64)
        gamma = Tensor(rng.uniform(0.5, 2.0, 6), dtype=np.float64)
        beta = Tensor(rng.standard_normal(6), dtype=np.float64)
        y = F.layer_norm(x, gamma, beta)
        xhat = (y.data - beta.data) / gamma.data
        assert np.abs(xhat.mean(axis=1)).max() < 1e-6

    def test_channel_axis_mode(self, rng):
        x = Tensor(rng.standard_normal((2, 6, 3, 3)), dtype=np.float64)
        y = F.layer_norm(x, Tensor(np.ones(6), dtype=np.float64),
                         Tensor(np.zeros(6), dtype=np.float64), axis=1).data
        assert np.abs(y.mean(axis=1)).max() < 1e-6


class TestActivations:
    def test_silu_at_zero(self):
        assert F.activation("silu", Tensor([0.0])).data[0] == 0.0

    def test_sigmoid_at_zero(self):
        assert F.activation("sigmoid", Tensor([0.0])).data[0] == 0.5

    def test_softmax_uniform(self):
        y = F.activation("softmax_channel", Tensor([0.0, 0.0, 0.0, 0.0]))
        assert np.allclose(y.data, 0.25)

    def test_softmax_sums_to_one_per_position(self, rng):
        x = Tensor(rng.standard_normal((2, 5, 4, 4)))
        s = F.activation("softmax_channel", x).data.sum(axis=1)
        assert np.abs(s - 1.0).max() < 1e-6

    def test_sigmoid_extreme_inputs_stay_finite(self):
        y = F.sigmoid(Tensor([-200.0, 200.0], dtype=np.float64))
        assert np.allclose(y.data, [0.0, 1.0])

    def test_unknown_kind_rejected(self):
        with pytest.raises(DimensionError):
            F.activation("tanh", Tensor([0.0]))


class TestElementwise:
    def test_mul_by_ones_is_identity(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4, 4)))
        assert np.array_equal(F.elementwise("mul", x, Tensor(np.ones((2, 3, 4, 4), np.float32))).data,
                              x.data)

    def test_add_zeros_is_identity(self, rng):
        x = Tensor(rng.standard_normal((2, 3)))
        assert np.array_equal(F.elementwise("add", x, Tensor(np.zeros((2, 3), np.float32))).data,
                              x.data)

    def test_rejects_non_broadcastable(self, rng):
        with pytest.raises(DimensionError):
            F.elementwise("add", Tensor(rng.standard_normal((2, 3, 4, 4))),
                          Tensor(rng.standard_normal((2, 4))))


class TestResize:
    def test_same_size_identity(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 5, 5)), dtype=np.float64)
        for mode in ("nearest", "bilinear"):
            assert np.array_equal(F.resize(x, (5, 5), mode).data, x.data)

    def test_nearest_from_single_pixel(self):
        x = Tensor(np.full((1, 1, 1, 1), 3.5), dtype=np.float64)
        y = F.resize(x, (4, 6), "nearest")
        assert np.allclose(y.data, 3.5)

    def test_bilinear_2x2_to_4x4_closed_form(self):
        x = Tensor(np.array([[[[0.0, 1.0], [2.0, 3.0]]]]), dtype=np.float64)
        y = F.resize(x, (4, 4), "bilinear").data[0, 0]
        expect = np.array([[0.0, 0.25, 0.75, 1.0],
                           [0.5, 0.75, 1.25, 1.5],
                           [1.5, 1.75, 2.25, 2.5],
                           [2.0, 2.25, 2.75, 3.0]])
        assert np.allclose(y, expect)

    def test_bad_target_rejected(self, rng):
        with pytest.raises(DimensionError):
            F.resize(Tensor(rng.standard_normal((1, 1, 4, 4))), (0, 4))
