import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmunet import ssm
from cmunet import tensor as T
from cmunet.errors import DimensionError
from cmunet.ssm import (AffineScanElement, ScanInputs, SsmParams, discretize,
                        project_delta_b_c, selective_scan_parallel, selective_scan_seq)
from cmunet.tensor import Tensor


def random_instance(rng, b, l, d, n, dtype=np.float64, delta_range=(1e-3, 1.0)):
    params = SsmParams(d, n, dtype=dtype)
    lo, hi = delta_range
    inputs = ScanInputs(
        x=Tensor(rng.standard_normal((b, l, d)).astype(dtype)),
        delta=Tensor(np.exp(rng.uniform(np.log(lo), np.log(hi), (b, l, d))).astype(dtype)),
        Bsel=Tensor(rng.standard_normal((b, l, n)).astype(dtype)),
        Csel=Tensor(rng.standard_normal((b, l, n)).astype(dtype)))
    return inputs, params


class TestSsmParams:
    def test_state_matrix_negative_at_init(self):
        p = SsmParams(6, 5)
        assert (p.A.data < 0).all()
        assert np.array_equal(p.A.data[0], -np.arange(1, 6, dtype=np.float32))

    def test_delta_bias_targets_configured_range(self):
        p = SsmParams(64, 4, dtype=np.float64)
        dt = np.log1p(np.exp(p.delta_proj.bias.data))
        assert dt.min() >= 1e-3 * 0.99 and dt.max() <= 1e-1 * 1.01

    def test_rejects_degenerate_sizes(self):
        with pytest.raises(DimensionError):
            SsmParams(0, 4)


class TestProjection:
    def test_zero_input_zero_bias_gives_ln2(self):
        p = SsmParams(3, 2, dtype=np.float64)
        p.delta_proj.bias.data[:] = 0.0
        si = project_delta_b_c(Tensor(np.zeros((1, 4, 3)), dtype=np.float64), p)
        assert np.allclose(si.delta.data, np.log(2.0))

    def test_zero_b_projection_reduces_to_skip(self, rng):
        p = SsmParams(3, 2, dtype=np.float64)
        p.b_proj.weight.data[:] = 0.0
        x = Tensor(rng.standard_normal((1, 6, 3)), dtype=np.float64)
        si = project_delta_b_c(x, p)
        y = selective_scan_seq(si, p)
        assert np.allclose(y.data, x.data * p.D.data)

    def test_delta_strictly_positive(self, rng):
        p = SsmParams(4, 3, dtype=np.float64)
        for _ in range(100):
            x = Tensor(rng.standard_normal((1, 5, 4)) * 3.0, dtype=np.float64)
            assert (project_delta_b_c(x, p).delta.data > 0).all()

    def test_channel_mismatch_raises(self, rng):
        p = SsmParams(4, 3)
        with pytest.raises(DimensionError):
            project_delta_b_c(Tensor(rng.standard_normal((1, 5, 6))), p)


class TestDiscretize:
    def test_closed_form_scalar(self):
        a_bar, b_bar = discretize(np.array(-1.0), np.array(1.0), 0.1)
        assert abs(a_bar - np.exp(-0.1)) < 1e-12
        assert abs(b_bar - (1.0 - np.exp(-0.1))) < 1e-12

    def test_zero_dynamics_limit(self):
        a_bar, b_bar = discretize(np.array(0.0), np.array(3.0), 0.2)
        assert a_bar == 1.0
        assert abs(b_bar - 0.6) < 1e-15

    def test_series_and_exact_branches_agree_at_threshold(self):
        for u in (9e-5, 1.1e-4, -9e-5, -1.1e-4):
            exact = np.expm1(u) / u
            series = 1.0 + u / 2.0 + u * u / 6.0
            assert abs(series - exact) / abs(exact) < 1e-9


class TestSequentialScan:
    def test_zero_input_zero_output(self, rng):
        si, p = random_instance(rng, 2, 8, 3, 2)
        si = ScanInputs(x=Tensor(np.zeros_like(si.x.data)), delta=si.delta,
                        Bsel=si.Bsel, Csel=si.Csel)
        assert not selective_scan_seq(si, p).data.any()

    def test_hand_unrolled_three_steps(self):
        p = SsmParams(1, 1, dtype=np.float64)
        p.A.data[:] = -1.0
        p.D.data[:] = 0.0
        ones = Tensor(np.ones((1, 3, 1)), dtype=np.float64)
        si = ScanInputs(x=Tensor(np.array([[[1.0], [0.0], [0.0]]]), dtype=np.float64),
                        delta=Tensor(np.full((1, 3, 1), 0.1), dtype=np.float64),
                        Bsel=ones, Csel=ones)
        y = selective_scan_seq(si, p).data.reshape(-1)
        expect = np.array([0.0951626, 0.0861069, 0.0779133])
        assert np.abs(y - expect).max() < 1e-7

    def test_zero_readout_leaves_skip_only(self, rng):
        si, p = random_instance(rng, 1, 6, 3, 2)
        si = ScanInputs(x=si.x, delta=si.delta, Bsel=si.Bsel,
                        Csel=Tensor(np.zeros_like(si.Csel.data)))
        y = selective_scan_seq(si, p)
        assert np.array_equal(y.data, si.x.data * p.D.data)


class TestParallelScan:
    def test_single_step_degenerate(self, rng):
        si, p = random_instance(rng, 3, 1, 4, 3)
        y_seq = selective_scan_seq(si, p)
        y_par = selective_scan_parallel(si, p)
        assert np.allclose(y_par.data, y_seq.data, atol=1e-14)

    def test_large_random_instance_matches_oracle(self, rng):
        si, p = random_instance(rng, 2, 4096, 16, 8, np.float64)
        with T.no_grad():
            y_seq = selective_scan_seq(si, p)
            y_par = selective_scan_parallel(si, p)
        rel = np.abs(y_par.data - y_seq.data).max() / np.abs(y_seq.data).max()
        assert rel < 1e-10

    def test_float32_instance_within_tolerance(self, rng):
        si, p = random_instance(rng, 2, 2048, 8, 4, np.float32)
        with T.no_grad():
            y_seq = selective_scan_seq(si, p)
            y_par = selective_scan_parallel(si, p)
        rel = np.abs(y_par.data - y_seq.data).max() / np.abs(y_seq.data).max()
        assert rel < 1e-5

    @settings(deadline=None, max_examples=20)
    @given(b=st.integers(1, 3), l=st.integers(1, 64), d=st.integers(1, 8),
           n=st.integers(1, 6), seed=st.integers(0, 10_000))
    def test_equivalence_property(self, b, l, d, n, seed):
        rng = np.random.default_rng(seed)
        si, p = random_instance(rng, b, l, d, n)
        with T.no_grad():
            y_seq = selective_scan_seq(si, p)
            y_par = selective_scan_parallel(si, p)
        scale = max(np.abs(y_seq.data).max(), 1e-12)
        assert np.abs(y_par.data - y_seq.data).max() / scale < 1e-10

    def test_unit_decay_reduces_to_cumsum(self, rng):
        p = SsmParams(2, 1, dtype=np.float64)
        p.A.data[:] = 0.0
        p.D.data[:] = 0.0
        x = rng.standard_normal((1, 50, 2))
        si = ScanInputs(x=Tensor(x, dtype=np.float64),
                        delta=Tensor(np.full((1, 50, 2), 0.5), dtype=np.float64),
                        Bsel=Tensor(np.ones((1, 50, 1)), dtype=np.float64),
                        Csel=Tensor(np.ones((1, 50, 1)), dtype=np.float64))
        with T.no_grad():
            y = selective_scan_parallel(si, p)
        assert np.allclose(y.data, np.cumsum(0.5 * x, axis=1), atol=1e-12)

    def test_chunk_boundaries_are_seamless(self, rng):
        for l in (ssm.SCAN_BLOCK - 1, ssm.SCAN_BLOCK, ssm.SCAN_BLOCK + 1, 2 * ssm.SCAN_BLOCK + 7):
            si, p = random_instance(rng, 1, l, 2, 2)
            with T.no_grad():
                y_seq = selective_scan_seq(si, p)
                y_par = selective_scan_parallel(si, p)
            assert np.abs(y_par.data - y_seq.data).max() / np.abs(y_seq.data).max() < 1e-12

    def test_long_sequence_stays_bounded(self, rng):
        si, p = random_instance(rng, 1, 65536, 2, 2, np.float32)
        with T.no_grad():
            y = selective_scan_parallel(si, p)
        assert np.isfinite(y.data).all()


class TestAffineElement:
    @settings(deadline=None, max_examples=100)
    @given(st.lists(st.floats(-2, 2), min_size=7, max_size=7))
    def test_composition_associative(self, vals):
        e1 = AffineScanElement(vals[0], vals[1])
        e2 = AffineScanElement(vals[2], vals[3])
        e3 = AffineScanElement(vals[4], vals[5])
        h = vals[6]
        left = e3.compose(e2).compose(e1).apply(h)
        right = e3.compose(e2.compose(e1)).apply(h)
        assert abs(left - right) <= 1e-12 * max(1.0, abs(left))


class TestScanGradients:
    def test_seq_matches_finite_differences(self, rng):
        p = SsmParams(3, 2, dtype=np.float64)
        x = Tensor(rng.standard_normal((1, 5, 3)) * 0.5, dtype=np.float64,
                   requires_grad=True)
        w = Tensor(rng.standard_normal((1, 5, 3)), dtype=np.float64)

        def f(t):
            return (selective_scan_seq(project_delta_b_c(t, p), p) * w).sum()

        f(x).backward()
        fd = T.finite_diff_grad(f, x, 1e-6)
        assert np.abs(x.grad - fd.data).max() / np.abs(fd.data).max() < 1e-7

    def test_parallel_backward_matches_seq_autodiff(self, rng):
        p = SsmParams(3, 2, dtype=np.float64)
        x = Tensor(rng.standard_normal((2, 7, 3)) * 0.5, dtype=np.float64,
                   requires_grad=True)
        w = Tensor(rng.standard_normal((2, 7, 3)), dtype=np.float64)

        grads = {}
        for label, fn in (("seq", selective_scan_seq), ("par", selective_scan_parallel)):
            x.grad = None
            for param in p.parameters():
                param.grad = None
            (fn(project_delta_b_c(x, p), p) * w).sum().backward()
            grads[label] = {"x": x.grad.copy(), "A": p.A.grad.copy(),
                            "D": p.D.grad.copy(),
                            "dw": p.delta_proj.weight.grad.copy(),
                            "bw": p.b_proj.weight.grad.copy(),
                            "cw": p.c_proj.weight.grad.copy()}
        for key in grads["seq"]:
            scale = max(np.abs(grads["seq"][key]).max(), 1e-12)
            assert np.abs(grads["seq"][key] - grads["par"][key]).max() / scale < 1e-12, key
