import numpy as np
import pytest

from cmunet import functional as F
from cmunet import tensor as T
from cmunet.blocks import (CSAttention, CSMambaBlock, CsMambaBlockConfig, MSAA,
                           MsaaConfig, cs_attention, csmamba_forward, msaa_forward)
from cmunet.errors import ConfigError, DimensionError
from cmunet.tensor import Tensor


class TestCSAttention:
    def test_zero_weights_give_quarter_gain(self, rng):
        cs = CSAttention(8, dtype=np.float64)
        for p in cs.parameters():
            p.data[:] = 0.0
        x = Tensor(rng.standard_normal((2, 8, 5, 5)), dtype=np.float64)
        y = cs_attention(x, cs)
        assert np.allclose(y.data, x.data / 4.0)

    def test_zero_input_stays_zero(self):
        cs = CSAttention(4, dtype=np.float64)
        y = cs(Tensor(np.zeros((1, 4, 3, 3)), dtype=np.float64))
        assert not y.data.any()

    def test_matches_stagewise_oracle(self, rng):
        cs = CSAttention(6, dtype=np.float64)
        x = Tensor(rng.standard_normal((1, 6, 4, 4)), dtype=np.float64)
        y = cs(x)

        squeeze = lambda v: cs.fc2(F.relu(cs.fc1(v)))
        gate_c = F.sigmoid(squeeze(F.pool(x, "global_mean")) + squeeze(F.pool(x, "global_max")))
        stage1 = x * gate_c
        gate_s = F.sigmoid(cs.spatial_conv(T.concat(
            [stage1.mean(axis=1, keepdims=True), stage1.max(axis=1, keepdims=True)], axis=1)))
        assert np.allclose(y.data, (stage1 * gate_s).data)

    def test_gates_lie_in_unit_interval(self, rng):
        cs = CSAttention(4, dtype=np.float64)
        x = Tensor(rng.standard_normal((1, 4, 6, 6)) * 5, dtype=np.float64)
        squeeze = lambda v: cs.fc2(F.relu(cs.fc1(v)))
        g = F.sigmoid(squeeze(F.pool(x, "global_mean")) + squeeze(F.pool(x, "global_max")))
        assert (g.data > 0).all() and (g.data < 1).all()


class TestCSMambaBlock:
    def test_config_validates_expansion(self):
        with pytest.raises(ConfigError):
            CsMambaBlockConfig(channels=1, expansion=0.4)

    def test_zeroed_out_projection_is_identity(self, rng):
        blk = CSMambaBlock(CsMambaBlockConfig(channels=4, state_size=2), dtype=np.float64)
        blk.out_proj.weight.data[:] = 0.0
        blk.out_proj.bias.data[:] = 0.0
        x = Tensor(rng.standard_normal((2, 4, 4, 4)), dtype=np.float64)
        y = csmamba_forward(x, blk)
        assert np.array_equal(y.data, x.data)

    def test_zero_input_zero_biases_zero_output(self):
        blk = CSMambaBlock(CsMambaBlockConfig(channels=4, state_size=2), dtype=np.float64)
        for name, p in blk.named_parameters():
            if name.endswith("bias") or name.endswith("beta"):
                p.data[:] = 0.0
        y = blk(Tensor(np.zeros((1, 4, 3, 3)), dtype=np.float64))
        assert np.abs(y.data).max() == 0.0

    def test_shape_preserved_with_expansion(self, rng):
        blk = CSMambaBlock(CsMambaBlockConfig(channels=32, expansion=2.0, state_size=4))
        x = Tensor(rng.standard_normal((2, 32, 16, 16)).astype(np.float32))
        assert blk(x).data.shape == (2, 32, 16, 16)
        assert blk.in_proj.weight.data.shape[0] == 64  # internal width doubles

    def test_all_parameters_receive_gradient(self, rng):
        blk = CSMambaBlock(CsMambaBlockConfig(channels=4, state_size=2), dtype=np.float64)
        x = Tensor(rng.standard_normal((2, 4, 4, 4)), dtype=np.float64)
        w = Tensor(rng.standard_normal((2, 4, 4, 4)), dtype=np.float64)
        (blk(x) * w).sum().backward()
        for name, p in blk.named_parameters():
            assert p.grad is not None, name
            assert np.any(p.grad), name

    def test_channel_mismatch_raises(self, rng):
        blk = CSMambaBlock(CsMambaBlockConfig(channels=4, state_size=2))
        with pytest.raises(DimensionError):
            blk(Tensor(rng.standard_normal((1, 6, 4, 4))))

    def test_no_residual_flag(self, rng):
        cfg = CsMambaBlockConfig(channels=4, state_size=2, residual=False)
        blk = CSMambaBlock(cfg, dtype=np.float64)
        blk.out_proj.weight.data[:] = 0.0
        blk.out_proj.bias.data[:] = 0.0
        x = Tensor(rng.standard_normal((1, 4, 3, 3)), dtype=np.float64)
        assert not blk(x).data.any()


class TestMsaaConfig:
    def test_channel_rule(self):
        cfg = MsaaConfig(in_channels=192, reduction=4)
        assert cfg.out_channels == 48

    def test_rejects_indivisible_channels(self):
        with pytest.raises(ConfigError):
            MsaaConfig(in_channels=10, reduction=4)

    def test_rejects_even_kernels(self):
        with pytest.raises(ConfigError):
            MsaaConfig(in_channels=16, kernel_set=(3, 4))


class TestMSAA:
    def test_output_channel_rule(self, rng):
        ms = MSAA(8, 16, 32, dtype=np.float64)
        out = ms(Tensor(rng.standard_normal((1, 8, 16, 16)), dtype=np.float64),
                 Tensor(rng.standard_normal((1, 16, 8, 8)), dtype=np.float64),
                 Tensor(rng.standard_normal((1, 32, 4, 4)), dtype=np.float64))
        assert out.data.shape == (1, 12, 8, 8)  # 3*16/4 channels at cur resolution

    def test_matches_per_path_oracle(self, rng):
        ms = MSAA(4, 8, 8, dtype=np.float64)
        fp = Tensor(rng.standard_normal((1, 4, 8, 8)), dtype=np.float64)
        fc = Tensor(rng.standard_normal((1, 8, 4, 4)), dtype=np.float64)
        fn = Tensor(rng.standard_normal((1, 8, 2, 2)), dtype=np.float64)
        out = msaa_forward(fp, fc, fn, ms)

        prev = ms.proj_prev(F.resize(fp, (4, 4), "bilinear"))
        nxt = ms.proj_next(F.resize(fn, (4, 4), "bilinear"))
        fused = ms.reduce(T.concat([fc, prev, nxt], axis=1))
        fms = ms.ms_convs[0](fused) + ms.ms_convs[1](fused) + ms.ms_convs[2](fused)
        gate_s = F.sigmoid(ms.spatial_conv(T.concat(
            [fms.mean(axis=1, keepdims=True), fms.max(axis=1, keepdims=True)], axis=1)))
        f_spatial = fms * gate_s
        gate_c = F.sigmoid(ms.ch_fc2(F.relu(ms.ch_fc1(F.pool(fms, "global_mean")))))
        expect = f_spatial + fms * gate_c
        assert np.allclose(out.data, expect.data, atol=1e-12)

    def test_all_parameters_receive_gradient(self, rng):
        ms = MSAA(4, 4, 8, dtype=np.float64)
        fp = Tensor(rng.standard_normal((1, 4, 8, 8)), dtype=np.float64)
        fc = Tensor(rng.standard_normal((1, 4, 4, 4)), dtype=np.float64)
        fn = Tensor(rng.standard_normal((1, 8, 2, 2)), dtype=np.float64)
        w = Tensor(rng.standard_normal((1, 3, 4, 4)), dtype=np.float64)
        (ms(fp, fc, fn) * w).sum().backward()
        for name, p in ms.named_parameters():
            assert p.grad is not None and np.any(p.grad), name

    def test_output_channels_independent_of_spatial_size(self, rng):
        ms = MSAA(8, 8, 8)
        for hw in (4, 8):
            out = ms(Tensor(rng.standard_normal((1, 8, hw, hw)).astype(np.float32)),
                     Tensor(rng.standard_normal((1, 8, hw, hw)).astype(np.float32)),
                     Tensor(rng.standard_normal((1, 8, hw // 2, hw // 2)).astype(np.float32)))
            assert out.data.shape[1] == 6
