"""Decoder building blocks: gated SSM block and multi-scale skip fusion."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError, DimensionError
from . import functional as F
from . import nn
from . import scan2d
from . import tensor as T


@dataclass
class CsMambaBlockConfig:
    channels: int
    expansion: float = 2.0
    state_size: int = 16
    merge_mode: str = "sum"
    share_directions: bool = False
    residual: bool = True

    def __post_init__(self):
        if int(self.expansion * self.channels) < 1:
            raise ConfigError("CsMambaBlockConfig: expanded width must be >= 1")


@dataclass
class MsaaConfig:
    in_channels: int              # channel count after the 3-way concat
    reduction: int = 4
    kernel_set: tuple = (3, 5, 7)
    spatial_kernel: int = 7

    def __post_init__(self):
        if self.in_channels % self.reduction:
            raise ConfigError(
                f"MsaaConfig: {self.in_channels} channels not divisible by alpha={self.reduction}")
        if self.in_channels // self.reduction < 1:
            raise ConfigError("MsaaConfig: reduced width must be >= 1")
        if any(k % 2 == 0 for k in self.kernel_set) or self.spatial_kernel % 2 == 0:
            raise ConfigError("MsaaConfig: kernels must be odd for same-padding")

    @property
    def out_channels(self):
        return self.in_channels // self.reduction


class CSAttention(nn.Module):
    """Channel gate then spatial gate, both multiplicative.

    Channel gate: global mean and max pooled vectors through a shared
    bottleneck (reduction 4, ReLU middle), summed, sigmoid. Spatial gate:
    channel-wise mean/max maps, 7x7 conv, sigmoid.
    """

    def __init__(self, channels, reduction=4, spatial_kernel=7, dtype=T.REAL32, rng=None):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Conv2d(channels, hidden, 1, dtype=dtype, rng=rng)
        self.fc2 = nn.Conv2d(hidden, channels, 1, dtype=dtype, rng=rng)
        self.spatial_conv = nn.Conv2d(2, 1, spatial_kernel,
                                      padding=spatial_kernel // 2, dtype=dtype, rng=rng)

    def forward(self, x):
        squeeze = lambda v: self.fc2(F.relu(self.fc1(v)))
        gate_c = F.sigmoid(squeeze(F.pool(x, "global_mean")) + squeeze(F.pool(x, "global_max")))
        x = x * gate_c
        mean_map = x.mean(axis=1, keepdims=True)
        max_map = x.max(axis=1, keepdims=True)
        gate_s = F.sigmoid(self.spatial_conv(T.concat([mean_map, max_map], axis=1)))
        return x * gate_s


def cs_attention(x, module):
    return module(x)


class CSMambaBlock(nn.Module):
    """Gated 2D-SSM block.

    Branch 1 expands channels, applies a depthwise conv, SiLU, the
    four-direction scan and a channel layer norm. Branch 2 gates the input
    through channel/spatial attention and the same expansion. The branches
    multiply and project back; a residual connection wraps the block.
    """

    def __init__(self, cfg: CsMambaBlockConfig, dtype=T.REAL32, rng=None):
        super().__init__()
        c = cfg.channels
        inner = int(cfg.expansion * c)
        self.in_proj = nn.Conv2d(c, inner, 1, dtype=dtype, rng=rng)
        self.dw_conv = nn.Conv2d(inner, inner, 3, padding=1, groups=inner, dtype=dtype, rng=rng)
        self.ssm = scan2d.SSM2D(inner, cfg.state_size, cfg.share_directions,
                                cfg.merge_mode, dtype=dtype, rng=rng)
        self.norm = nn.LayerNorm(inner, axis=1, dtype=dtype)
        self.cs = CSAttention(c, dtype=dtype, rng=rng)
        self.gate_proj = nn.Conv2d(c, inner, 1, dtype=dtype, rng=rng)
        self.out_proj = nn.Conv2d(inner, c, 1, dtype=dtype, rng=rng)
        self.cfg = cfg

    def forward(self, x):
        if x.data.shape[1] != self.cfg.channels:
            raise DimensionError(
                f"CSMambaBlock: {x.data.shape[1]} channels, expected {self.cfg.channels}")
        b1 = self.norm(self.ssm(F.silu(self.dw_conv(self.in_proj(x)))))
        b2 = F.silu(self.gate_proj(self.cs(x)))
        out = self.out_proj(b1 * b2)
        return x + out if self.cfg.residual else out


def csmamba_forward(x, block):
    return block(x)


class MSAA(nn.Module):
    """Multi-scale attention aggregation over three adjacent pyramid levels.

    Neighbors are resized (bilinear) and 1x1-projected to the current
    level's shape, concatenated, then reduced to in_channels/alpha. A sum of
    depthwise convolutions at several kernel sizes feeds two gated paths
    (spatial and channel) whose outputs are added.
    """

    def __init__(self, ch_prev, ch_cur, ch_next, cfg: MsaaConfig = None,
                 dtype=T.REAL32, rng=None):
        super().__init__()
        cfg = cfg or MsaaConfig(in_channels=3 * ch_cur)
        if cfg.in_channels != 3 * ch_cur:
            raise ConfigError("MSAA: in_channels must be 3x the current level width")
        c2 = cfg.out_channels
        self.proj_prev = nn.Conv2d(ch_prev, ch_cur, 1, dtype=dtype, rng=rng)
        self.proj_next = nn.Conv2d(ch_next, ch_cur, 1, dtype=dtype, rng=rng)
        self.reduce = nn.Conv2d(cfg.in_channels, c2, 1, dtype=dtype, rng=rng)
        self.ms_convs = nn.ModuleList(
            [nn.Conv2d(c2, c2, k, padding=k // 2, groups=c2, dtype=dtype, rng=rng)
             for k in cfg.kernel_set])
        self.spatial_conv = nn.Conv2d(2, 1, cfg.spatial_kernel,
                                      padding=cfg.spatial_kernel // 2, dtype=dtype, rng=rng)
        self.ch_fc1 = nn.Conv2d(c2, c2, 1, dtype=dtype, rng=rng)
        self.ch_fc2 = nn.Conv2d(c2, c2, 1, dtype=dtype, rng=rng)
        self.cfg = cfg

    def forward(self, f_prev, f_cur, f_next):
        _, _, h, w = f_cur.data.shape
        prev = self.proj_prev(F.resize(f_prev, (h, w), "bilinear"))
        nxt = self.proj_next(F.resize(f_next, (h, w), "bilinear"))
        fused = self.reduce(T.concat([f_cur, prev, nxt], axis=1))

        ms = self.ms_convs[0](fused)
        for conv in list(self.ms_convs)[1:]:
            ms = ms + conv(fused)

        mean_map = ms.mean(axis=1, keepdims=True)
        max_map = ms.max(axis=1, keepdims=True)
        gate_s = F.sigmoid(self.spatial_conv(T.concat([mean_map, max_map], axis=1)))
        f_spatial = ms * gate_s

        gate_c = F.sigmoid(self.ch_fc2(F.relu(self.ch_fc1(F.pool(ms, "global_mean")))))
        f_channel = ms * gate_c
        return f_spatial + f_channel


def msaa_forward(f_prev, f_cur, f_next, module):
    return module(f_prev, f_cur, f_next)
