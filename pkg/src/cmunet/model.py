"""U-shaped segmentation network: residual CNN encoder, multi-scale
attention skips, gated-SSM decoder, multi-output heads."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, DimensionError
from . import functional as F
from . import nn
from . import tensor as T
from .blocks import CSMambaBlock, CsMambaBlockConfig, MSAA, MsaaConfig
from .tensor import Tensor


@dataclass
class ModelConfig:
    """Every architectural free parameter in one serializable record."""

    encoder_channels: tuple = (16, 32, 64, 128)
    blocks_per_stage: tuple = (2, 2, 2, 2)
    decoder_csmamba_per_stage: int = 1
    num_classes: int = 4
    expansion: float = 2.0
    state_size: int = 8
    merge_mode: str = "sum"
    share_directions: bool = False
    residual: bool = True
    msaa_reduction: int = 4
    msaa_kernels: tuple = (3, 5, 7)
    msaa_spatial_kernel: int = 7
    aux_weight: float = 0.4
    included_classes: tuple = None
    use_msaa: bool = True
    multi_output: bool = True

    def __post_init__(self):
        if len(self.encoder_channels) != 4 or len(self.blocks_per_stage) != 4:
            raise ConfigError("ModelConfig: encoder needs 4 stages")
        if self.num_classes < 2:
            raise ConfigError("ModelConfig: num_classes must be >= 2")
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.blocks_per_stage = tuple(int(b) for b in self.blocks_per_stage)
        self.msaa_kernels = tuple(int(k) for k in self.msaa_kernels)
        if self.included_classes is not None:
            self.included_classes = tuple(int(c) for c in self.included_classes)

    @classmethod
    def mini(cls, **kw):
        return cls(**kw)

    @classmethod
    def paper_scale(cls, num_classes=6, **kw):
        kw.setdefault("encoder_channels", (64, 128, 256, 512))
        kw.setdefault("state_size", 16)
        return cls(num_classes=num_classes, **kw)

    def skip_channels(self, level):
        """Decoder width at pyramid level 0..2 (the fused-skip width)."""
        return 3 * self.encoder_channels[level] // self.msaa_reduction

    def csmamba_config(self, level):
        return CsMambaBlockConfig(
            channels=self.skip_channels(level), expansion=self.expansion,
            state_size=self.state_size, merge_mode=self.merge_mode,
            share_directions=self.share_directions, residual=self.residual)

    def msaa_config(self, level):
        return MsaaConfig(in_channels=3 * self.encoder_channels[level],
                          reduction=self.msaa_reduction,
                          kernel_set=self.msaa_kernels,
                          spatial_kernel=self.msaa_spatial_kernel)

    def metric_classes(self):
        if self.included_classes is None:
            return tuple(range(self.num_classes))
        return self.included_classes

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"ModelConfig: unknown keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class FeaturePyramid:
    """Encoder stage outputs at strides 4, 8, 16, 32."""

    f1: Tensor
    f2: Tensor
    f3: Tensor
    f4: Tensor

    def levels(self):
        return [self.f1, self.f2, self.f3, self.f4]


@dataclass
class ModelOutputs:
    final_logits: Tensor       # [B, K, H, W] at input resolution
    aux_logits: list = field(default_factory=list)


class BasicBlock(nn.Module):
    """Two 3x3 convs with batch norm and an identity or projected shortcut."""

    def __init__(self, cin, cout, stride=1, dtype=T.REAL32, rng=None):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False,
                               dtype=dtype, rng=rng)
        self.bn1 = nn.BatchNorm2d(cout, dtype=dtype)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False, dtype=dtype, rng=rng)
        self.bn2 = nn.BatchNorm2d(cout, dtype=dtype)
        if stride != 1 or cin != cout:
            self.proj = nn.Conv2d(cin, cout, 1, stride=stride, bias=False, dtype=dtype, rng=rng)
            self.proj_bn = nn.BatchNorm2d(cout, dtype=dtype)
        else:
            self.proj = None

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        shortcut = self.proj_bn(self.proj(x)) if self.proj is not None else x
        return F.relu(h + shortcut)


class Encoder(nn.Module):
    """Residual trunk producing the four-level feature pyramid."""

    def __init__(self, channels, blocks_per_stage, dtype=T.REAL32, rng=None):
        super().__init__()
        c1 = channels[0]
        self.stem_conv = nn.Conv2d(3, c1, 7, stride=2, padding=3, bias=False,
                                   dtype=dtype, rng=rng)
        self.stem_bn = nn.BatchNorm2d(c1, dtype=dtype)
        self.stages = nn.ModuleList()
        cin = c1
        for i, (cout, depth) in enumerate(zip(channels, blocks_per_stage)):
            blocks = []
            for j in range(depth):
                stride = 2 if (i > 0 and j == 0) else 1
                blocks.append(BasicBlock(cin, cout, stride, dtype=dtype, rng=rng))
                cin = cout
            self.stages.append(nn.Sequential(*blocks))

    def forward(self, x):
        _, _, h, w = x.data.shape
        if h % 32 or w % 32:
            raise DimensionError(f"encoder: input {h}x{w} not divisible by 32")
        h0 = F.relu(self.stem_bn(self.stem_conv(x)))
        h0 = F.pool(h0, "max", 3, 2, padding=1)
        feats = []
        cur = h0
        for stage in self.stages:
            cur = stage(cur)
            feats.append(cur)
        return FeaturePyramid(*feats)


def encoder_forward(x, encoder):
    return encoder(x)


class DecoderStage(nn.Module):
    """Upsample the deep feature 2x, project, add the fused skip, refine."""

    def __init__(self, deep_channels, skip_channels, cfg: CsMambaBlockConfig,
                 n_blocks=1, dtype=T.REAL32, rng=None):
        super().__init__()
        self.proj = nn.Conv2d(deep_channels, skip_channels, 1, dtype=dtype, rng=rng)
        self.blocks = nn.ModuleList(
            [CSMambaBlock(cfg, dtype=dtype, rng=rng) for _ in range(n_blocks)])

    def forward(self, deep, skip):
        _, _, sh, sw = skip.data.shape
        _, _, dh, dw = deep.data.shape
        if (sh, sw) != (2 * dh, 2 * dw):
            raise DimensionError(
                f"decoder stage: skip {sh}x{sw} must be twice deep {dh}x{dw}")
        h = self.proj(F.resize(deep, (sh, sw), "bilinear")) + skip
        for blk in self.blocks:
            h = blk(h)
        return h


def decoder_stage_forward(deep, skip, stage):
    return stage(deep, skip)


class CMUNet(nn.Module):
    """Full network. Decoder stages run at the F3, F2 and F1 resolutions;
    each stage has a 1x1 aux head, and the final head follows a 4x bilinear
    upsample back to the input resolution."""

    def __init__(self, config: ModelConfig = None, dtype=T.REAL32, rng=None):
        super().__init__()
        cfg = config or ModelConfig()
        self.config = cfg
        ch = cfg.encoder_channels
        k = cfg.num_classes
        self.encoder = Encoder(ch, cfg.blocks_per_stage, dtype=dtype, rng=rng)

        # fused skips at levels F3, F2, F1 (decoder consumes deepest first)
        if cfg.use_msaa:
            self.skip3 = MSAA(ch[1], ch[2], ch[3], cfg.msaa_config(2), dtype=dtype, rng=rng)
            self.skip2 = MSAA(ch[0], ch[1], ch[2], cfg.msaa_config(1), dtype=dtype, rng=rng)
            self.skip1 = MSAA(ch[0], ch[0], ch[1], cfg.msaa_config(0), dtype=dtype, rng=rng)
        else:
            self.skip3 = nn.Conv2d(ch[2], cfg.skip_channels(2), 1, dtype=dtype, rng=rng)
            self.skip2 = nn.Conv2d(ch[1], cfg.skip_channels(1), 1, dtype=dtype, rng=rng)
            self.skip1 = nn.Conv2d(ch[0], cfg.skip_channels(0), 1, dtype=dtype, rng=rng)

        n = cfg.decoder_csmamba_per_stage
        self.stage1 = DecoderStage(ch[3], cfg.skip_channels(2), cfg.csmamba_config(2),
                                   n, dtype=dtype, rng=rng)
        self.stage2 = DecoderStage(cfg.skip_channels(2), cfg.skip_channels(1),
                                   cfg.csmamba_config(1), n, dtype=dtype, rng=rng)
        self.stage3 = DecoderStage(cfg.skip_channels(1), cfg.skip_channels(0),
                                   cfg.csmamba_config(0), n, dtype=dtype, rng=rng)

        self.aux_heads = nn.ModuleList(
            [nn.Conv2d(cfg.skip_channels(level), k, 1, dtype=dtype, rng=rng)
             for level in (2, 1, 0)])
        self.final_head = nn.Conv2d(cfg.skip_channels(0), k, 1, dtype=dtype, rng=rng)

    def _skips(self, pyr: FeaturePyramid):
        if self.config.use_msaa:
            # missing neighbor at the shallow end duplicates the level itself
            return (self.skip1(pyr.f1, pyr.f1, pyr.f2),
                    self.skip2(pyr.f1, pyr.f2, pyr.f3),
                    self.skip3(pyr.f2, pyr.f3, pyr.f4))
        return self.skip1(pyr.f1), self.skip2(pyr.f2), self.skip3(pyr.f3)

    def forward(self, x):
        _, _, h, w = x.data.shape
        pyr = self.encoder(x)
        s1, s2, s3 = self._skips(pyr)
        d = self.stage1(pyr.f4, s3)
        aux = [self.aux_heads[0](d)]
        d = self.stage2(d, s2)
        aux.append(self.aux_heads[1](d))
        d = self.stage3(d, s1)
        aux.append(self.aux_heads[2](d))
        final = self.final_head(F.resize(d, (h, w), "bilinear"))
        return ModelOutputs(final_logits=final,
                            aux_logits=aux if self.config.multi_output else [])

    def parameter_breakdown(self):
        """Per-component parameter counts, registry-deduplicated."""
        groups = {"encoder": self.encoder,
                  "skips": [self.skip1, self.skip2, self.skip3],
                  "decoder": [self.stage1, self.stage2, self.stage3],
                  "heads": [*self.aux_heads, self.final_head]}
        out = {}
        for name, mods in groups.items():
            mods = mods if isinstance(mods, list) else [mods]
            seen = set()
            total = 0
            for m in mods:
                for _, p in m.named_parameters():
                    if id(p) not in seen:
                        seen.add(id(p))
                        total += p.data.size
            out[name] = total
        return out


def model_forward(x, model):
    return model(x)


def count_parameters(model):
    return nn.count_parameters(model)


def build_model(config: ModelConfig, seed=None, dtype=T.REAL32):
    """Construct a model with reproducible initialization."""
    rng = np.random.default_rng(seed) if seed is not None else None
    return CMUNet(config, dtype=dtype, rng=rng)
