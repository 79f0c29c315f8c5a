"""3D CNN branch: stem (c1) and residual bottleneck stages c2-c5.

Temporal stride is 1 everywhere and temporal padding is (t - 1) / 2, so every
stage output keeps the input frame count.
"""
from __future__ import annotations

import numpy as np

from . import ops
from .config import ModelConfig
from .nn import BatchNorm3d, Conv3d, Module, ModuleList


class Stem(Module):
    """5x5 conv (stride 2) + BN + relu + 3x3 max-pool (stride 2); temporal kernel 1."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 5, rng=None):
        super().__init__()
        self.conv = Conv3d(in_channels, out_channels, (1, kernel, kernel), stride=(1, 2, 2),
                           padding=(0, kernel // 2, kernel // 2), rng=rng, stage="c1")
        self.bn = BatchNorm3d(out_channels)

    def forward(self, x):
        x = ops.relu(self.bn(self.conv(x)))
        return ops.max_pool3d(x, (1, 3, 3), stride=(1, 2, 2), padding=(0, 1, 1))


class ConvBlock(Module):
    """Bottleneck residual block: 1x1^2 -> t x 3^2 (spatially strided) -> 1x1^2, plus shortcut."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1, temporal_kernel: int = 1,
                 bottleneck_ratio: int = 4, stage: str = "c2", rng=None):
        super().__init__()
        mid = max(out_channels // bottleneck_ratio, 1)
        t = temporal_kernel
        self.stage = stage
        self.conv1 = Conv3d(in_channels, mid, 1, rng=rng, stage=stage)
        self.bn1 = BatchNorm3d(mid)
        self.conv2 = Conv3d(mid, mid, (t, 3, 3), stride=(1, stride, stride), padding=((t - 1) // 2, 1, 1),
                            rng=rng, stage=stage)
        self.bn2 = BatchNorm3d(mid)
        self.conv3 = Conv3d(mid, out_channels, 1, rng=rng, stage=stage)
        self.bn3 = BatchNorm3d(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.shortcut_conv = Conv3d(in_channels, out_channels, 1, stride=(1, stride, stride),
                                        rng=rng, stage=stage)
            self.shortcut_bn = BatchNorm3d(out_channels)
        else:
            self.shortcut_conv = None

    @property
    def temporal_kernel(self) -> int:
        return self.conv2.kernel_size[0]

    def residual(self, x):
        y = ops.relu(self.bn1(self.conv1(x)))
        y = ops.relu(self.bn2(self.conv2(y)))
        return self.bn3(self.conv3(y))

    def shortcut(self, x):
        if self.shortcut_conv is None:
            return x
        return self.shortcut_bn(self.shortcut_conv(x))

    def forward(self, x):
        return ops.relu(ops.add(self.shortcut(x), self.residual(x)))


class ConvEncoder(Module):
    """Stem plus stages c2-c5; ``forward`` returns the c1..c5 feature maps."""

    def __init__(self, cfg: ModelConfig, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng()
        self.cfg = cfg
        self.stem = Stem(cfg.in_channels, cfg.channels[0], cfg.stem_kernel, rng=rng)
        self.stages = ModuleList()
        in_ch = cfg.channels[0]
        for sc in cfg.stages()[1:]:
            blocks = ModuleList()
            for b in range(sc.blocks):
                blocks.append(ConvBlock(in_ch, sc.channels, stride=sc.stride if b == 0 else 1,
                                        temporal_kernel=sc.temporal_kernel,
                                        bottleneck_ratio=cfg.bottleneck_ratio, stage=sc.stage, rng=rng))
                in_ch = sc.channels
            self.stages.append(blocks)

    def blocks(self) -> list:
        return [blk for stage in self.stages for blk in stage]

    def check_input(self, clip) -> None:
        if clip.ndim != 5:
            raise ValueError(f"clip must be [N, C, T, H, W], got {clip.shape}")
        _, c, _, h, w = clip.shape
        if c != self.cfg.in_channels:
            raise ValueError(f"clip has {c} channels, model expects {self.cfg.in_channels}")
        if h % ModelConfig.STEM_STRIDE or w % ModelConfig.STEM_STRIDE:
            raise ValueError(f"spatial size {h}x{w} not divisible by the stem stride {ModelConfig.STEM_STRIDE}")

    def forward(self, clip) -> list:
        self.check_input(clip)
        x = self.stem(clip)
        outs = [x]
        for stage in self.stages:
            for blk in stage:
                x = blk(x)
            outs.append(x)
        return outs


def valid_temporal_range(cfg: ModelConfig, frames: int) -> list:
    """Per stage (c1..c5), the frame indices untouched by temporal zero padding.

    Each block with temporal kernel t erodes (t - 1) / 2 frames from both ends.
    """
    ranges = [(0, frames)]
    lo, hi = 0, frames
    for sc in cfg.stages()[1:]:
        r = (sc.temporal_kernel - 1) // 2
        lo, hi = lo + r * sc.blocks, hi - r * sc.blocks
        ranges.append((lo, max(hi, lo)))
    return ranges
