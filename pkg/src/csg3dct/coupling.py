"""3D feature coupling between CNN feature maps and token sequences, plus the dual head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .nn import BatchNorm3d, Conv3d, LayerNorm, Linear, Module


def resample_grid(x, size: int):
    """Bring the spatial grid of ``[N, C, T, H, W]`` to ``size x size``.

    Shrinking uses non-overlapping average pooling, growing uses nearest
    neighbour repetition; the ratio must be an integer.
    """
    H, W = x.shape[3:]
    if H != W:
        raise ValueError(f"square grids only, got {H}x{W}")
    if H == size:
        return x
    if H > size:
        if H % size:
            raise ValueError(f"cannot pool {H} to {size}")
        f = H // size
        return ops.avg_pool3d(x, (1, f, f))
    if size % H:
        raise ValueError(f"cannot upsample {H} to {size}")
    return ops.upsample_nearest3d(x, (1, size // H, size // H))


class FCUDown(Module):
    """CNN -> tokens: 1x1^2 projection to d, pool to the n x n grid, LayerNorm, add to patch tokens."""

    def __init__(self, channels: int, dim: int, stage: str = None, rng=None):
        super().__init__()
        self.proj = Conv3d(channels, dim, 1, rng=rng, stage=stage)
        self.norm = LayerNorm(dim)

    def forward(self, feat, z, t: int, n: int):
        N, C, T, H, W = feat.shape
        if T != t:
            raise ValueError(f"feature map has {T} frames but tokens have {t}")
        y = resample_grid(self.proj(feat), n)  # [N, d, T, n, n]
        d = y.shape[1]
        y = ops.reshape(ops.transpose(y, (0, 2, 3, 4, 1)), (N, T * n * n, d))
        y = self.norm(y)
        cls = ops.getitem(z, (slice(None), slice(0, 1)))
        patches = ops.getitem(z, (slice(None), slice(1, None)))
        return ops.concat([cls, ops.add(patches, y)], axis=1)


class FCUUp(Module):
    """Tokens -> CNN: per-frame grid reshape, resample to H x W, 1x1^2 projection to C, BN, add."""

    def __init__(self, dim: int, channels: int, stage: str = None, rng=None):
        super().__init__()
        self.proj = Conv3d(dim, channels, 1, rng=rng, stage=stage)
        self.bn = BatchNorm3d(channels)

    def forward(self, z, feat, t: int, n: int):
        N, L, d = z.shape
        H = feat.shape[3]
        grid = ops.reshape(ops.getitem(z, (slice(None), slice(1, None))), (N, t, n, n, d))
        grid = ops.transpose(grid, (0, 4, 1, 2, 3))  # [N, d, t, n, n]
        y = self.bn(self.proj(resample_grid(grid, H)))
        return ops.add(feat, y)


class ConvHead(Module):
    def __init__(self, channels: int, num_classes: int = 2, rng=None):
        super().__init__()
        self.fc = Linear(channels, num_classes, rng=rng)

    def forward(self, feat):
        return self.fc(ops.mean(feat, axis=(2, 3, 4)))


class TokenHead(Module):
    def __init__(self, dim: int, num_classes: int = 2, rng=None):
        super().__init__()
        self.norm = LayerNorm(dim)
        self.fc = Linear(dim, num_classes, rng=rng)

    def forward(self, z):
        return self.fc(self.norm(ops.getitem(z, (slice(None), 0))))


@dataclass
class Prediction:
    conv_logits: object
    token_logits: object
    logits: object
    probs: np.ndarray

    @property
    def labels(self) -> np.ndarray:
        return self.probs.argmax(axis=1)


def classify(c5_feat, z, conv_head: ConvHead, token_head: TokenHead) -> Prediction:
    """Average the two heads' logits; probabilities are their softmax."""
    conv_logits = conv_head(c5_feat)
    token_logits = token_head(z)
    logits = ops.mul(ops.add(conv_logits, token_logits), 0.5)
    probs = ops.softmax(logits, axis=-1).data
    return Prediction(conv_logits, token_logits, logits, probs)


def dual_head_loss(pred: Prediction, labels):
    """Cross-entropy applied to each head separately and summed."""
    return ops.add(ops.cross_entropy(pred.conv_logits, labels), ops.cross_entropy(pred.token_logits, labels))
