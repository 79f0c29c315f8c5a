"""Attention-guided multi-dimension fusion (AMDF) transformer encoder.

Token layout is ``[N, 1 + t * n^2, d]``: CLS at index 0, then patch tokens in
frame-major order (index ``1 + f * n^2 + p`` for frame ``f``, grid cell ``p``).
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

from . import ops
from .nn import Conv3d, LayerNorm, Linear, Module, Parameter, trunc_normal
from .tensor import get_default_dtype

SPATIAL = "spatial"
TEMPORAL = "temporal"

_CAPTURE: list = []


@contextlib.contextmanager
def capture_attention():
    """Collect every attention map and branch-mixing weight pair computed inside the block.

    Yields a dict with lists under ``"maps"`` (numpy arrays, softmax axis last)
    and ``"mix"`` (numpy arrays of shape (2,)).
    """
    record = {"maps": [], "mix": []}
    _CAPTURE.append(record)
    try:
        yield record
    finally:
        _CAPTURE.remove(record)


def _capture(kind: str, value: np.ndarray) -> None:
    for record in _CAPTURE:
        record[kind].append(value)


def split_tokens(z, t: int, n: int):
    """``[N, L, d]`` -> (CLS ``[N, 1, d]``, patches ``[N, t, n^2, d]``)."""
    N, L, d = z.shape
    if L != t * n * n + 1:
        raise ValueError(f"token sequence length {L} != t*n^2+1 = {t * n * n + 1}")
    return ops.getitem(z, (slice(None), slice(0, 1))), ops.reshape(ops.getitem(z, (slice(None), slice(1, None))),
                                                                    (N, t, n * n, d))


def merge_tokens(cls, patches):
    N, t, s, d = patches.shape
    return ops.concat([cls, ops.reshape(patches, (N, t * s, d))], axis=1)


class PatchEmbed(Module):
    """Non-overlapping p x p projection of stem features, CLS prepended, positional tables added.

    The temporal table has ``max_frames`` rows and the first ``t`` are used, so
    parameters do not depend on the clip length.
    """

    def __init__(self, in_channels: int, dim: int, patch: int, grid: int, max_frames: int, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng()
        dtype = get_default_dtype()
        self.patch = patch
        self.grid = grid
        self.proj = Conv3d(in_channels, dim, (1, patch, patch), stride=(1, patch, patch), bias=True,
                           rng=rng, stage="c1")
        self.cls_token = Parameter(trunc_normal(rng, (dim,), 0.02, dtype))
        self.pos_spatial = Parameter(trunc_normal(rng, (grid * grid, dim), 0.02, dtype))
        self.pos_temporal = Parameter(trunc_normal(rng, (max_frames, dim), 0.02, dtype))

    def forward(self, x):
        N, C, T, H, W = x.shape
        if H % self.patch or W % self.patch or H // self.patch != self.grid or W // self.patch != self.grid:
            raise ValueError(f"stem grid {H}x{W} does not split into {self.grid}x{self.grid} patches of {self.patch}")
        if T > self.pos_temporal.shape[0]:
            raise ValueError(f"{T} frames exceed the temporal table ({self.pos_temporal.shape[0]})")
        d = self.cls_token.shape[0]
        y = self.proj(x)  # [N, d, T, n, n]
        y = ops.reshape(ops.transpose(y, (0, 2, 3, 4, 1)), (N, T, self.grid * self.grid, d))
        y = ops.add(y, ops.reshape(self.pos_spatial, (1, 1, self.grid * self.grid, d)))
        pos_t = ops.getitem(self.pos_temporal, slice(0, T))
        y = ops.add(y, ops.reshape(pos_t, (1, T, 1, d)))
        cls = ops.broadcast_to(ops.reshape(self.cls_token, (1, 1, d)), (N, 1, d))
        return merge_tokens(cls, y)


def _heads(x, heads: int):
    """[N, L, d] -> [N, h, L, d/h]."""
    N, L, d = x.shape
    return ops.transpose(ops.reshape(x, (N, L, heads, d // heads)), (0, 2, 1, 3))


def _unheads(x):
    N, h, L, dh = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (N, L, h * dh))


def attend(q, k, v, tag: str = "attn"):
    """softmax(q k^T / sqrt(d_h)) v over the last two axes; q is pre-split into heads."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = ops.matmul(ops.mul(q, scale), ops.swapaxes(k, -1, -2), tag=f"{tag}_qk")
    attn = ops.softmax(scores, axis=-1)
    _capture("maps", attn.data)
    return ops.matmul(attn, v, tag=f"{tag}_av"), attn


def factorized_attention(q, k, v, t: int, n: int, axis: str):
    """Multi-head attention restricted to one frame (spatial) or one grid cell (temporal).

    q, k, v are ``[N, h, L, dh]``. Each patch query sees CLS plus the patch
    tokens sharing its frame (spatial) or its grid position (temporal); the CLS
    query sees every token.
    """
    N, h, L, dh = q.shape
    s = n * n

    def groups(x):
        x = ops.reshape(ops.getitem(x, (slice(None), slice(None), slice(1, None))), (N, h, t, s, dh))
        return ops.transpose(x, (0, 1, 3, 2, 4)) if axis == TEMPORAL else x

    def cls_kv(x, g):
        c = ops.reshape(ops.getitem(x, (slice(None), slice(None), slice(0, 1))), (N, h, 1, 1, dh))
        return ops.broadcast_to(c, (N, h, g, 1, dh))

    q_cls = ops.getitem(q, (slice(None), slice(None), slice(0, 1)))
    out_cls, _ = attend(q_cls, k, v, tag="attn_cls")

    qp, kp, vp = groups(q), groups(k), groups(v)
    g = qp.shape[2]
    keys = ops.concat([cls_kv(k, g), kp], axis=3)
    vals = ops.concat([cls_kv(v, g), vp], axis=3)
    out_p, _ = attend(qp, keys, vals, tag=f"attn_{axis}")
    if axis == TEMPORAL:
        out_p = ops.transpose(out_p, (0, 1, 3, 2, 4))
    out_p = ops.reshape(out_p, (N, h, t * s, dh))
    return ops.concat([out_cls, out_p], axis=2)


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng=None):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng=rng)
        self.fc2 = Linear(hidden, dim, rng=rng)

    def forward(self, x):
        return self.fc2(ops.gelu(self.fc1(x)))


class IntraBranch(Module):
    """Pre-norm MHSA (factorized along one axis) and FFN, both residual."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, axis: str, rng=None):
        super().__init__()
        if axis not in (SPATIAL, TEMPORAL):
            raise ValueError(f"axis must be spatial or temporal, got {axis!r}")
        self.axis = axis
        self.heads = heads
        self.norm1 = LayerNorm(dim)
        self.qkv = Linear(dim, 3 * dim, rng=rng)
        self.proj = Linear(dim, dim, rng=rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, dim * mlp_ratio, rng=rng)

    def attention(self, z, t: int, n: int):
        N, L, d = z.shape
        qkv = ops.transpose(ops.reshape(self.qkv(self.norm1(z)), (N, L, 3, self.heads, d // self.heads)),
                            (2, 0, 3, 1, 4))
        q, k, v = (ops.getitem(qkv, i) for i in range(3))
        return self.proj(_unheads(factorized_attention(q, k, v, t, n, self.axis)))

    def forward(self, z, t: int, n: int):
        z = ops.add(z, self.attention(z, t, n))
        return ops.add(z, self.mlp(self.norm2(z)))


class FusionAttention(Module):
    """Projections owned by one branch for inter-dimension fusion.

    ``norm``/``q``/``k``/``v`` act on the branch's own tokens; ``norm_kv`` is
    applied to the complementary branch's tokens when this branch queries them
    with its CLS token.
    """

    def __init__(self, dim: int, heads: int, rng=None):
        super().__init__()
        self.heads = heads
        self.norm = LayerNorm(dim)
        self.norm_kv = LayerNorm(dim)
        self.q = Linear(dim, dim, rng=rng)
        self.k = Linear(dim, dim, rng=rng)
        self.v = Linear(dim, dim, rng=rng)
        self.proj = Linear(dim, dim, rng=rng)

    def own_qk(self, z):
        zn = self.norm(z)
        return _heads(self.q(zn), self.heads), _heads(self.k(zn), self.heads)

    def own_v(self, z):
        return _heads(self.v(self.norm(z)), self.heads)


def swa_fusion(z_s, z_t, fuse_s: FusionAttention, fuse_t: FusionAttention):
    """Switched attention: each branch keeps its attention map and reads the other's values."""
    q_s, k_s = fuse_s.own_qk(z_s)
    q_t, k_t = fuse_t.own_qk(z_t)
    v_s, v_t = fuse_s.own_v(z_s), fuse_t.own_v(z_t)
    out_s, _ = attend(q_s, k_s, v_t, tag="swa")
    out_t, _ = attend(q_t, k_t, v_s, tag="swa")
    return (ops.add(z_s, fuse_s.proj(_unheads(out_s))),
            ops.add(z_t, fuse_t.proj(_unheads(out_t))))


def ca_fusion(z_target, z_comp, fuse: FusionAttention):
    """Cross attention with the target's CLS as the only query.

    Keys and values come from every token of ``z_comp`` (its own CLS
    included). Only the target CLS is updated; patch tokens pass through.
    """
    N, L, d = z_target.shape
    if z_comp.shape != z_target.shape:
        raise ValueError(f"ca_fusion: target {z_target.shape} and complementary {z_comp.shape} differ")
    cls = ops.getitem(z_target, (slice(None), slice(0, 1)))
    q = _heads(fuse.q(fuse.norm(cls)), fuse.heads)
    zc = fuse.norm_kv(z_comp)
    k, v = _heads(fuse.k(zc), fuse.heads), _heads(fuse.v(zc), fuse.heads)
    out, _ = attend(q, k, v, tag="ca")
    cls = ops.add(cls, fuse.proj(_unheads(out)))
    return ops.concat([cls, ops.getitem(z_target, (slice(None), slice(1, None)))], axis=1)


def full_cross_attention(z_target, z_comp, fuse: FusionAttention):
    """Every target token queries ``z_comp``; the reference CA is checked against."""
    q = _heads(fuse.q(fuse.norm(z_target)), fuse.heads)
    zc = fuse.norm_kv(z_comp)
    k, v = _heads(fuse.k(zc), fuse.heads), _heads(fuse.v(zc), fuse.heads)
    out, _ = attend(q, k, v, tag="full_ca")
    return ops.add(z_target, fuse.proj(_unheads(out)))


class AmdfBlock(Module):
    """Parallel spatial/temporal branches, optional fusion, learnable branch mixing."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, fusion: str = "ca", rng=None):
        super().__init__()
        fusion = fusion.lower()
        if fusion not in ("swa", "ca", "none"):
            raise ValueError(f"unknown fusion mode {fusion!r}")
        self.fusion = fusion
        self.spatial = IntraBranch(dim, heads, mlp_ratio, SPATIAL, rng=rng)
        self.temporal = IntraBranch(dim, heads, mlp_ratio, TEMPORAL, rng=rng)
        if fusion != "none":
            self.fuse_s = FusionAttention(dim, heads, rng=rng)
            self.fuse_t = FusionAttention(dim, heads, rng=rng)
        # softmax-normalised branch logits (a_s, a_t), equal at init
        self.mix = Parameter(np.zeros(2, get_default_dtype()))

    def mixing_weights(self):
        return ops.softmax(self.mix, axis=0)

    def fuse(self, z_s, z_t):
        if self.fusion == "swa":
            return swa_fusion(z_s, z_t, self.fuse_s, self.fuse_t)
        if self.fusion == "ca":
            return ca_fusion(z_s, z_t, self.fuse_s), ca_fusion(z_t, z_s, self.fuse_t)
        return z_s, z_t

    def forward(self, z, t: int, n: int):
        z_s = self.spatial(z, t, n)
        z_t = self.temporal(z, t, n)
        z_s, z_t = self.fuse(z_s, z_t)
        w = self.mixing_weights()
        _capture("mix", w.data)
        return ops.add(ops.mul(z_s, ops.getitem(w, 0)), ops.mul(z_t, ops.getitem(w, 1)))
