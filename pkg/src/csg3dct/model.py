"""The full convolution-transformer video classifier."""
from __future__ import annotations

import numpy as np

from .amdf import AmdfBlock, PatchEmbed
from .config import ModelConfig
from .coupling import ConvHead, FCUDown, FCUUp, Prediction, TokenHead, classify, dual_head_loss
from .encoder import ConvEncoder
from .nn import Conv3d, Module, ModuleList
from .tensor import Tensor


class CSG3DCT(Module):
    """CNN branch (stem + c2-c5) coupled to an AMDF transformer branch.

    The transformer has one block after tokenisation plus one per conv block
    (L + 1 vs L). Within a stage the order is: conv block, FCU down (CNN ->
    tokens), AMDF block, FCU up (tokens -> CNN).
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = ConvEncoder(cfg, rng=rng)
        d, n = cfg.embed_dim, cfg.grid
        self.patch_embed = PatchEmbed(cfg.channels[0], d, cfg.patch_size, n, cfg.max_frames, rng=rng)
        self.amdf = ModuleList([AmdfBlock(d, cfg.heads, cfg.mlp_ratio, cfg.fusion, rng=rng)])
        self.fcu_down = ModuleList()
        self.fcu_up = ModuleList()
        for sc in cfg.stages()[1:]:
            for _ in range(sc.blocks):
                self.fcu_down.append(FCUDown(sc.channels, d, stage=sc.stage, rng=rng))
                self.amdf.append(AmdfBlock(d, cfg.heads, cfg.mlp_ratio, cfg.fusion, rng=rng))
                self.fcu_up.append(FCUUp(d, sc.channels, stage=sc.stage, rng=rng))
        self.conv_head = ConvHead(cfg.channels[-1], cfg.num_classes, rng=rng)
        self.token_head = TokenHead(d, cfg.num_classes, rng=rng)

    @property
    def num_conv_blocks(self) -> int:
        return len(self.encoder.blocks())

    def conv_layers(self) -> list:
        """(parameter name of the weight, Conv3d) for every convolution in the model."""
        return [(f"{name}weight", mod) for name, mod in self.named_modules() if isinstance(mod, Conv3d)]

    def features(self, clip: Tensor):
        """Run both branches; returns (c1..c5 feature maps, final tokens)."""
        self.encoder.check_input(clip)
        T = clip.shape[2]
        n = self.cfg.grid
        x = self.encoder.stem(clip)
        feats = [x]
        z = self.amdf[0](self.patch_embed(x), T, n)
        i = 0
        for stage in self.encoder.stages:
            for blk in stage:
                x = blk(x)
                z = self.fcu_down[i](x, z, T, n)
                z = self.amdf[i + 1](z, T, n)
                x = self.fcu_up[i](z, x, T, n)
                i += 1
            feats.append(x)
        return feats, z

    def forward(self, clip: Tensor) -> Prediction:
        feats, z = self.features(clip)
        return classify(feats[-1], z, self.conv_head, self.token_head)

    def loss(self, clip: Tensor, labels) -> tuple:
        pred = self.forward(clip)
        return dual_head_loss(pred, labels), pred
