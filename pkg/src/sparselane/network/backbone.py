"""Shared convolutional backbone with an auxiliary segmentation head.

A 4-stage strided network producing feature maps at strides (8, 16, 32, 64),
each projected to the decoder dimension by a 1x1 conv.  GroupNorm keeps the
statistics deterministic at desk-scale batch sizes.  The segmentation head
emits per-pixel binary lane logits at stride 8 during training.
"""

from __future__ import annotations

import torch
import torch.nn as nn


def _conv_block(in_ch, out_ch, stride):
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1),
        nn.GroupNorm(min(8, out_ch), out_ch),
        nn.ReLU(inplace=True),
    )


class ConvBackbone(nn.Module):
    STRIDES = (8, 16, 32, 64)

    def __init__(self, in_channels=1, feature_dim=64, stem_channels=(16, 32, 48),
                 stage_channels=(48, 64, 96, 128)):
        super().__init__()
        c = stem_channels
        self.stem = nn.Sequential(
            _conv_block(in_channels, c[0], 2),
            _conv_block(c[0], c[1], 2),
            _conv_block(c[1], c[2], 2),
        )
        self.stage1 = _conv_block(c[2], stage_channels[0], 1)  # stride 8
        self.stage2 = _conv_block(stage_channels[0], stage_channels[1], 2)
        self.stage3 = _conv_block(stage_channels[1], stage_channels[2], 2)
        self.stage4 = _conv_block(stage_channels[2], stage_channels[3], 2)
        self.projections = nn.ModuleList(
            nn.Conv2d(ch, feature_dim, 1) for ch in stage_channels)
        self.seg_head = nn.Sequential(
            nn.Conv2d(stage_channels[0], 32, 3, padding=1),
            nn.GroupNorm(8, 32),
            nn.ReLU(inplace=True),
            nn.Conv2d(32, 1, 1),
        )

    def forward(self, image: torch.Tensor):
        """image: (B, C, H, W) with H, W divisible by 8.

        Returns (pyramid, seg_logits): pyramid is a list of 4 maps
        (B, D, H_l, W_l) at strides 8/16/32/64; seg_logits is (B, 1, H/8, W/8).
        """
        if image.shape[-2] % 8 or image.shape[-1] % 8:
            raise ValueError(
                f"input size {tuple(image.shape[-2:])} must be divisible by 8")
        x = self.stem(image)
        s1 = self.stage1(x)
        s2 = self.stage2(s1)
        s3 = self.stage3(s2)
        s4 = self.stage4(s3)
        pyramid = [proj(s) for proj, s in zip(self.projections, (s1, s2, s3, s4))]
        return pyramid, self.seg_head(s1)
