"""Feature fusion and mask-based extraction.

The fused feature keeps a fixed layout: [mixture, cues, speaker feature,
context feature] concatenated along channels in that order, always 4C wide.
Absent conditioning is replaced by a learned per-component null embedding, so
the extractor's input width never depends on which banks are configured and a
model trained with banks can run cue-only on the same weights.

Extraction is stateless across windows: the mask for a window is a function
of that window's fused features only.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn


class FeatureFusion(nn.Module):
    """Concatenate conditioning streams, substituting learned nulls."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.null_speaker = nn.Parameter(torch.zeros(channels))
        self.null_context = nn.Parameter(torch.zeros(channels))

    def forward(
        self,
        mixture: torch.Tensor,
        cues: torch.Tensor,
        speaker_feat: torch.Tensor | None = None,
        context_feat: torch.Tensor | None = None,
    ) -> torch.Tensor:
        if mixture.shape != cues.shape:
            raise ValueError("mixture and cue features must share (B, L, C)")
        b, l, c = mixture.shape
        if c != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {c}")
        if speaker_feat is None:
            speaker_feat = self.null_speaker.expand(b, l, c)
        elif speaker_feat.shape != mixture.shape:
            raise ValueError("speaker feature shape mismatch")
        if context_feat is None:
            context_feat = self.null_context.expand(b, l, c)
        elif context_feat.shape != mixture.shape:
            raise ValueError("context feature shape mismatch")
        return torch.cat([mixture, cues, speaker_feat, context_feat], dim=-1)


class TcnBlock(nn.Module):
    """Residual dilated conv block; normalization is per-position LayerNorm
    (no cross-window state, window-local statistics only)."""

    def __init__(self, channels: int, kernel: int, dilation: int):
        super().__init__()
        pad = (kernel - 1) * dilation // 2
        self.norm = nn.LayerNorm(channels)
        self.conv = nn.Conv1d(channels, channels, kernel, dilation=dilation, padding=pad)
        self.mix = nn.Conv1d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm(x).transpose(1, 2)
        h = F.gelu(self.conv(h))
        h = self.mix(h).transpose(1, 2)
        return x + h


class MaskEstimator(nn.Module):
    """Fused features -> multiplicative mask in (0, 1) over latent channels.

    A single linear projection folds the 4C fusion down to the backbone
    width, a small dilated conv stack spreads context across the window, and
    a sigmoid head bounds the mask.
    """

    def __init__(
        self,
        channels: int,
        backbone_channels: int = 64,
        blocks: int = 4,
        kernel: int = 3,
    ):
        super().__init__()
        self.input_proj = nn.Linear(4 * channels, backbone_channels)
        self.blocks = nn.ModuleList(
            TcnBlock(backbone_channels, kernel, 2**i) for i in range(blocks)
        )
        self.head_norm = nn.LayerNorm(backbone_channels)
        self.head = nn.Linear(backbone_channels, channels)

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        h = self.input_proj(fused)
        for block in self.blocks:
            h = block(h)
        return torch.sigmoid(self.head(self.head_norm(h)))


class Extractor(nn.Module):
    """fuse + mask + multiply: the window-level extraction core."""

    def __init__(
        self,
        channels: int,
        backbone_channels: int = 64,
        blocks: int = 4,
        kernel: int = 3,
    ):
        super().__init__()
        self.fusion = FeatureFusion(channels)
        self.mask_estimator = MaskEstimator(channels, backbone_channels, blocks, kernel)

    def forward(
        self,
        mixture: torch.Tensor,
        cues: torch.Tensor,
        speaker_feat: torch.Tensor | None = None,
        context_feat: torch.Tensor | None = None,
        mask_override: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (masked latents (B, L, C), mask (B, L, C))."""
        fused = self.fusion(mixture, cues, speaker_feat, context_feat)
        if mask_override is not None:
            mask = mask_override
        else:
            mask = self.mask_estimator(fused)
        if mask.shape != mixture.shape:
            raise ValueError("mask shape must match mixture latents")
        return mask * mixture, mask
