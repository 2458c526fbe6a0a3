"""Waveform/cue encoders and the waveform decoder.

Framing convention, used everywhere a waveform meets the latent grid: the
input is right-zero-padded to a hop multiple and analyzed with a centered
two-hop window per step, so a T-sample waveform becomes exactly ceil(T/hop)
latent steps. With the default 160-sample hop (10 ms at 16 kHz) the 25 fps cue
stream upsamples to the latent rate by an exact factor of four.

One SpeechEncoder instance serves every call site that needs a latent speech
representation (mixture windows, stored reference segments, training memory
segments); sharing the instance is what makes those encodings consistent.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def latent_len(n_samples: int, hop: int) -> int:
    return -(-n_samples // hop)


class SpeechEncoder(nn.Module):
    """Strided 1-D conv front end: (B, T) waveform -> (B, L, C) latents."""

    def __init__(self, channels: int = 64, hop: int = 160):
        super().__init__()
        if hop % 2 != 0:
            raise ValueError("hop must be even")
        self.channels = channels
        self.hop = hop
        self.conv = nn.Conv1d(1, channels, kernel_size=2 * hop, stride=hop, padding=hop // 2)

    def forward(self, wave: torch.Tensor) -> torch.Tensor:
        if wave.ndim != 2:
            raise ValueError("expected (batch, samples)")
        if wave.shape[-1] < 1:
            raise ValueError("empty waveform")
        n = wave.shape[-1]
        target = latent_len(n, self.hop) * self.hop
        if target > n:
            wave = F.pad(wave, (0, target - n))
        h = self.conv(wave.unsqueeze(1))
        return F.gelu(h).transpose(1, 2)


class CueEncoder(nn.Module):
    """Frame-rate cue features -> latent-rate conditioning sequence.

    A per-frame MLP followed by nearest-neighbor upsampling to the requested
    latent length (an exact repeat when the ratio is an integer, as with
    25 fps against a 10 ms hop).
    """

    def __init__(self, cue_dim: int = 8, channels: int = 64):
        super().__init__()
        self.cue_dim = cue_dim
        self.proj = nn.Sequential(
            nn.Linear(cue_dim, channels),
            nn.GELU(),
            nn.Linear(channels, channels),
        )

    def forward(self, frames: torch.Tensor, target_len: int) -> torch.Tensor:
        if frames.ndim != 3 or frames.shape[-1] != self.cue_dim:
            raise ValueError("expected (batch, frames, cue_dim)")
        if frames.shape[1] < 1:
            raise ValueError("empty cue stream")
        if target_len < 1:
            raise ValueError("target length must be positive")
        h = self.proj(frames)
        h = F.interpolate(h.transpose(1, 2), size=target_len, mode="nearest")
        return h.transpose(1, 2)


class SpeakerEncoder(nn.Module):
    """Statistics-pooling speaker embedding with unit-norm output.

    Input is RMS-normalized first, so the embedding depends on the segment's
    shape, not its absolute scale (streamed estimates can be many orders of
    magnitude quieter than training material).
    """

    def __init__(self, channels: int = 64, hidden: int = 32, win: int = 400, hop: int = 160):
        super().__init__()
        self.win = win
        self.frontend = nn.Conv1d(1, hidden, kernel_size=win, stride=hop)
        self.refine = nn.Conv1d(hidden, hidden, kernel_size=3, dilation=2, padding=2)
        self.out = nn.Linear(2 * hidden, channels)

    def forward(self, wave: torch.Tensor) -> torch.Tensor:
        if wave.ndim != 2:
            raise ValueError("expected (batch, samples)")
        if wave.shape[-1] < self.win:
            raise ValueError(f"segment shorter than one analysis window ({self.win} samples)")
        rms = wave.pow(2).mean(dim=-1, keepdim=True).sqrt()
        wave = wave / rms.clamp_min(1e-12)
        h = F.gelu(self.frontend(wave.unsqueeze(1)))
        h = F.gelu(self.refine(h))
        mean = h.mean(dim=-1)
        std = (h.var(dim=-1, unbiased=False) + 1e-5).sqrt()
        emb = self.out(torch.cat([mean, std], dim=-1))
        return emb / (emb.norm(dim=-1, keepdim=True) + 1e-8)


class SpeechDecoder(nn.Module):
    """Transposed-conv overlap-add back to the waveform, cut to target_len."""

    def __init__(self, channels: int = 64, hop: int = 160):
        super().__init__()
        if hop % 2 != 0:
            raise ValueError("hop must be even")
        self.hop = hop
        self.deconv = nn.ConvTranspose1d(channels, 1, kernel_size=2 * hop, stride=hop)

    def forward(self, latents: torch.Tensor, target_len: int) -> torch.Tensor:
        if latents.ndim != 3:
            raise ValueError("expected (batch, steps, channels)")
        if target_len < 1:
            raise ValueError("target length must be positive")
        y = self.deconv(latents.transpose(1, 2)).squeeze(1)
        y = y[:, self.hop // 2 :]
        if y.shape[-1] < target_len:
            y = F.pad(y, (0, target_len - y.shape[-1]))
        return y[:, :target_len]


def cue_frames_for_len(n_samples: int, rate: int, frame_rate: int) -> int:
    """Number of cue frames covering an n_samples window (at least one)."""
    spf = rate // frame_rate
    return max(1, n_samples // spf)


def expected_upsample_factor(rate: int, hop: int, frame_rate: int) -> float:
    """Latent steps per cue frame; integer for the default grid (4.0)."""
    return rate / (hop * frame_rate)


def _he_like_reset(module: nn.Module, seed: int) -> None:
    """Deterministic re-init of every parameter from a dedicated generator."""
    gen = torch.Generator().manual_seed(seed)
    for p in module.parameters():
        if p.ndim >= 2:
            fan_in = p.shape[1] * math.prod(p.shape[2:]) if p.ndim > 2 else p.shape[1]
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                p.uniform_(-bound, bound, generator=gen)
        else:
            with torch.no_grad():
                p.uniform_(-0.05, 0.05, generator=gen)


def seed_parameters(module: nn.Module, seed: int) -> nn.Module:
    """Reproducible initialization regardless of global RNG state."""
    _he_like_reset(module, seed)
    return module
