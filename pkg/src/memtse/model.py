"""The assembled extraction network and its checkpoint format.

One TseNet owns every learned component: the shared speech encoder (used for
mixture windows, stored references, and training memory alike), the cue and
speaker encoders, both retrieval modules, the fusion/mask extractor, and the
decoder. Banks themselves are runtime state and live outside the module tree;
they reference the retrieval projections owned here.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
from torch import nn

from .encoders import (
    CueEncoder,
    SpeakerEncoder,
    SpeechDecoder,
    SpeechEncoder,
    latent_len,
    seed_parameters,
)
from .extractor import Extractor
from .memory import ContextRetrieval, SpeakerRetrieval

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    channels: int = 64
    hop: int = 160
    rate: int = 16000
    cue_dim: int = 8
    frame_rate: int = 25
    backbone: str = "tcn"
    backbone_channels: int = 64
    backbone_blocks: int = 4
    backbone_kernel: int = 3
    speaker_hidden: int = 32
    init_seed: int = 0

    def validate(self) -> None:
        if self.backbone != "tcn":
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.rate % self.frame_rate != 0:
            raise ValueError("frame rate must divide sample rate")
        if self.hop % 2 != 0:
            raise ValueError("hop must be even")


class TseNet(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.cfg.validate()
        c = self.cfg.channels
        self.speech_encoder = SpeechEncoder(c, self.cfg.hop)
        self.cue_encoder = CueEncoder(self.cfg.cue_dim, c)
        self.speaker_encoder = SpeakerEncoder(c, self.cfg.speaker_hidden)
        self.decoder = SpeechDecoder(c, self.cfg.hop)
        self.speaker_retrieval = SpeakerRetrieval(c)
        self.context_retrieval = ContextRetrieval(c)
        self.extractor = Extractor(
            c,
            self.cfg.backbone_channels,
            self.cfg.backbone_blocks,
            self.cfg.backbone_kernel,
        )
        seed_parameters(self, self.cfg.init_seed)

    def latent_len(self, n_samples: int) -> int:
        return latent_len(n_samples, self.cfg.hop)

    def encode_window(self, wave: torch.Tensor) -> torch.Tensor:
        return self.speech_encoder(wave)

    def encode_cues(self, frames: torch.Tensor, target_len: int) -> torch.Tensor:
        return self.cue_encoder(frames, target_len)

    def extract_latents(
        self,
        mixture_latents: torch.Tensor,
        cue_latents: torch.Tensor,
        speaker_feat: torch.Tensor | None = None,
        context_feat: torch.Tensor | None = None,
        mask_override: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        return self.extractor(
            mixture_latents, cue_latents, speaker_feat, context_feat, mask_override
        )

    def forward_window(
        self,
        mixture: torch.Tensor,
        cue_frames: torch.Tensor,
        speaker_feat: torch.Tensor | None = None,
        context_feat: torch.Tensor | None = None,
        mask_override: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """One full pass on a waveform window: (B, T) -> estimate (B, T)."""
        n = mixture.shape[-1]
        l = self.latent_len(n)
        y = self.encode_window(mixture)
        v = self.encode_cues(cue_frames, l)
        masked, _ = self.extract_latents(y, v, speaker_feat, context_feat, mask_override)
        return self.decoder(masked, n)

    def speaker_feature_from_vec(self, vec: torch.Tensor, length: int) -> torch.Tensor:
        """Repeat a (B, C) speaker vector across latent steps -> (B, L, C)."""
        return vec.unsqueeze(1).expand(-1, length, -1)


@dataclass
class CheckpointHeader:
    model: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION
    extra: dict = field(default_factory=dict)


def save_checkpoint(
    path: str | Path,
    model: TseNet,
    seeds: dict | None = None,
    extra: dict | None = None,
    optimizer: torch.optim.Optimizer | None = None,
    train_state: dict | None = None,
) -> None:
    """Single archive: parameter tensors keyed by module path + JSON header."""
    header = CheckpointHeader(
        model=asdict(model.cfg),
        seeds=seeds or {},
        extra=extra or {},
    )
    payload = {
        "header_json": json.dumps(asdict(header), sort_keys=True),
        "state_dict": model.state_dict(),
    }
    if optimizer is not None:
        payload["optimizer"] = optimizer.state_dict()
    if train_state is not None:
        payload["train_state"] = train_state
    torch.save(payload, str(path))


def load_checkpoint(path: str | Path) -> tuple[TseNet, dict]:
    """Rebuild the model from a checkpoint; returns (model, payload).

    The payload dict carries the parsed header plus optimizer/train state if
    the checkpoint has them. Mismatched shapes or missing keys fail loudly
    via load_state_dict.
    """
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    header = json.loads(payload["header_json"])
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')!r}")
    cfg = ModelConfig(**header["model"])
    model = TseNet(cfg)
    model.load_state_dict(payload["state_dict"])
    out = {
        "header": header,
        "optimizer": payload.get("optimizer"),
        "train_state": payload.get("train_state"),
    }
    return model, out
