"""Chunked inference with a rolling analysis window and slot memory.

The stream opens with one long initialization window, then advances by a
fixed shift: each step analyzes the trailing window, emits only the newly
uncovered samples, and (depending on the enrollment setting) exchanges
content with the memory banks. Estimates inside a window never see samples
past the window's right edge, so running on an aligned prefix of a stream
reproduces the full run's first emissions bit for bit.

Emitted audio is rescaled per window: the initialization chunk is scaled to
a fixed energy budget, every later window to the cumulative energy emitted
so far ("literal" mode; an RMS loudness-matching mode exists as well).
Segments entering the banks are RMS-normalized by default so slot content
stays in the encoders' working range regardless of the emission scale.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .memory import MemoryBank, retrieve_context, retrieve_speaker
from .model import TseNet

_SPEAKER_MIN_SAMPLES = 400  # speaker encoder frontend window


@dataclass
class StreamConfig:
    t_win: int = 32000
    t_sh: int = 3200
    t_init: int = 32000
    gamma: float = 0.7
    capacity: int = 1
    policy: str = "fifo"
    bank_mode: str = "contextual"  # speaker | contextual | both
    eval_setting: str = "self_enro"  # visual_only | self_enro | pre_enro | tgt_enro
    init_mode: str = "v"  # v | vp: vp adds a transient pre-enrolled feature
    self_enroll_len: int = 32000
    empty_on_switch: bool = True
    norm_mode: str = "literal"  # literal | rms
    store_norm: bool = True
    rate: int = 16000
    frame_rate: int = 25
    eps: float = 1e-8

    @property
    def samples_per_frame(self) -> int:
        return self.rate // self.frame_rate

    def validate(self) -> None:
        if self.t_win < 1 or self.t_sh < 1 or self.t_init < 1:
            raise ValueError("window, shift, and init lengths must be positive")
        if self.t_sh > self.t_win:
            raise ValueError("shift cannot exceed the window")
        if self.rate % self.frame_rate != 0:
            raise ValueError("frame rate must divide the sample rate")
        if self.t_win % self.samples_per_frame != 0:
            raise ValueError("window must cover a whole number of cue frames")
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.self_enroll_len < _SPEAKER_MIN_SAMPLES:
            raise ValueError("self-enrollment segment too short to encode")
        if self.bank_mode not in ("speaker", "contextual", "both"):
            raise ValueError(f"unknown bank mode {self.bank_mode!r}")
        if self.eval_setting not in ("visual_only", "self_enro", "pre_enro", "tgt_enro"):
            raise ValueError(f"unknown eval setting {self.eval_setting!r}")
        if self.init_mode not in ("v", "vp"):
            raise ValueError(f"unknown init mode {self.init_mode!r}")
        if self.norm_mode not in ("literal", "rms"):
            raise ValueError(f"unknown norm mode {self.norm_mode!r}")
        if self.policy not in MemoryBank.POLICIES:
            raise ValueError(f"unknown eviction policy {self.policy!r}")


@dataclass
class StepTrace:
    k: int
    start: int
    end: int
    emit_start: int
    emit_end: int
    sizes_before: dict[str, int]
    sizes_after: dict[str, int]
    slot_scores: dict[str, list[float] | None]
    norm_scale: float
    emitted_energy: float
    cumulative_energy: float
    wall_ms: float


@dataclass
class StreamResult:
    estimate: np.ndarray
    steps: list[StepTrace]
    wall_s: float
    duration_s: float
    reset_step: int | None = None


@dataclass
class OfflineResult:
    estimate: np.ndarray
    passes: int
    wall_s: float
    duration_s: float


class _Banks:
    def __init__(self, cfg: StreamConfig):
        self.speaker: MemoryBank | None = None
        self.context: MemoryBank | None = None
        if cfg.eval_setting != "visual_only":
            if cfg.bank_mode in ("speaker", "both"):
                self.speaker = MemoryBank(cfg.capacity, cfg.policy)
            if cfg.bank_mode in ("contextual", "both"):
                self.context = MemoryBank(cfg.capacity, cfg.policy)

    def sizes(self) -> dict[str, int]:
        out = {}
        if self.speaker is not None:
            out["speaker"] = len(self.speaker)
        if self.context is not None:
            out["context"] = len(self.context)
        return out

    def reset(self) -> None:
        for bank in (self.speaker, self.context):
            if bank is not None:
                bank.reset()


def _unit_rms_np(seg: np.ndarray) -> np.ndarray:
    # Peak-prescale so squaring cannot overflow for very loud segments.
    peak = float(np.max(np.abs(seg)))
    if peak == 0.0:
        return seg.copy()
    scaled = seg / peak
    rms = float(np.sqrt(np.mean(scaled**2)))
    return scaled / max(rms, 1e-12)


def _store_segment(
    model: TseNet, banks: _Banks, cfg: StreamConfig, segment: np.ndarray, pad_to: int
) -> None:
    """Encode one waveform segment into every active bank.

    Context slots are left-zero-padded to `pad_to` samples so their latent
    length matches the analysis window; the speaker encoder sees the raw
    (unpadded) segment.
    """
    if len(segment) < _SPEAKER_MIN_SAMPLES:
        return
    # A degenerate segment (non-finite after a diverged emission cascade)
    # would poison every later retrieval; drop it instead of enrolling it.
    if not np.all(np.isfinite(segment)):
        return
    if cfg.store_norm:
        segment = _unit_rms_np(segment)
    wave = torch.from_numpy(np.ascontiguousarray(segment)).float().unsqueeze(0)
    if banks.speaker is not None:
        banks.speaker.store(model.speaker_encoder(wave)[0])
    if banks.context is not None:
        if len(segment) < pad_to:
            padded = torch.zeros(1, pad_to)
            padded[0, pad_to - len(segment) :] = wave[0]
        else:
            padded = wave[:, -pad_to:]
        banks.context.store(model.encode_window(padded)[0])


def _window_features(
    model: TseNet, banks: _Banks, mix_latents: torch.Tensor
) -> tuple[torch.Tensor | None, torch.Tensor | None, dict[str, list[float] | None]]:
    length = mix_latents.shape[1]
    speaker_feat = None
    context_feat = None
    scores: dict[str, list[float] | None] = {"speaker": None, "context": None}
    if banks.speaker is not None and len(banks.speaker) > 0:
        res = retrieve_speaker(banks.speaker, model.speaker_retrieval, length)
        speaker_feat = res.feature.unsqueeze(0)
        scores["speaker"] = [float(s) for s in res.slot_scores]
    if banks.context is not None and len(banks.context) > 0:
        if banks.context.slots[0].shape[0] == length:
            res = retrieve_context(banks.context, model.context_retrieval, mix_latents[0])
            context_feat = res.feature.unsqueeze(0)
            scores["context"] = [float(s) for s in res.slot_scores]
    return speaker_feat, context_feat, scores


def _window_slice(stream: np.ndarray, start: int, end: int) -> np.ndarray:
    """Samples [start, end) with zeros where the span predates the stream."""
    out = np.zeros(end - start, dtype=np.float64)
    lo = max(start, 0)
    out[lo - start :] = stream[lo:end]
    return out


def _frame_slice(frames: np.ndarray, start: int, end: int, spf: int) -> np.ndarray:
    """Cue frames covering samples [start, end), zero-padded out of range."""
    f0 = start // spf  # Python floor division handles negative starts
    count = (end - start) // spf
    out = np.zeros((count, frames.shape[1]), dtype=np.float64)
    for i in range(count):
        fi = f0 + i
        if 0 <= fi < len(frames):
            out[i] = frames[fi]
    return out


def plan_windows(total: int, cfg: StreamConfig) -> list[tuple[int, int, int, int, int]]:
    """(k, start, end, emit_start, emit_end) for every step of a stream.

    Step 0 analyzes and emits the whole initialization span. Step k covers
    [t_init + k*t_sh - t_win, t_init + k*t_sh) and emits its trailing shift.
    A remainder shorter than one shift gets a final window ending exactly at
    the stream end, emitting only the leftover samples.
    """
    if total < cfg.t_init:
        raise ValueError("stream shorter than the initialization window")
    plan = [(0, 0, cfg.t_init, 0, cfg.t_init)]
    n_full = (total - cfg.t_init) // cfg.t_sh
    for k in range(1, n_full + 1):
        end = cfg.t_init + k * cfg.t_sh
        plan.append((k, end - cfg.t_win, end, end - cfg.t_sh, end))
    rem = total - cfg.t_init - n_full * cfg.t_sh
    if rem > 0:
        plan.append((n_full + 1, total - cfg.t_win, total, total - rem, total))
    return plan


def _norm_scale(
    cfg: StreamConfig, k: int, est_win: np.ndarray, mix_win: np.ndarray, cum: float
) -> float:
    energy = float(np.sum(est_win**2))
    if cfg.norm_mode == "rms":
        est_rms = float(np.sqrt(np.mean(est_win**2)))
        mix_rms = float(np.sqrt(np.mean(mix_win**2)))
        return mix_rms / max(est_rms, cfg.eps)
    if k == 0:
        return cfg.gamma / (energy + cfg.eps)
    return cum / (energy + cfg.eps)


def run_stream(
    model: TseNet,
    mixture: np.ndarray,
    cue_frames: np.ndarray,
    cfg: StreamConfig,
    pre_enrolled: np.ndarray | None = None,
    target: np.ndarray | None = None,
    reset_at_step: int | None = None,
    pre_enrolled_post: np.ndarray | None = None,
) -> StreamResult:
    """Process a full stream chunk by chunk.

    `target` feeds the oracle enrollment setting only; `pre_enrolled` seeds
    the banks (and the transient speaker feature in "vp" mode) for
    pre-enrollment. `reset_at_step` empties the banks just before that step
    runs, modeling a known target switch; `pre_enrolled_post` re-seeds
    pre-enrollment afterwards.
    """
    cfg.validate()
    mixture = np.asarray(mixture, dtype=np.float64)
    cue_frames = np.asarray(cue_frames, dtype=np.float64)
    total = len(mixture)
    if cfg.eval_setting == "pre_enro" and pre_enrolled is None:
        raise ValueError("pre-enrollment setting needs a pre-enrolled waveform")
    if cfg.eval_setting == "tgt_enro":
        if target is None:
            raise ValueError("oracle enrollment needs the target waveform")
        if len(target) != total:
            raise ValueError("target length must match the mixture")

    was_training = model.training
    model.eval()
    banks = _Banks(cfg)
    vp_feat_src: np.ndarray | None = None
    if cfg.eval_setting == "pre_enro":
        seg = np.asarray(pre_enrolled, dtype=np.float64)
        seg = seg[-min(cfg.self_enroll_len, len(seg)) :]
        _store_segment(model, banks, cfg, seg, cfg.t_win)
        if cfg.init_mode == "vp":
            vp_feat_src = seg

    estimate = np.zeros(total, dtype=np.float64)
    steps: list[StepTrace] = []
    cum = 0.0
    t0 = time.perf_counter()
    with torch.no_grad():
        vp_vec = None
        if vp_feat_src is not None:
            seg = _unit_rms_np(vp_feat_src) if cfg.store_norm else vp_feat_src
            wave = torch.from_numpy(np.ascontiguousarray(seg)).float().unsqueeze(0)
            svec = model.speaker_encoder(wave)
            vp_vec, _ = model.speaker_retrieval(svec.unsqueeze(1))

        for k, start, end, emit_start, emit_end in plan_windows(total, cfg):
            step_t0 = time.perf_counter()
            if reset_at_step is not None and k == reset_at_step and cfg.empty_on_switch:
                banks.reset()
                if cfg.eval_setting == "pre_enro" and pre_enrolled_post is not None:
                    seg = np.asarray(pre_enrolled_post, dtype=np.float64)
                    seg = seg[-min(cfg.self_enroll_len, len(seg)) :]
                    _store_segment(model, banks, cfg, seg, cfg.t_win)
                    if cfg.init_mode == "vp":
                        seg_n = _unit_rms_np(seg) if cfg.store_norm else seg
                        wave = torch.from_numpy(np.ascontiguousarray(seg_n)).float()
                        svec = model.speaker_encoder(wave.unsqueeze(0))
                        vp_vec, _ = model.speaker_retrieval(svec.unsqueeze(1))
            sizes_before = banks.sizes()

            window = _window_slice(mixture, start, end)
            frames = _frame_slice(cue_frames, start, end, cfg.samples_per_frame)
            if cfg.eval_setting == "tgt_enro":
                truth = _window_slice(target, start, end)
                seg = truth[-min(cfg.self_enroll_len, len(truth)) :]
                _store_segment(model, banks, cfg, seg, cfg.t_win)

            mix_t = torch.from_numpy(window).float().unsqueeze(0)
            frames_t = torch.from_numpy(frames).float().unsqueeze(0)
            length = model.latent_len(len(window))
            y = model.encode_window(mix_t)
            v = model.encode_cues(frames_t, length)
            speaker_feat, context_feat, scores = _window_features(model, banks, y)
            if speaker_feat is None and vp_vec is not None:
                speaker_feat = model.speaker_feature_from_vec(vp_vec, length)
            masked, _ = model.extract_latents(y, v, speaker_feat, context_feat)
            est_win = model.decoder(masked, len(window))[0].numpy().astype(np.float64)

            # A degenerate estimate can drive the cumulative-energy cascade
            # past float range; IEEE saturation to inf is the deterministic
            # outcome, so the overflow warnings carry no information.
            with np.errstate(over="ignore", invalid="ignore"):
                scale = _norm_scale(cfg, k, est_win, window, cum)
                normalized = est_win * scale
                chunk = normalized[len(window) - (emit_end - emit_start) :]
                chunk_energy = float(np.sum(chunk**2))
                cum += chunk_energy
                estimate[emit_start:emit_end] = chunk

            if cfg.eval_setting == "self_enro":
                seg = normalized[-min(cfg.self_enroll_len, len(normalized)) :]
                _store_segment(model, banks, cfg, seg, cfg.t_win)

            steps.append(
                StepTrace(
                    k=k,
                    start=start,
                    end=end,
                    emit_start=emit_start,
                    emit_end=emit_end,
                    sizes_before=sizes_before,
                    sizes_after=banks.sizes(),
                    slot_scores=scores,
                    norm_scale=scale,
                    emitted_energy=chunk_energy,
                    cumulative_energy=cum,
                    wall_ms=(time.perf_counter() - step_t0) * 1e3,
                )
            )
    wall_s = time.perf_counter() - t0
    if was_training:
        model.train()
    return StreamResult(
        estimate=estimate,
        steps=steps,
        wall_s=wall_s,
        duration_s=total / cfg.rate,
        reset_step=reset_at_step,
    )


def switch_reset_step(switch_sample: int, cfg: StreamConfig) -> int:
    """Index of the first post-initialization step whose window overlaps the
    switch point; the bank reset lands just before it runs."""
    if switch_sample <= cfg.t_init:
        return 1
    return max(1, (switch_sample - cfg.t_init) // cfg.t_sh + 1)


def run_switch_stream(
    model: TseNet,
    mixture: np.ndarray,
    cue_frames: np.ndarray,
    switch_sample: int,
    cfg: StreamConfig,
    target: np.ndarray | None = None,
    pre_enrolled: np.ndarray | None = None,
    pre_enrolled_post: np.ndarray | None = None,
) -> StreamResult:
    """Stream across a target switch, emptying the banks at the boundary."""
    if not 0 < switch_sample < len(mixture):
        raise ValueError("switch sample outside the stream")
    k_reset = switch_reset_step(switch_sample, cfg)
    return run_stream(
        model,
        mixture,
        cue_frames,
        cfg,
        pre_enrolled=pre_enrolled,
        target=target,
        reset_at_step=k_reset,
        pre_enrolled_post=pre_enrolled_post,
    )


def run_offline(
    model: TseNet,
    mixture: np.ndarray,
    cue_frames: np.ndarray,
    cfg: StreamConfig,
    pre_enrolled: np.ndarray | None = None,
    target: np.ndarray | None = None,
) -> OfflineResult:
    """Whole-utterance inference, no chunking and no emission rescaling.

    Self-enrollment becomes exactly two passes: a cue-only pass whose
    estimate fills the banks, then a second conditioned pass.
    """
    cfg.validate()
    mixture = np.asarray(mixture, dtype=np.float64)
    cue_frames = np.asarray(cue_frames, dtype=np.float64)
    total = len(mixture)
    if cfg.eval_setting == "pre_enro" and pre_enrolled is None:
        raise ValueError("pre-enrollment setting needs a pre-enrolled waveform")
    if cfg.eval_setting == "tgt_enro" and target is None:
        raise ValueError("oracle enrollment needs the target waveform")

    was_training = model.training
    model.eval()
    banks = _Banks(cfg)
    t0 = time.perf_counter()
    with torch.no_grad():
        if cfg.eval_setting == "pre_enro":
            seg = np.asarray(pre_enrolled, dtype=np.float64)
            _store_segment(model, banks, cfg, seg[-min(cfg.self_enroll_len, len(seg)) :], total)
        elif cfg.eval_setting == "tgt_enro":
            truth = np.asarray(target, dtype=np.float64)
            _store_segment(model, banks, cfg, truth, total)

        mix_t = torch.from_numpy(mixture).float().unsqueeze(0)
        frames_t = torch.from_numpy(cue_frames).float().unsqueeze(0)
        length = model.latent_len(total)
        y = model.encode_window(mix_t)
        v = model.encode_cues(frames_t, length)
        speaker_feat, context_feat, _ = _window_features(model, banks, y)
        masked, _ = model.extract_latents(y, v, speaker_feat, context_feat)
        est = model.decoder(masked, total)[0].numpy().astype(np.float64)
        passes = 1

        if cfg.eval_setting == "self_enro":
            _store_segment(model, banks, cfg, est, total)
            speaker_feat, context_feat, _ = _window_features(model, banks, y)
            masked, _ = model.extract_latents(y, v, speaker_feat, context_feat)
            est = model.decoder(masked, total)[0].numpy().astype(np.float64)
            passes = 2
    wall_s = time.perf_counter() - t0
    if was_training:
        model.train()
    return OfflineResult(
        estimate=est, passes=passes, wall_s=wall_s, duration_s=total / cfg.rate
    )


def measure_rtf(result: StreamResult | OfflineResult) -> float:
    """Real-time factor: processing seconds per second of audio."""
    return result.wall_s / result.duration_s
