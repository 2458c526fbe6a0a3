"""Synthetic audio and visual-cue generation.

Everything in this module is deterministic given the spec/seed that produced
it: the same (speaker_id, seed) pair always yields the same waveform, and the
same mixture spec always yields the same bundle, bit for bit. Speaker identity
lives in a fixed per-speaker band parameterization (three narrowband carriers
on disjoint frequency grids), utterance-level variation (envelope, phases)
comes from the seed.

Visual cues are a stand-in for lip features: one envelope value plus a coarse
band-energy profile per 40 ms frame, derived from the clean target only.
Impairments corrupt a scheduled span of frames and are recorded in a parallel
label mask so downstream reporting can break scores out by impairment type.
"""

from __future__ import annotations

import csv
import json
import math
import re
import zlib
from dataclasses import asdict, dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np
from scipy.io import wavfile

SAMPLE_RATE = 16000
FRAME_RATE = 25
CUE_DIM = 8
N_CUE_BANDS = CUE_DIM - 1

# Analysis band edges shared by cue derivation and the per-speaker carrier
# grid. Seven linear bands spanning the carrier range.
BAND_EDGES_HZ = np.linspace(200.0, 5800.0, N_CUE_BANDS + 1)

_TARGET_RMS = 0.1
_ENVELOPE_FLOOR = 0.15

# Fixed occlusion pattern: deliberately unlike a real cue frame (mass on the
# envelope dim, near-flat residue on the band dims) so occluded frames
# decorrelate from the clean ones they replace.
_DISTRACTOR = np.full(CUE_DIM, 0.04)
_DISTRACTOR[0] = 0.8


class Impairment(IntEnum):
    CLEAN = 0
    MISSING = 1
    OCCLUDED = 2
    LOW_RES = 3


IMPAIRMENT_NAMES = {
    "missing": Impairment.MISSING,
    "occluded": Impairment.OCCLUDED,
    "low_res": Impairment.LOW_RES,
}


@dataclass
class Waveform:
    """Mono waveform; float64 samples, finite, length >= 1."""

    samples: np.ndarray
    rate: int = SAMPLE_RATE

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise ValueError("waveform must be a non-empty 1-D array")
        if not np.isfinite(self.samples).all():
            raise ValueError("waveform contains non-finite samples")
        if self.rate <= 0:
            raise ValueError("sample rate must be positive")

    def __len__(self) -> int:
        return int(self.samples.size)

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.rate

    def power(self) -> float:
        return float(np.mean(self.samples**2))


@dataclass
class CueStream:
    """Frame-rate cue features with a parallel impairment label mask."""

    frames: np.ndarray  # (F, CUE_DIM) float64
    frame_rate: float = float(FRAME_RATE)
    labels: np.ndarray | None = None  # (F,) int8, Impairment values
    switch_time_s: float | None = None

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ValueError("cue frames must be (F, D)")
        if self.labels is None:
            self.labels = np.zeros(self.frames.shape[0], dtype=np.int8)
        else:
            self.labels = np.asarray(self.labels, dtype=np.int8)
        if self.labels.shape[0] != self.frames.shape[0]:
            raise ValueError("label mask length must match frame count")

    def __len__(self) -> int:
        return int(self.frames.shape[0])


@dataclass
class MixtureSpec:
    """Recipe for one two-speaker mixture with an impaired cue stream."""

    target_id: str
    interferer_id: str
    snr_db: float
    duration_s: float
    impairment_type: str
    impairment_ratio: float
    seed: int
    protect_prefix_s: float = 2.0

    def validate(self) -> None:
        if self.target_id == self.interferer_id:
            raise ValueError("target and interferer must be distinct speakers")
        if not -10.0 <= self.snr_db <= 10.0:
            raise ValueError("snr_db outside [-10, 10]")
        if self.duration_s <= 0:
            raise ValueError("duration must be positive")
        if self.impairment_type not in IMPAIRMENT_NAMES:
            raise ValueError(f"unknown impairment type {self.impairment_type!r}")
        if not 0.0 <= self.impairment_ratio < 1.0:
            raise ValueError("impairment ratio outside [0, 1)")
        if self.protect_prefix_s < 0:
            raise ValueError("protect prefix must be >= 0")


@dataclass
class SwitchSpec:
    """Recipe for a target-switch stream: speaker A hands off to speaker B."""

    speaker_a: str
    speaker_b: str
    interferer: str
    switch_time_s: float
    total_duration_s: float = 12.0
    post_switch_clean_s: float = 1.0
    seed: int = 0
    snr_db: float | None = None  # drawn from seed when None
    impairment_type: str = "missing"
    impairment_ratio: float = 0.5
    protect_prefix_s: float = 2.0

    def validate(self) -> None:
        ids = {self.speaker_a, self.speaker_b, self.interferer}
        if len(ids) != 3:
            raise ValueError("switch speakers and interferer must be distinct")
        if not 4.0 <= self.switch_time_s <= 6.0:
            raise ValueError("switch time outside [4, 6] s")
        if self.total_duration_s < 10.0:
            raise ValueError("switch stream must be at least 10 s")
        if self.impairment_type not in IMPAIRMENT_NAMES:
            raise ValueError(f"unknown impairment type {self.impairment_type!r}")
        if not 0.0 <= self.impairment_ratio < 1.0:
            raise ValueError("impairment ratio outside [0, 1)")
        if self.snr_db is not None and not -10.0 <= self.snr_db <= 10.0:
            raise ValueError("snr_db outside [-10, 10]")


@dataclass
class MixtureBundle:
    mixture: Waveform
    target: Waveform
    interferer_scaled: Waveform
    cues: CueStream
    pre_enrolled: Waveform
    spec: MixtureSpec


@dataclass
class SwitchBundle:
    mixture: Waveform
    target: Waveform  # piecewise: A before the switch sample, B after
    cues: CueStream
    spec: SwitchSpec
    switch_sample: int
    snr_db: float


def speaker_index(speaker_id: str) -> int:
    """Stable integer index for a speaker id.

    Trailing digits are used directly so spk0..spkN land on consecutive grid
    points; anything else hashes via crc32 (stable across runs and platforms,
    unlike Python's salted hash()).
    """
    m = re.search(r"(\d+)$", speaker_id)
    if m:
        return int(m.group(1))
    return zlib.crc32(speaker_id.encode("utf-8")) % 997


@dataclass(frozen=True)
class VoiceParams:
    """Per-speaker synthesis parameters: three carrier bands plus weights."""

    carriers_hz: tuple[float, float, float]
    weights: tuple[float, float, float]
    bandwidth_hz: float

    def centroid_hz(self) -> float:
        w = np.asarray(self.weights)
        f = np.asarray(self.carriers_hz)
        return float(np.sum(w * f) / np.sum(w))


def speaker_params(speaker_id: str) -> VoiceParams:
    """Deterministic carrier placement on the analysis-band grid.

    Each speaker index owns a dominant analysis band (cycled over the seven
    bands) plus two secondary carriers four and two bands away, with a
    sub-band offset distinguishing speakers that share a dominant band. Band
    energy profiles and centroids therefore separate by far more than one
    carrier bandwidth for neighboring indices.
    """
    idx = speaker_index(speaker_id) % 14
    dom = idx % N_CUE_BANDS
    sub = idx // N_CUE_BANDS
    centers = 0.5 * (BAND_EDGES_HZ[:-1] + BAND_EDGES_HZ[1:])
    f1 = float(centers[dom] + (sub - 0.5) * 220.0)
    f2 = float(centers[(dom + 2) % N_CUE_BANDS] + (sub - 0.5) * 180.0)
    f3 = float(centers[(dom + 4) % N_CUE_BANDS] + (sub - 0.5) * 140.0)
    return VoiceParams(
        carriers_hz=(f1, f2, f3),
        weights=(1.0, 0.55, 0.4),
        bandwidth_hz=45.0,
    )


def _syllabic_envelope(n: int, rate: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth positive amplitude envelope with ~3-5 Hz structure and a floor
    (no dead silence; keeps frame powers and SNR math well conditioned)."""
    n_ctrl = max(4, int(round(n / rate * FRAME_RATE)) + 2)
    ctrl = rng.standard_normal(n_ctrl)
    kernel = np.hanning(7)
    kernel /= kernel.sum()
    ctrl = np.convolve(ctrl, kernel, mode="same")
    ctrl = ctrl - ctrl.min()
    peak = ctrl.max()
    if peak > 0:
        ctrl = ctrl / peak
    t_ctrl = np.linspace(0.0, 1.0, n_ctrl)
    t = np.linspace(0.0, 1.0, n)
    env = np.interp(t, t_ctrl, ctrl)
    return _ENVELOPE_FLOOR + (1.0 - _ENVELOPE_FLOOR) * env


def synth_speaker(
    speaker_id: str,
    duration_s: float,
    seed: int,
    rate: int = SAMPLE_RATE,
) -> Waveform:
    """Band-limited pseudo-speech for one speaker.

    Three amplitude-modulated narrowband carriers (random-walk phase sets the
    linewidth) on the speaker's fixed frequency grid, a shared syllabic
    envelope, and a low broadband noise floor. Output RMS is fixed so mixtures
    at a requested SNR are well defined.
    """
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    n = int(round(duration_s * rate))
    voice = speaker_params(speaker_id)
    rng = np.random.default_rng([speaker_index(speaker_id), seed & 0xFFFFFFFF, 0x5EED])

    t = np.arange(n) / rate
    env = _syllabic_envelope(n, rate, rng)

    # Random-walk phase: step std sigma gives a Lorentzian linewidth of about
    # sigma^2 * rate / 2 Hz, matched to the voice bandwidth parameter.
    sigma = math.sqrt(2.0 * voice.bandwidth_hz / rate)
    sig = np.zeros(n)
    for f_c, w in zip(voice.carriers_hz, voice.weights):
        phase_noise = np.cumsum(rng.standard_normal(n) * sigma)
        sig += w * np.cos(2.0 * math.pi * f_c * t + rng.uniform(0, 2 * math.pi) + phase_noise)
    sig *= env
    sig += 0.02 * env * rng.standard_normal(n)

    rms = math.sqrt(float(np.mean(sig**2)))
    if rms > 0:
        sig *= _TARGET_RMS / rms
    return Waveform(sig, rate)


def mix_at_snr(target: Waveform, interferer: Waveform, snr_db: float) -> tuple[Waveform, float]:
    """Scale the interferer so that 10*log10(P_target / P_interferer) hits
    snr_db exactly, then add. Returns (mixture, interferer_gain)."""
    if len(target) != len(interferer) or target.rate != interferer.rate:
        raise ValueError("target and interferer must share length and rate")
    p_t = target.power()
    p_i = interferer.power()
    if p_t <= 0.0:
        raise ValueError("target has zero power")
    if p_i <= 0.0:
        raise ValueError("interferer has zero power")
    gain = math.sqrt(p_t / (p_i * 10.0 ** (snr_db / 10.0)))
    mixture = target.samples + gain * interferer.samples
    return Waveform(mixture, target.rate), gain


def derive_cues(target: Waveform, frame_rate: int = FRAME_RATE) -> CueStream:
    """Per-frame cue features from the clean target.

    feature[0] is the frame RMS (tracks the target's envelope by construction)
    and features[1:] are the frame's normalized band energies (carries the
    speaker's spectral signature). Silent frames yield all-zero features.
    """
    if frame_rate <= 0 or target.rate % frame_rate != 0:
        raise ValueError("frame rate must divide the sample rate")
    spf = target.rate // frame_rate
    n_frames = len(target) // spf
    if n_frames < 1:
        raise ValueError("waveform shorter than one cue frame")

    frames = np.zeros((n_frames, CUE_DIM))
    freqs = np.fft.rfftfreq(spf, d=1.0 / target.rate)
    band_idx = np.digitize(freqs, BAND_EDGES_HZ) - 1  # -1 below, N_CUE_BANDS above
    for i in range(n_frames):
        seg = target.samples[i * spf : (i + 1) * spf]
        p = float(np.mean(seg**2))
        if p < 1e-12:
            continue
        frames[i, 0] = math.sqrt(p)
        spec = np.abs(np.fft.rfft(seg)) ** 2
        total = 0.0
        bands = np.zeros(N_CUE_BANDS)
        for b in range(N_CUE_BANDS):
            e = float(spec[band_idx == b].sum())
            bands[b] = e
            total += e
        if total > 0:
            frames[i, 1:] = bands / total
    return CueStream(frames, float(frame_rate))


def _corruption_mask(
    n_frames: int,
    ratio: float,
    protected: np.ndarray,
    rng: np.random.Generator,
    runs: int = 1,
) -> np.ndarray:
    """Boolean mask of corrupted frames.

    Exactly floor(ratio * eligible) frames are corrupted, never inside a
    protected zone. Runs are contiguous in eligible-index space, so a
    protected zone in the middle of the stream may split one nominal run in
    two; the frame count is exact either way.
    """
    if protected.shape[0] != n_frames:
        raise ValueError("protected mask length mismatch")
    eligible = np.flatnonzero(~protected)
    n_corrupt = int(math.floor(ratio * eligible.size))
    mask = np.zeros(n_frames, dtype=bool)
    if n_corrupt == 0:
        return mask
    runs = max(1, min(runs, n_corrupt))
    zone = eligible.size // runs
    base, extra = divmod(n_corrupt, runs)
    for r in range(runs):
        length = base + (1 if r < extra else 0)
        zone_lo = r * zone
        zone_hi = eligible.size if r == runs - 1 else (r + 1) * zone
        start = int(rng.integers(zone_lo, zone_hi - length + 1))
        mask[eligible[start : start + length]] = True
    return mask


def _apply_corruption(
    cues: CueStream, kind: Impairment, mask: np.ndarray
) -> CueStream:
    frames = cues.frames.copy()
    labels = cues.labels.copy()
    idx = np.flatnonzero(mask)
    if kind == Impairment.MISSING:
        frames[idx] = 0.0
    elif kind == Impairment.OCCLUDED:
        frames[idx] = 0.15 * frames[idx] + 0.85 * _DISTRACTOR
    elif kind == Impairment.LOW_RES:
        # Temporal blur over the clean stream, then coarse quantization.
        kernel = np.ones(5) / 5.0
        blurred = np.empty_like(cues.frames)
        for d in range(cues.frames.shape[1]):
            blurred[:, d] = np.convolve(cues.frames[:, d], kernel, mode="same")
        q = 0.05
        frames[idx] = np.round(blurred[idx] / q) * q
    else:
        raise ValueError(f"cannot apply impairment {kind}")
    labels[idx] = np.int8(kind)
    return CueStream(frames, cues.frame_rate, labels, cues.switch_time_s)


def apply_impairment(
    cues: CueStream,
    impairment_type: str,
    ratio: float,
    seed: int,
    protect_prefix_s: float = 0.0,
    runs: int = 1,
) -> CueStream:
    """Corrupt floor(ratio * eligible) frames outside the protected prefix.

    ratio=0 returns an identical (copied) stream. The corrupted span is
    contiguous by default; its placement is drawn from the seed.
    """
    if not 0.0 <= ratio < 1.0:
        raise ValueError("impairment ratio outside [0, 1)")
    kind = IMPAIRMENT_NAMES.get(impairment_type)
    if kind is None:
        raise ValueError(f"unknown impairment type {impairment_type!r}")
    n = len(cues)
    protect = int(round(protect_prefix_s * cues.frame_rate))
    protected = np.zeros(n, dtype=bool)
    protected[: min(protect, n)] = True
    if ratio == 0.0:
        return CueStream(cues.frames.copy(), cues.frame_rate, cues.labels.copy(), cues.switch_time_s)
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 0xC0E5])
    mask = _corruption_mask(n, ratio, protected, rng, runs)
    return _apply_corruption(cues, kind, mask)


def build_mixture(spec: MixtureSpec, rate: int = SAMPLE_RATE) -> MixtureBundle:
    """Assemble one mixture item: waveforms, impaired cues, pre-enrollment.

    Sub-seeds are fixed offsets of the item seed so every component is
    reproducible in isolation. The pre-enrolled utterance shares the target's
    voice but uses a different seed, so it is a different waveform.
    """
    spec.validate()
    target = synth_speaker(spec.target_id, spec.duration_s, spec.seed, rate)
    interferer = synth_speaker(spec.interferer_id, spec.duration_s, spec.seed + 1, rate)
    pre_enrolled = synth_speaker(spec.target_id, spec.duration_s, spec.seed + 2, rate)
    mixture, gain = mix_at_snr(target, interferer, spec.snr_db)
    cues = derive_cues(target)
    cues = apply_impairment(
        cues,
        spec.impairment_type,
        spec.impairment_ratio,
        spec.seed + 3,
        protect_prefix_s=spec.protect_prefix_s,
    )
    return MixtureBundle(
        mixture=mixture,
        target=target,
        interferer_scaled=Waveform(gain * interferer.samples, rate),
        cues=cues,
        pre_enrolled=pre_enrolled,
        spec=spec,
    )


def build_switch_mixture(spec: SwitchSpec, rate: int = SAMPLE_RATE) -> SwitchBundle:
    """Assemble a target-switch stream.

    The reference target is piecewise: speaker A up to the switch sample, then
    speaker B. Cues always describe the current target, and by construction
    are clean for post_switch_clean_s after the switch and over the protected
    prefix; the interferer runs throughout.
    """
    spec.validate()
    n = int(round(spec.total_duration_s * rate))
    switch_sample = int(round(spec.switch_time_s * rate))
    wave_a = synth_speaker(spec.speaker_a, spec.total_duration_s, spec.seed, rate)
    wave_b = synth_speaker(spec.speaker_b, spec.total_duration_s, spec.seed + 1, rate)
    target = Waveform(
        np.concatenate([wave_a.samples[:switch_sample], wave_b.samples[switch_sample:]]), rate
    )
    interferer = synth_speaker(spec.interferer, spec.total_duration_s, spec.seed + 2, rate)
    snr = spec.snr_db
    if snr is None:
        snr = float(np.random.default_rng([spec.seed & 0xFFFFFFFF, 0x50F]).uniform(-10.0, 10.0))
    mixture, _ = mix_at_snr(target, interferer, snr)

    cues = derive_cues(target)
    fr = cues.frame_rate
    protected = np.zeros(len(cues), dtype=bool)
    protected[: int(round(spec.protect_prefix_s * fr))] = True
    sw_frame = int(round(spec.switch_time_s * fr))
    sw_end = int(round((spec.switch_time_s + spec.post_switch_clean_s) * fr))
    protected[sw_frame : min(sw_end, len(cues))] = True
    if spec.impairment_ratio > 0.0:
        rng = np.random.default_rng([spec.seed & 0xFFFFFFFF, 0xC0E5])
        mask = _corruption_mask(len(cues), spec.impairment_ratio, protected, rng, runs=2)
        cues = _apply_corruption(cues, IMPAIRMENT_NAMES[spec.impairment_type], mask)
    cues.switch_time_s = spec.switch_time_s
    return SwitchBundle(
        mixture=mixture,
        target=target,
        cues=cues,
        spec=spec,
        switch_sample=switch_sample,
        snr_db=snr,
    )


# ---------------------------------------------------------------------------
# Serialization: 16-bit PCM WAV, CSV cue streams with a JSON sidecar, and
# JSON-lines manifests.


def write_wav(path: str | Path, wave: Waveform, peak_normalize: bool = False) -> None:
    samples = wave.samples
    if peak_normalize:
        peak = float(np.max(np.abs(samples)))
        if peak > 0:
            samples = samples * (0.9 / peak)
    clipped = np.clip(samples, -1.0, 1.0)
    wavfile.write(str(path), wave.rate, np.round(clipped * 32767.0).astype(np.int16))


def read_wav(path: str | Path) -> Waveform:
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise ValueError("expected mono WAV")
    if data.dtype != np.int16:
        raise ValueError("expected 16-bit PCM WAV")
    return Waveform(data.astype(np.float64) / 32767.0, int(rate))


def write_cues(path: str | Path, cues: CueStream, meta: dict | None = None) -> None:
    """CSV of frame features plus a .json sidecar with stream metadata."""
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([f"f{d}" for d in range(cues.frames.shape[1])] + ["label"])
        for row, label in zip(cues.frames, cues.labels):
            writer.writerow([f"{v:.10g}" for v in row] + [int(label)])
    sidecar = {
        "frame_rate": cues.frame_rate,
        "n_frames": len(cues),
        "cue_dim": int(cues.frames.shape[1]),
        "switch_time_s": cues.switch_time_s,
        "meta": meta or {},
    }
    with open(path.with_suffix(path.suffix + ".json"), "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)


def read_cues(path: str | Path) -> CueStream:
    path = Path(path)
    with open(path.with_suffix(path.suffix + ".json")) as f:
        sidecar = json.load(f)
    rows = []
    labels = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        dim = len(header) - 1
        for row in reader:
            rows.append([float(v) for v in row[:dim]])
            labels.append(int(row[dim]))
    frames = np.asarray(rows, dtype=np.float64).reshape(len(rows), dim)
    return CueStream(
        frames,
        float(sidecar["frame_rate"]),
        np.asarray(labels, dtype=np.int8),
        sidecar.get("switch_time_s"),
    )


def write_manifest(path: str | Path, entries: list[dict]) -> None:
    with open(path, "w") as f:
        for entry in entries:
            f.write(json.dumps(entry, sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> list[dict]:
    entries = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                entries.append(json.loads(line))
    return entries


def mixture_spec_to_entry(spec: MixtureSpec) -> dict:
    return asdict(spec)


def entry_to_mixture_spec(entry: dict) -> MixtureSpec:
    known = {f for f in MixtureSpec.__dataclass_fields__}
    return MixtureSpec(**{k: v for k, v in entry.items() if k in known})


def switch_spec_to_entry(spec: SwitchSpec) -> dict:
    return asdict(spec)


def entry_to_switch_spec(entry: dict) -> SwitchSpec:
    known = {f for f in SwitchSpec.__dataclass_fields__}
    return SwitchSpec(**{k: v for k, v in entry.items() if k in known})
