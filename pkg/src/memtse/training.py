"""Two-stage self-referencing training.

Each step runs the extractor twice. Stage one conditions on cues alone (or
cues plus a pre-enrolled speaker embedding). Its estimate, blended with the
ground truth on a curriculum that starts at pure (energy-matched) ground truth
and anneals to pure estimate, is cut into progressively shifted prefixes,
left-zero-padded, shuffled, and encoded into memory content; stage two
conditions on what it retrieves from that content. The loss mixes both
stages' negative SI-SNR with a fixed weight on stage one.

The curriculum energy factor and the blend use literal squared-norm ratios;
an RMS variant exists behind `blend_mode="rms"`. Every stochastic draw in an
epoch comes from a generator seeded by (run seed, epoch), so resuming from a
checkpoint reproduces the continuation bit for bit.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .model import TseNet, save_checkpoint, load_checkpoint
from . import signals


class TrainingDivergence(RuntimeError):
    def __init__(self, message: str, diagnostics: dict, last_good: str | None):
        super().__init__(message)
        self.diagnostics = diagnostics
        self.last_good = last_good


def si_snr(
    est: torch.Tensor,
    ref: torch.Tensor,
    zero_mean: bool = True,
    eps: float = 1e-8,
    clamp_db: float = 60.0,
) -> torch.Tensor:
    """Scale-invariant SNR in dB; (B, T) -> (B,), or scalar for 1-D input.

    The estimate is projected onto the reference; the ratio of squared norms
    of projection and residual goes through 10*log10 and is clamped to
    +-clamp_db (a perfect match would otherwise be +inf).
    """
    if est.shape != ref.shape:
        raise ValueError("estimate and reference must share shape")
    single = est.ndim == 1
    if single:
        est = est.unsqueeze(0)
        ref = ref.unsqueeze(0)
    if est.ndim != 2:
        raise ValueError("expected (batch, samples)")
    if zero_mean:
        est = est - est.mean(dim=-1, keepdim=True)
        ref = ref - ref.mean(dim=-1, keepdim=True)
    ref_pow = ref.pow(2).sum(dim=-1, keepdim=True)
    if bool((ref_pow <= 0).any()):
        raise ValueError("reference has zero power")
    # rescale the estimate to the reference norm: a no-op for the measure,
    # but it keeps the eps floors scale-free for very quiet estimates
    est_norm = est.pow(2).sum(dim=-1, keepdim=True).sqrt()
    est = est * (ref_pow.sqrt() / est_norm.clamp_min(1e-12))
    dot = (est * ref).sum(dim=-1, keepdim=True)
    proj = dot / ref_pow * ref
    err = est - proj
    num = proj.pow(2).sum(dim=-1)
    den = err.pow(2).sum(dim=-1)
    val = 10.0 * torch.log10(num.clamp_min(eps) / den.clamp_min(eps))
    val = val.clamp(-clamp_db, clamp_db)
    return val.squeeze(0) if single else val


def curriculum_alpha(epoch: int, ep_cr: int) -> float:
    """Linear ramp: epoch/ep_cr until the crossover epoch, then 1."""
    if ep_cr <= 0:
        raise ValueError("crossover epoch must be positive")
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return min(1.0, epoch / ep_cr)


def curriculum_blend(
    est: torch.Tensor,
    truth: torch.Tensor,
    alpha: float,
    mode: str = "squared_norm",
) -> torch.Tensor:
    """alpha * est + (1 - alpha) * factor * truth, per item.

    The literal factor is the squared-norm ratio ||est||^2 / ||truth||^2; the
    "rms" mode uses the norm ratio instead (same quantity square-rooted).
    """
    if est.shape != truth.shape:
        raise ValueError("estimate and truth must share shape")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha outside [0, 1]")
    e2 = est.pow(2).sum(dim=-1, keepdim=True)
    t2 = truth.pow(2).sum(dim=-1, keepdim=True).clamp_min(1e-12)
    if mode == "squared_norm":
        factor = e2 / t2
    elif mode == "rms":
        factor = (e2 / t2).sqrt()
    else:
        raise ValueError(f"unknown blend mode {mode!r}")
    return alpha * est + (1.0 - alpha) * factor * truth


def build_training_memory(
    x: torch.Tensor,
    n_slots: int,
    t_sh: int,
    rng: np.random.Generator,
) -> torch.Tensor:
    """(B, T) -> (B, N, T): shifted prefixes, left-zero-padded, shuffled.

    Slot i (before the shuffle) holds the first T - i*t_sh samples behind
    i*t_sh leading zeros. t_sh = 0 degenerates to N identical copies.
    Requires n_slots * t_sh < T so every slot keeps some signal.
    """
    if x.ndim != 2:
        raise ValueError("expected (batch, samples)")
    b, t = x.shape
    if n_slots < 1:
        raise ValueError("need at least one slot")
    if t_sh < 0:
        raise ValueError("shift must be >= 0")
    if n_slots * t_sh >= t:
        raise ValueError("n_slots * t_sh must stay below the sample count")
    items = []
    for i in range(1, n_slots + 1):
        keep = t - i * t_sh
        pad = x.new_zeros(b, i * t_sh)
        items.append(torch.cat([pad, x[:, :keep]], dim=-1))
    memory = torch.stack(items, dim=1)
    perm = torch.from_numpy(rng.permutation(n_slots))
    return memory[:, perm]


@dataclass
class TrainConfig:
    bank_mode: str = "contextual"  # speaker | contextual | both
    init_mode: str = "v"  # v | vp
    loss_beta: float = 0.2
    ep_cr: int = 50
    blend_mode: str = "squared_norm"
    detach_stage1: bool = False
    store_norm: bool = True
    slots_lo: int = 1
    slots_hi: int = 5
    shift_lo: int = 0
    shift_hi: int = 16000
    lr: float = 1e-3
    lr_patience: int = 6
    stop_patience: int = 10
    max_epochs: int = 100
    batch_size: int = 8
    seed: int = 0
    freeze_speaker_encoder: bool = True

    def validate(self) -> None:
        if self.bank_mode not in ("speaker", "contextual", "both"):
            raise ValueError(f"unknown bank mode {self.bank_mode!r}")
        if self.init_mode not in ("v", "vp"):
            raise ValueError(f"unknown init mode {self.init_mode!r}")
        if not 0.0 <= self.loss_beta <= 1.0:
            raise ValueError("loss beta outside [0, 1]")
        if not 1 <= self.slots_lo <= self.slots_hi:
            raise ValueError("bad slot range")
        if not 0 <= self.shift_lo <= self.shift_hi:
            raise ValueError("bad shift range")


@dataclass
class StepOutput:
    loss: torch.Tensor
    loss_stage1: float
    loss_stage2: float
    alpha: float
    n_slots: int
    t_sh: int
    est_stage1: torch.Tensor
    est_stage2: torch.Tensor


def _unit_rms(x: torch.Tensor) -> torch.Tensor:
    rms = x.pow(2).mean(dim=-1, keepdim=True).sqrt()
    return x / rms.clamp_min(1e-12)


def collate(bundles: list, dtype: torch.dtype = torch.float32) -> dict[str, torch.Tensor]:
    """Stack equally-sized mixture bundles into training tensors."""
    if not bundles:
        raise ValueError("empty batch")
    n = len(bundles[0].mixture)
    if any(len(b.mixture) != n for b in bundles):
        raise ValueError("batch items must share length")
    return {
        "mixture": torch.stack(
            [torch.from_numpy(b.mixture.samples).to(dtype) for b in bundles]
        ),
        "target": torch.stack(
            [torch.from_numpy(b.target.samples).to(dtype) for b in bundles]
        ),
        "frames": torch.stack(
            [torch.from_numpy(b.cues.frames).to(dtype) for b in bundles]
        ),
        "pre_enrolled": torch.stack(
            [torch.from_numpy(b.pre_enrolled.samples).to(dtype) for b in bundles]
        ),
    }


def memory_features(
    model: TseNet,
    memory: torch.Tensor,
    mixture_latents: torch.Tensor,
    bank_mode: str,
    length: int,
    store_norm: bool = True,
) -> tuple[torch.Tensor | None, torch.Tensor | None]:
    """Encode (B, N, T) memory segments and retrieve bank features.

    Returns (speaker_feat, context_feat), each (B, L, C) or None depending on
    which banks the mode configures.
    """
    b, n_slots, t = memory.shape
    if store_norm:
        memory = _unit_rms(memory)
    flat = memory.reshape(b * n_slots, t)
    speaker_feat = None
    context_feat = None
    if bank_mode in ("speaker", "both"):
        vecs = model.speaker_encoder(flat).reshape(b, n_slots, -1)
        pooled, _ = model.speaker_retrieval(vecs)
        speaker_feat = model.speaker_feature_from_vec(pooled, length)
    if bank_mode in ("contextual", "both"):
        slots = model.encode_window(flat).reshape(b, n_slots, length, -1)
        context_feat, _, _ = model.context_retrieval(slots, mixture_latents)
    return speaker_feat, context_feat


def two_stage_step(
    model: TseNet,
    batch: dict[str, torch.Tensor],
    cfg: TrainConfig,
    epoch: int,
    rng: np.random.Generator,
) -> StepOutput:
    mix = batch["mixture"]
    target = batch["target"]
    frames = batch["frames"]
    b, t = mix.shape
    length = model.latent_len(t)
    y = model.encode_window(mix)
    v = model.encode_cues(frames, length)

    speaker_feat = None
    if cfg.init_mode == "vp":
        svec = model.speaker_encoder(batch["pre_enrolled"])
        pooled, _ = model.speaker_retrieval(svec.unsqueeze(1))
        speaker_feat = model.speaker_feature_from_vec(pooled, length)
    masked1, _ = model.extract_latents(y, v, speaker_feat, None)
    est1 = model.decoder(masked1, t)

    alpha = curriculum_alpha(epoch, cfg.ep_cr)
    basis = est1.detach() if cfg.detach_stage1 else est1
    blended = curriculum_blend(basis, target, alpha, cfg.blend_mode)
    n_slots = int(rng.integers(cfg.slots_lo, cfg.slots_hi + 1))
    shift_hi = min(cfg.shift_hi, (t - 1) // n_slots)
    shift_lo = min(cfg.shift_lo, shift_hi)
    t_sh = int(rng.integers(shift_lo, shift_hi + 1))
    memory = build_training_memory(blended, n_slots, t_sh, rng)
    speaker_feat2, context_feat2 = memory_features(
        model, memory, y, cfg.bank_mode, length, cfg.store_norm
    )
    masked2, _ = model.extract_latents(y, v, speaker_feat2, context_feat2)
    est2 = model.decoder(masked2, t)

    loss1 = -si_snr(est1, target).mean()
    loss2 = -si_snr(est2, target).mean()
    loss = cfg.loss_beta * loss1 + (1.0 - cfg.loss_beta) * loss2
    return StepOutput(
        loss=loss,
        loss_stage1=float(loss1.detach()),
        loss_stage2=float(loss2.detach()),
        alpha=alpha,
        n_slots=n_slots,
        t_sh=t_sh,
        est_stage1=est1,
        est_stage2=est2,
    )


class PatienceTracker:
    """Best-value tracking with LR-halving and stop thresholds.

    The halve signal fires exactly once per non-improving streak, at
    lr_patience consecutive stale epochs; stop fires at stop_patience.
    """

    def __init__(self, lr_patience: int = 6, stop_patience: int = 10):
        self.lr_patience = lr_patience
        self.stop_patience = stop_patience
        self.best = math.inf
        self.stale = 0

    def update(self, value: float) -> dict[str, bool]:
        if value < self.best:
            self.best = value
            self.stale = 0
            return {"improved": True, "halve": False, "stop": False}
        self.stale += 1
        return {
            "improved": False,
            "halve": self.stale == self.lr_patience,
            "stop": self.stale >= self.stop_patience,
        }

    def state(self) -> dict:
        return {"best": self.best, "stale": self.stale}

    def load_state(self, state: dict) -> None:
        self.best = state["best"]
        self.stale = state["stale"]


@dataclass
class TrainResult:
    best_path: str
    last_path: str
    history: list[dict] = field(default_factory=list)
    stopped_early: bool = False
    final_epoch: int = 0


def _epoch_rng(seed: int, epoch: int, tag: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFF, epoch, tag])


def _run_validation(
    model: TseNet, val_batches: list[dict], cfg: TrainConfig, epoch: int
) -> tuple[float, float]:
    """Mean two-stage loss and stage-2 SI-SNR over the validation set.

    Slot/shift draws come from a fixed (epoch-independent) stream so the
    validation task itself does not drift between epochs, and the memory is
    always built from the model's own estimates (the curriculum endpoint,
    alpha=1) rather than the current ramp value: mid-ramp validation blends
    ground truth into the memory, which inflates scores, makes checkpoints
    from different epochs incomparable, and lets patience fire right after
    the ramp ends when the inflation disappears.
    """
    rng = _epoch_rng(cfg.seed, 0, 0x7A1)
    model.eval()
    losses = []
    snrs = []
    with torch.no_grad():
        for batch in val_batches:
            out = two_stage_step(model, batch, cfg, max(epoch, cfg.ep_cr), rng)
            losses.append(float(out.loss))
            snrs.append(float(si_snr(out.est_stage2, batch["target"]).mean()))
    model.train()
    return float(np.mean(losses)), float(np.mean(snrs))


def _write_history(path: Path, history: list[dict]) -> None:
    if not history:
        return
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(history[0].keys()))
        writer.writeheader()
        writer.writerows(history)


def train(
    model: TseNet,
    train_bundles: list,
    val_bundles: list,
    cfg: TrainConfig,
    run_dir: str | Path,
    resume_from: str | Path | None = None,
) -> TrainResult:
    """Full training loop: Adam, patience-driven LR halving and early stop,
    best/last checkpoints, CSV history, divergence abort."""
    cfg.validate()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    best_path = run_dir / "best.pt"
    last_path = run_dir / "last.pt"

    if cfg.freeze_speaker_encoder:
        for p in model.speaker_encoder.parameters():
            p.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=cfg.lr)
    tracker = PatienceTracker(cfg.lr_patience, cfg.stop_patience)
    history: list[dict] = []
    start_epoch = 0
    last_good: str | None = None

    if resume_from is not None:
        model_loaded, payload = load_checkpoint(resume_from)
        model.load_state_dict(model_loaded.state_dict())
        if payload["optimizer"] is not None:
            optimizer.load_state_dict(payload["optimizer"])
        state = payload["train_state"] or {}
        start_epoch = int(state.get("epoch", -1)) + 1
        tracker.load_state(state.get("patience", tracker.state()))
        history = list(state.get("history", []))
        last_good = str(resume_from)

    val_batches = [
        collate(val_bundles[i : i + cfg.batch_size])
        for i in range(0, len(val_bundles), cfg.batch_size)
    ]

    model.train()
    result = TrainResult(best_path=str(best_path), last_path=str(last_path), history=history)
    for epoch in range(start_epoch, cfg.max_epochs):
        rng = _epoch_rng(cfg.seed, epoch, 0x7E0)
        order = rng.permutation(len(train_bundles))
        epoch_losses = []
        stage1_losses = []
        stage2_losses = []
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            batch = collate([train_bundles[i] for i in idx])
            out = two_stage_step(model, batch, cfg, epoch, rng)
            if not torch.isfinite(out.loss):
                diagnostics = {
                    "epoch": epoch,
                    "alpha": out.alpha,
                    "loss_stage1": out.loss_stage1,
                    "loss_stage2": out.loss_stage2,
                }
                _write_history(run_dir / "history.csv", history)
                raise TrainingDivergence(
                    f"non-finite loss at epoch {epoch}", diagnostics, last_good
                )
            optimizer.zero_grad()
            out.loss.backward()
            optimizer.step()
            epoch_losses.append(float(out.loss.detach()))
            stage1_losses.append(out.loss_stage1)
            stage2_losses.append(out.loss_stage2)

        val_loss, val_snr = _run_validation(model, val_batches, cfg, epoch)
        lr_now = optimizer.param_groups[0]["lr"]
        record = {
            "epoch": epoch,
            "alpha": round(curriculum_alpha(epoch, cfg.ep_cr), 6),
            "train_loss": round(float(np.mean(epoch_losses)), 6),
            "loss_stage1": round(float(np.mean(stage1_losses)), 6),
            "loss_stage2": round(float(np.mean(stage2_losses)), 6),
            "val_loss": round(val_loss, 6),
            "val_si_snr_db": round(val_snr, 6),
            "lr": lr_now,
        }
        history.append(record)

        verdict = tracker.update(val_loss)
        train_state = {
            "epoch": epoch,
            "patience": tracker.state(),
            "history": history,
            "config": asdict(cfg),
        }
        seeds = {"run": cfg.seed, "init": model.cfg.init_seed}
        save_checkpoint(
            last_path, model, seeds=seeds, optimizer=optimizer, train_state=train_state
        )
        last_good = str(last_path)
        if verdict["improved"]:
            save_checkpoint(
                best_path, model, seeds=seeds, optimizer=optimizer, train_state=train_state
            )
        if verdict["halve"]:
            for group in optimizer.param_groups:
                group["lr"] = group["lr"] * 0.5
        result.final_epoch = epoch
        if verdict["stop"]:
            result.stopped_early = True
            break

    if not best_path.exists():
        save_checkpoint(best_path, model, seeds={"run": cfg.seed})
    _write_history(run_dir / "history.csv", history)
    result.history = history
    return result


def pretrain_speaker_encoder(
    model: TseNet,
    speaker_ids: list[str],
    seed: int = 0,
    utterances_per_speaker: int = 12,
    duration_s: float = 2.0,
    epochs: int = 8,
    lr: float = 1e-3,
    batch_size: int = 16,
    freeze: bool = True,
) -> dict:
    """Short classification warm-up for the speaker encoder.

    Synthesizes a small labeled corpus, trains encoder + a throwaway linear
    head with cross-entropy, optionally freezes the encoder afterward.
    Returns training accuracy from the final epoch.
    """
    from .encoders import seed_parameters

    waves = []
    labels = []
    for si, spk in enumerate(speaker_ids):
        for u in range(utterances_per_speaker):
            w = signals.synth_speaker(spk, duration_s, seed=seed * 7919 + si * 131 + u)
            waves.append(torch.from_numpy(w.samples).float())
            labels.append(si)
    data = torch.stack(waves)
    target = torch.tensor(labels)

    head = seed_parameters(nn.Linear(model.cfg.channels, len(speaker_ids)), seed + 1)
    for p in model.speaker_encoder.parameters():
        p.requires_grad_(True)
    optimizer = torch.optim.Adam(
        list(model.speaker_encoder.parameters()) + list(head.parameters()), lr=lr
    )
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 0x5BE])
    accuracy = 0.0
    for _ in range(epochs):
        order = rng.permutation(len(data))
        hits = 0
        for lo in range(0, len(order), batch_size):
            idx = torch.from_numpy(order[lo : lo + batch_size].copy())
            emb = model.speaker_encoder(data[idx])
            logits = head(emb)
            loss = nn.functional.cross_entropy(logits, target[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            hits += int((logits.argmax(dim=-1) == target[idx]).sum())
        accuracy = hits / len(data)
    if freeze:
        for p in model.speaker_encoder.parameters():
            p.requires_grad_(False)
    return {"accuracy": accuracy, "items": len(data)}
