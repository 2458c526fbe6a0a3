"""Command-line entry points.

One JSON config file drives everything; subcommands cover corpus synthesis
(simulate), model training (train), the evaluation grid (eval), target-switch
streaming (switch-eval), and one-axis parameter sweeps (sweep).

Exit codes: 0 on success, 2 for configuration problems (unknown keys, bad
values, unreadable files), 3 when training diverges.

Report CSVs are byte-identical across repeated runs except for the wall-clock
columns named in WALL_COLUMNS.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics, signals
from .model import ModelConfig, TseNet, load_checkpoint
from .streaming import (
    StreamConfig,
    measure_rtf,
    run_offline,
    run_stream,
    run_switch_stream,
)
from .training import (
    TrainConfig,
    TrainingDivergence,
    pretrain_speaker_encoder,
    train,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

WALL_COLUMNS = ("wall_s", "rtf")

_SETTINGS = ("visual_only", "self_enro", "pre_enro", "tgt_enro")
_CONDITIONS = ("clean", "impaired")
_MODES = ("online", "offline")
# A "clean" item keeps a valid impairment name but zero ratio, which the cue
# corruption pass treats as a copy.
_TEST_IMPAIRMENTS = ("missing", "occluded", "low_res")
_TRAIN_IMPAIRMENTS = (None,) + _TEST_IMPAIRMENTS


class ConfigError(Exception):
    pass


@dataclass
class DataConfig:
    n_speakers: int = 8
    train_speakers: int = 5
    train_mixtures: int = 512
    val_mixtures: int = 64
    test_mixtures: int = 64
    train_duration_s: float = 4.0
    test_duration_s: float = 6.0
    switch_streams: int = 16
    switch_duration_s: float = 12.0
    snr_lo: float = -10.0
    snr_hi: float = 10.0
    ratio_lo: float = 0.4
    ratio_hi: float = 0.8
    protect_prefix_s: float = 2.0
    seed: int = 0

    def validate(self) -> None:
        if self.train_speakers < 2 or self.n_speakers - self.train_speakers < 2:
            raise ConfigError("need at least two speakers in each split")
        if not -10.0 <= self.snr_lo <= self.snr_hi <= 10.0:
            raise ConfigError("snr range must sit inside [-10, 10]")
        if not 0.0 <= self.ratio_lo <= self.ratio_hi < 1.0:
            raise ConfigError("impairment ratio range must sit inside [0, 1)")
        if min(self.train_duration_s, self.test_duration_s) <= 0:
            raise ConfigError("durations must be positive")


@dataclass
class PretrainConfig:
    enabled: bool = True
    epochs: int = 6
    utterances_per_speaker: int = 8
    duration_s: float = 1.0
    lr: float = 1e-3

    def validate(self) -> None:
        if self.epochs < 1 or self.utterances_per_speaker < 1:
            raise ConfigError("pretrain epochs and utterances must be positive")


@dataclass
class EvalConfig:
    settings: list[str] = field(default_factory=lambda: list(_SETTINGS))
    conditions: list[str] = field(default_factory=lambda: list(_CONDITIONS))
    modes: list[str] = field(default_factory=lambda: list(_MODES))
    max_items: int | None = None

    def validate(self) -> None:
        for name, allowed, got in (
            ("settings", _SETTINGS, self.settings),
            ("conditions", _CONDITIONS, self.conditions),
            ("modes", _MODES, self.modes),
        ):
            bad = [x for x in got if x not in allowed]
            if bad:
                raise ConfigError(f"unknown eval {name}: {bad}")
            if not got:
                raise ConfigError(f"eval {name} must not be empty")


@dataclass
class SweepConfig:
    slots: list[int] = field(default_factory=lambda: [1, 2, 3, 5])
    policies: list[str] = field(default_factory=lambda: ["fifo", "abs"])
    windows: list[int] = field(default_factory=lambda: [16000, 32000, 48000])
    shifts: list[int] = field(default_factory=lambda: [1600, 3200, 6400])
    ratio_bins: list[float] = field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6, 0.8])
    betas: list[float] = field(default_factory=lambda: [0.0, 0.2, 0.5])
    max_items: int | None = 16
    beta_epochs: int = 2
    beta_train_items: int = 32

    def validate(self) -> None:
        if any(s < 1 for s in self.slots):
            raise ConfigError("sweep slots must be positive")
        if any(p not in ("fifo", "abs") for p in self.policies):
            raise ConfigError("sweep policies must be fifo or abs")
        if len(self.ratio_bins) < 2 or sorted(self.ratio_bins) != list(self.ratio_bins):
            raise ConfigError("ratio_bins must be sorted edges")
        if any(not 0.0 <= b <= 1.0 for b in self.betas):
            raise ConfigError("betas must sit inside [0, 1]")


@dataclass
class ExperimentConfig:
    data: DataConfig
    model: ModelConfig
    train: TrainConfig
    stream: StreamConfig
    eval: EvalConfig
    sweep: SweepConfig
    pretrain: PretrainConfig


_SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "stream": StreamConfig,
    "eval": EvalConfig,
    "sweep": SweepConfig,
    "pretrain": PretrainConfig,
}


def _build_section(cls, raw: dict, name: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in section {name!r}: {unknown}")
    try:
        obj = cls(**raw)
    except TypeError as err:
        raise ConfigError(f"bad value in section {name!r}: {err}") from err
    try:
        obj.validate()
    except ValueError as err:
        raise ConfigError(f"invalid section {name!r}: {err}") from err
    return obj


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        with open(path) as f:
            raw = json.load(f)
    except OSError as err:
        raise ConfigError(f"cannot read config: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from err
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {unknown}")
    parts = {
        name: _build_section(cls, raw.get(name, {}), name)
        for name, cls in _SECTIONS.items()
    }
    return ExperimentConfig(**parts)


def speaker_pool(data: DataConfig, split: str) -> list[str]:
    if split in ("train", "val"):
        return [f"spk_{i}" for i in range(data.train_speakers)]
    return [f"spk_{i}" for i in range(data.train_speakers, data.n_speakers)]


_SPLIT_TAGS = {"train": 1, "val": 2, "test": 3, "switch": 4}


def _item_seed(data_seed: int, tag: int, i: int) -> int:
    return ((data_seed * 8 + tag) * 1_000_003 + i) & 0x7FFFFFFF


def make_mixture_specs(data: DataConfig, split: str) -> list[signals.MixtureSpec]:
    """Deterministic mixture recipes for one split.

    Train and validation items mix the training speakers and include clean
    cue streams; test items use held-out speakers and always carry one of
    the three impairments.
    """
    tag = _SPLIT_TAGS[split]
    pool = speaker_pool(data, split)
    count = {
        "train": data.train_mixtures,
        "val": data.val_mixtures,
        "test": data.test_mixtures,
    }[split]
    duration = data.train_duration_s if split in ("train", "val") else data.test_duration_s
    rng = np.random.default_rng([data.seed & 0xFFFFFFFF, tag, 0xD47A])
    specs = []
    for i in range(count):
        t_idx, i_idx = rng.choice(len(pool), size=2, replace=False)
        snr = float(rng.uniform(data.snr_lo, data.snr_hi))
        ratio = float(rng.uniform(data.ratio_lo, data.ratio_hi))
        if split == "test":
            itype = _TEST_IMPAIRMENTS[i % 3]
        else:
            itype = _TRAIN_IMPAIRMENTS[i % 4]
            if itype is None:
                itype, ratio = _TEST_IMPAIRMENTS[0], 0.0
        specs.append(
            signals.MixtureSpec(
                target_id=pool[t_idx],
                interferer_id=pool[i_idx],
                snr_db=round(snr, 3),
                duration_s=duration,
                impairment_type=itype,
                impairment_ratio=round(ratio, 3),
                seed=_item_seed(data.seed, tag, i),
                protect_prefix_s=data.protect_prefix_s,
            )
        )
    return specs


def make_switch_specs(data: DataConfig) -> list[signals.SwitchSpec]:
    pool = speaker_pool(data, "test")
    if len(pool) < 3:
        raise ConfigError("switch streams need at least three held-out speakers")
    rng = np.random.default_rng([data.seed & 0xFFFFFFFF, _SPLIT_TAGS["switch"], 0xD47A])
    specs = []
    for i in range(data.switch_streams):
        trio = [pool[j] for j in rng.permutation(len(pool))[:3]]
        specs.append(
            signals.SwitchSpec(
                speaker_a=trio[0],
                speaker_b=trio[1],
                interferer=trio[2],
                switch_time_s=round(float(rng.uniform(4.0, 6.0)), 3),
                total_duration_s=data.switch_duration_s,
                seed=_item_seed(data.seed, _SPLIT_TAGS["switch"], i),
                protect_prefix_s=data.protect_prefix_s,
            )
        )
    return specs


def _clean_variant(spec: signals.MixtureSpec) -> signals.MixtureSpec:
    return dataclasses.replace(spec, impairment_ratio=0.0)


def _load_model(path: str) -> TseNet:
    try:
        model, _ = load_checkpoint(path)
    except (OSError, KeyError, ValueError, RuntimeError) as err:
        raise ConfigError(f"cannot load checkpoint {path!r}: {err}") from err
    model.eval()
    return model


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args, cfg: ExperimentConfig) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = ["train", "val", "test", "switch"] if args.split == "all" else [args.split]
    for split in splits:
        if split == "switch":
            specs = make_switch_specs(cfg.data)
            entries = [signals.switch_spec_to_entry(s) for s in specs]
        else:
            specs = make_mixture_specs(cfg.data, split)
            entries = [signals.mixture_spec_to_entry(s) for s in specs]
        if args.count is not None:
            specs, entries = specs[: args.count], entries[: args.count]
        manifest = out_dir / f"manifest_{split}.jsonl"
        signals.write_manifest(manifest, entries)
        print(f"{split}: wrote {len(entries)} specs to {manifest}")
        if args.write_audio:
            audio_dir = out_dir / "audio" / split
            audio_dir.mkdir(parents=True, exist_ok=True)
            for i, spec in enumerate(specs):
                stem = audio_dir / f"m{i:03d}"
                if split == "switch":
                    bundle = signals.build_switch_mixture(spec)
                    pairs = [("mixture", bundle.mixture), ("target", bundle.target)]
                else:
                    bundle = signals.build_mixture(spec)
                    pairs = [
                        ("mixture", bundle.mixture),
                        ("target", bundle.target),
                        ("pre_enrolled", bundle.pre_enrolled),
                    ]
                for name, wave in pairs:
                    signals.write_wav(f"{stem}_{name}.wav", wave, peak_normalize=True)
                signals.write_cues(f"{stem}_cues.csv", bundle.cues)
            print(f"{split}: wrote audio for {len(specs)} items to {audio_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def cmd_train(args, cfg: ExperimentConfig) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_specs = make_mixture_specs(cfg.data, "train")
    val_specs = make_mixture_specs(cfg.data, "val")
    print(f"building {len(train_specs)} train / {len(val_specs)} val mixtures")
    train_bundles = [signals.build_mixture(s) for s in train_specs]
    val_bundles = [signals.build_mixture(s) for s in val_specs]

    model = TseNet(cfg.model)
    if cfg.pretrain.enabled:
        report = pretrain_speaker_encoder(
            model,
            speaker_pool(cfg.data, "train"),
            seed=cfg.train.seed,
            utterances_per_speaker=cfg.pretrain.utterances_per_speaker,
            duration_s=cfg.pretrain.duration_s,
            epochs=cfg.pretrain.epochs,
            lr=cfg.pretrain.lr,
            freeze=cfg.train.freeze_speaker_encoder,
        )
        print(f"speaker encoder warm-up accuracy: {report['accuracy']:.3f}")

    try:
        result = train(
            model, train_bundles, val_bundles, cfg.train, out_dir, resume_from=args.resume
        )
    except TrainingDivergence as err:
        print(f"training diverged: {err}", file=sys.stderr)
        print(f"diagnostics: {err.diagnostics}", file=sys.stderr)
        if err.last_good:
            print(f"last good checkpoint: {err.last_good}", file=sys.stderr)
        return EXIT_DIVERGED
    last = result.history[-1] if result.history else {}
    print(
        f"finished at epoch {result.final_epoch}"
        f" (val loss {last.get('val_loss')}, val si-snr {last.get('val_si_snr_db')} dB)"
    )
    print(f"best checkpoint: {result.best_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _score_item(
    model: TseNet,
    bundle: signals.MixtureBundle,
    stream_cfg: StreamConfig,
    mode: str,
) -> tuple[dict, float]:
    mix = bundle.mixture.samples
    frames = bundle.cues.frames
    kwargs = {}
    if stream_cfg.eval_setting == "pre_enro":
        kwargs["pre_enrolled"] = bundle.pre_enrolled.samples
    if stream_cfg.eval_setting == "tgt_enro":
        kwargs["target"] = bundle.target.samples
    if mode == "online":
        result = run_stream(model, mix, frames, stream_cfg, **kwargs)
    else:
        result = run_offline(model, mix, frames, stream_cfg, **kwargs)
    row = metrics.score(result.estimate, bundle.target.samples, mix)
    return row, measure_rtf(result)


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = _load_model(args.checkpoint)
    specs = make_mixture_specs(cfg.data, "test")
    if cfg.eval.max_items is not None:
        specs = specs[: cfg.eval.max_items]

    rows: list[dict] = []
    cells: dict[str, dict] = {}
    for setting in cfg.eval.settings:
        for condition in cfg.eval.conditions:
            cell_specs = [_clean_variant(s) if condition == "clean" else s for s in specs]
            for mode in cfg.eval.modes:
                key = f"{setting}|{condition}|{mode}"
                stream_cfg = dataclasses.replace(cfg.stream, eval_setting=setting)
                cell_rows = []
                try:
                    for i, spec in enumerate(cell_specs):
                        bundle = signals.build_mixture(spec)
                        scored, rtf = _score_item(model, bundle, stream_cfg, mode)
                        cell_rows.append(
                            {
                                "item": f"test_{i:03d}",
                                "setting": setting,
                                "condition": condition,
                                "mode": mode,
                                "impairment_type": spec.impairment_type,
                                "impairment_ratio": spec.impairment_ratio,
                                "snr_db": spec.snr_db,
                                **{k: round(v, 6) for k, v in scored.items()},
                                "rtf": round(rtf, 5),
                            }
                        )
                except ValueError as err:
                    cells[key] = {"status": "n/a", "reason": str(err)}
                    print(f"{key}: n/a ({err})")
                    continue
                rows.extend(cell_rows)
                agg = metrics.aggregate(cell_rows)
                agg["status"] = "ok"
                cells[key] = agg
                print(
                    f"{key}: mean si-snri "
                    f"{agg.get('mean_si_snri_db', float('nan')):+.2f} dB"
                    f" over {agg['count']} items"
                )
    if rows:
        metrics.write_report_csv(out_dir / "report.csv", rows)
    summary = {"cells": cells, "overall": metrics.aggregate(rows)}
    metrics.write_aggregate_json(out_dir / "aggregate.json", summary)
    print(f"wrote {out_dir / 'report.csv'} and {out_dir / 'aggregate.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# switch-eval


def _trace_rows(result) -> list[dict]:
    rows = []
    for s in result.steps:
        rows.append(
            {
                "k": s.k,
                "start": s.start,
                "end": s.end,
                "emit_start": s.emit_start,
                "emit_end": s.emit_end,
                "speaker_before": s.sizes_before.get("speaker", ""),
                "speaker_after": s.sizes_after.get("speaker", ""),
                "context_before": s.sizes_before.get("context", ""),
                "context_after": s.sizes_after.get("context", ""),
                "norm_scale": s.norm_scale,
                "emitted_energy": s.emitted_energy,
                "cumulative_energy": s.cumulative_energy,
                "wall_ms": round(s.wall_ms, 3),
            }
        )
    return rows


def cmd_switch_eval(args, cfg: ExperimentConfig) -> int:
    out_dir = Path(args.out_dir)
    traces_dir = out_dir / "traces"
    traces_dir.mkdir(parents=True, exist_ok=True)
    model = _load_model(args.checkpoint)
    specs = make_switch_specs(cfg.data)
    if cfg.eval.max_items is not None:
        specs = specs[: cfg.eval.max_items]

    settings = [s for s in cfg.eval.settings if s != "pre_enro"]
    cells: dict[str, dict] = {}
    if "pre_enro" in cfg.eval.settings:
        cells["pre_enro"] = {
            "status": "n/a",
            "reason": "no enrollment exists for the post-switch talker",
        }
    rows: list[dict] = []
    for i, spec in enumerate(specs):
        bundle = signals.build_switch_mixture(spec)
        mix = bundle.mixture.samples
        frames = bundle.cues.frames
        duration_s = len(mix) / signals.SAMPLE_RATE
        switch_s = bundle.switch_sample / signals.SAMPLE_RATE
        baseline_post = None
        for setting in ["visual_only"] + [s for s in settings if s != "visual_only"]:
            stream_cfg = dataclasses.replace(cfg.stream, eval_setting=setting)
            result = run_switch_stream(
                model,
                mix,
                frames,
                bundle.switch_sample,
                stream_cfg,
                target=bundle.target.samples,
            )
            segments = metrics.segmental_si_snr(
                result.estimate,
                bundle.target.samples,
                [0.0, switch_s, duration_s],
                signals.SAMPLE_RATE,
            )
            pre_db = segments[0]["si_snr_db"] if len(segments) > 0 else None
            post_db = segments[1]["si_snr_db"] if len(segments) > 1 else None
            if setting == "visual_only":
                baseline_post = post_db
            if setting not in settings:
                continue
            rows.append(
                {
                    "item": f"switch_{i:03d}",
                    "setting": setting,
                    "snr_db": round(bundle.snr_db, 3),
                    "switch_s": round(switch_s, 3),
                    "reset_step": result.reset_step,
                    "pre_si_snr_db": round(pre_db, 6) if pre_db is not None else "",
                    "post_si_snr_db": round(post_db, 6) if post_db is not None else "",
                    "post_bankless_db": round(baseline_post, 6)
                    if baseline_post is not None
                    else "",
                    "si_snri_db": round(
                        metrics.si_snri_db(result.estimate, bundle.target.samples, mix), 6
                    ),
                }
            )
            trace_rows = _trace_rows(result)
            metrics.write_report_csv(
                traces_dir / f"switch_{i:03d}_{setting}.csv", trace_rows
            )

    for setting in settings:
        members = [r for r in rows if r["setting"] == setting]
        pre = [float(r["pre_si_snr_db"]) for r in members if r["pre_si_snr_db"] != ""]
        post = [float(r["post_si_snr_db"]) for r in members if r["post_si_snr_db"] != ""]
        cells[setting] = {
            "status": "ok",
            "count": len(members),
            "mean_pre_si_snr_db": float(np.mean(pre)) if pre else None,
            "mean_post_si_snr_db": float(np.mean(post)) if post else None,
        }
        if pre and post:
            cells[setting]["mean_post_minus_pre_db"] = float(
                np.mean(post) - np.mean(pre)
            )
            print(
                f"{setting}: pre {np.mean(pre):+.2f} dB, post {np.mean(post):+.2f} dB"
            )
    if rows:
        metrics.write_report_csv(out_dir / "switch_report.csv", rows)
    metrics.write_aggregate_json(out_dir / "switch_aggregate.json", {"cells": cells})
    print(f"wrote {out_dir / 'switch_report.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep


def _sweep_items(cfg: ExperimentConfig) -> list[signals.MixtureBundle]:
    specs = make_mixture_specs(cfg.data, "test")
    if cfg.sweep.max_items is not None:
        specs = specs[: cfg.sweep.max_items]
    return [signals.build_mixture(s) for s in specs]


def _mean_over_items(model, bundles, stream_cfg) -> tuple[float, float]:
    scores = []
    rtfs = []
    for bundle in bundles:
        scored, rtf = _score_item(model, bundle, stream_cfg, "online")
        scores.append(scored["si_snri_db"])
        rtfs.append(rtf)
    return float(np.mean(scores)), float(np.mean(rtfs))


def cmd_sweep(args, cfg: ExperimentConfig) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []

    if args.axis == "beta":
        train_specs = make_mixture_specs(cfg.data, "train")[: cfg.sweep.beta_train_items]
        val_specs = make_mixture_specs(cfg.data, "val")[
            : max(2, cfg.sweep.beta_train_items // 4)
        ]
        train_bundles = [signals.build_mixture(s) for s in train_specs]
        val_bundles = [signals.build_mixture(s) for s in val_specs]
        for beta in cfg.sweep.betas:
            model = TseNet(cfg.model)
            run_cfg = dataclasses.replace(
                cfg.train, loss_beta=beta, max_epochs=cfg.sweep.beta_epochs
            )
            try:
                result = train(
                    model,
                    train_bundles,
                    val_bundles,
                    run_cfg,
                    out_dir / f"beta_{beta:g}",
                )
            except TrainingDivergence as err:
                print(f"beta={beta:g} diverged: {err}", file=sys.stderr)
                return EXIT_DIVERGED
            last = result.history[-1]
            rows.append(
                {
                    "beta": beta,
                    "epochs": len(result.history),
                    "final_val_loss": last["val_loss"],
                    "final_val_si_snr_db": last["val_si_snr_db"],
                }
            )
            print(f"beta={beta:g}: val loss {last['val_loss']}")
    else:
        if args.checkpoint is None:
            raise ConfigError(f"sweep axis {args.axis!r} needs --checkpoint")
        model = _load_model(args.checkpoint)
        bundles = _sweep_items(cfg)
        base = dataclasses.replace(cfg.stream, eval_setting="self_enro")
        if args.axis == "slots":
            for capacity in cfg.sweep.slots:
                for policy in cfg.sweep.policies:
                    stream_cfg = dataclasses.replace(base, capacity=capacity, policy=policy)
                    mean_db, _ = _mean_over_items(model, bundles, stream_cfg)
                    rows.append(
                        {
                            "capacity": capacity,
                            "policy": policy,
                            "mean_si_snri_db": round(mean_db, 6),
                            "count": len(bundles),
                        }
                    )
                    print(f"capacity={capacity} policy={policy}: {mean_db:+.2f} dB")
        elif args.axis == "window":
            for t_win in cfg.sweep.windows:
                stream_cfg = dataclasses.replace(base, t_win=t_win)
                mean_db, rtf = _mean_over_items(model, bundles, stream_cfg)
                rows.append(
                    {
                        "t_win": t_win,
                        "mean_si_snri_db": round(mean_db, 6),
                        "count": len(bundles),
                        "rtf": round(rtf, 5),
                    }
                )
                print(f"t_win={t_win}: {mean_db:+.2f} dB, rtf {rtf:.4f}")
        elif args.axis == "shift":
            for t_sh in cfg.sweep.shifts:
                stream_cfg = dataclasses.replace(base, t_sh=t_sh)
                mean_db, rtf = _mean_over_items(model, bundles, stream_cfg)
                rows.append(
                    {
                        "t_sh": t_sh,
                        "mean_si_snri_db": round(mean_db, 6),
                        "count": len(bundles),
                        "rtf": round(rtf, 5),
                    }
                )
                print(f"t_sh={t_sh}: {mean_db:+.2f} dB, rtf {rtf:.4f}")
        elif args.axis == "ratio":
            specs = make_mixture_specs(cfg.data, "test")
            if cfg.sweep.max_items is not None:
                specs = specs[: cfg.sweep.max_items]
            edges = cfg.sweep.ratio_bins
            for lo, hi in zip(edges[:-1], edges[1:]):
                mid = round((lo + hi) / 2.0, 4)
                bin_bundles = [
                    signals.build_mixture(
                        dataclasses.replace(s, impairment_ratio=mid)
                    )
                    for s in specs
                ]
                mean_db, _ = _mean_over_items(model, bin_bundles, base)
                rows.append(
                    {
                        "ratio_lo": lo,
                        "ratio_hi": hi,
                        "ratio_mid": mid,
                        "mean_si_snri_db": round(mean_db, 6),
                        "count": len(bin_bundles),
                    }
                )
                print(f"ratio [{lo}, {hi}): {mean_db:+.2f} dB")

    path = out_dir / f"sweep_{args.axis}.csv"
    metrics.write_report_csv(path, rows)
    print(f"wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="memtse",
        description="Memory-conditioned target speaker extraction toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=None):
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--out-dir", required=True, help="output directory")
        if checkpoint is not None:
            p.add_argument(
                "--checkpoint",
                required=checkpoint == "required",
                help="trained model checkpoint (.pt)",
            )

    p = sub.add_parser("simulate", help="synthesize corpus manifests and audio")
    common(p)
    p.add_argument(
        "--split",
        choices=["train", "val", "test", "switch", "all"],
        default="all",
    )
    p.add_argument("--count", type=int, default=None, help="cap items per split")
    p.add_argument(
        "--write-audio", action="store_true", help="also write WAV and cue files"
    )
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a model from the config")
    common(p)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run the evaluation grid on the test split")
    common(p, checkpoint="required")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("switch-eval", help="evaluate target-switch streams")
    common(p, checkpoint="required")
    p.set_defaults(func=cmd_switch_eval)

    p = sub.add_parser("sweep", help="sweep one axis and tabulate the results")
    common(p, checkpoint="optional")
    p.add_argument(
        "--axis",
        required=True,
        choices=["slots", "window", "shift", "ratio", "beta"],
    )
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
