import numpy as np
import pytest
import torch

from memtse import signals
from memtse.model import ModelConfig, TseNet
from memtse.streaming import (
    OfflineResult,
    StreamConfig,
    _frame_slice,
    _window_slice,
    measure_rtf,
    plan_windows,
    run_offline,
    run_stream,
    run_switch_stream,
    switch_reset_step,
)


def _tiny_model():
    return TseNet(
        ModelConfig(
            channels=8,
            backbone_channels=8,
            backbone_blocks=1,
            speaker_hidden=8,
            init_seed=4,
        )
    )


def _scfg(**kw):
    base = dict(t_win=6400, t_sh=1600, t_init=6400, eval_setting="visual_only")
    base.update(kw)
    return StreamConfig(**base)


def _make_stream(duration_s, seed=300):
    spec = signals.MixtureSpec(
        target_id="spk_1",
        interferer_id="spk_4",
        snr_db=2.0,
        duration_s=duration_s,
        impairment_type="missing",
        impairment_ratio=0.0,
        seed=seed,
        protect_prefix_s=0.0,
    )
    return signals.build_mixture(spec)


@pytest.fixture(scope="module")
def model():
    return _tiny_model()


@pytest.fixture(scope="module")
def bundle():
    return _make_stream(0.9)  # 14400 samples: init + exactly 5 shifts


@pytest.fixture(scope="module")
def ragged_bundle():
    return _make_stream(0.93125, seed=301)  # 14900 samples: 500-sample remainder


class TestWindowPlan:
    def test_initialization_then_uniform_shifts(self):
        cfg = _scfg()
        plan = plan_windows(14400, cfg)
        assert plan[0] == (0, 0, 6400, 0, 6400)
        assert len(plan) == 6
        for k, start, end, es, ee in plan[1:]:
            assert end - start == cfg.t_win
            assert ee - es == cfg.t_sh
            assert end == cfg.t_init + k * cfg.t_sh
            assert ee == end

    def test_emissions_partition_the_stream(self):
        for total in (6400, 8000, 14400, 14900, 20001):
            plan = plan_windows(total, _scfg())
            cursor = 0
            for _, _, _, es, ee in plan:
                assert es == cursor
                assert ee > es
                cursor = ee
            assert cursor == total

    def test_remainder_window_right_aligned(self):
        plan = plan_windows(14900, _scfg())
        k, start, end, es, ee = plan[-1]
        assert k == 6
        assert end == 14900
        assert end - start == 6400
        assert ee - es == 500

    def test_short_init_pads_before_stream_start(self):
        cfg = _scfg(t_init=3200)
        plan = plan_windows(8000, cfg)
        assert plan[0] == (0, 0, 3200, 0, 3200)
        k1 = plan[1]
        assert k1[1] == 3200 + 1600 - 6400  # negative: window predates stream
        assert k1[1] < 0

    def test_stream_shorter_than_init_rejected(self):
        with pytest.raises(ValueError):
            plan_windows(6000, _scfg())

    def test_matches_arithmetic_oracle(self):
        cfg = _scfg(t_sh=1920)
        total = 6400 + 4 * 1920 + 777
        plan = plan_windows(total, cfg)
        n_full = (total - 6400) // 1920
        assert len(plan) == 1 + n_full + 1
        for k in range(1, n_full + 1):
            end = 6400 + k * 1920
            assert plan[k] == (k, end - 6400, end, end - 1920, end)
        assert plan[-1] == (n_full + 1, total - 6400, total, total - 777, total)


class TestSlices:
    def test_window_slice_pads_left(self):
        stream = np.arange(1.0, 11.0)
        out = _window_slice(stream, -3, 4)
        np.testing.assert_array_equal(out, [0, 0, 0, 1, 2, 3, 4])

    def test_window_slice_interior(self):
        stream = np.arange(10.0)
        np.testing.assert_array_equal(_window_slice(stream, 2, 7), stream[2:7])

    def test_frame_slice_aligned(self):
        frames = np.arange(20.0).reshape(10, 2)
        out = _frame_slice(frames, 4, 12, 2)
        np.testing.assert_array_equal(out, frames[2:6])

    def test_frame_slice_pads_outside_range(self):
        frames = np.ones((4, 3))
        out = _frame_slice(frames, -4, 4, 2)
        assert out.shape == (4, 3)
        np.testing.assert_array_equal(out[:2], 0.0)
        np.testing.assert_array_equal(out[2:], 1.0)

    def test_frame_slice_unaligned_start_uses_floor(self):
        frames = np.arange(8.0).reshape(8, 1)
        out = _frame_slice(frames, 3, 9, 2)  # start mid-frame
        np.testing.assert_array_equal(out[:, 0], [1.0, 2.0, 3.0])


def _manual_visual_stream(model, mixture, frames, cfg):
    """Independent re-implementation of chunked inference for visual-only:
    plain forward passes plus the emission/normalization arithmetic."""
    est = np.zeros(len(mixture), dtype=np.float64)
    cum = 0.0
    with torch.no_grad():
        for k, start, end, es, ee in plan_windows(len(mixture), cfg):
            win = _window_slice(np.asarray(mixture, dtype=np.float64), start, end)
            fr = _frame_slice(
                np.asarray(frames, dtype=np.float64), start, end, cfg.samples_per_frame
            )
            out = model.forward_window(
                torch.from_numpy(win).float().unsqueeze(0),
                torch.from_numpy(fr).float().unsqueeze(0),
            )[0].numpy().astype(np.float64)
            energy = float(np.sum(out**2))
            if cfg.norm_mode == "rms":
                scale = float(np.sqrt(np.mean(win**2))) / max(
                    float(np.sqrt(np.mean(out**2))), cfg.eps
                )
            elif k == 0:
                scale = cfg.gamma / (energy + cfg.eps)
            else:
                scale = cum / (energy + cfg.eps)
            norm = out * scale
            chunk = norm[len(win) - (ee - es) :]
            cum += float(np.sum(chunk**2))
            est[es:ee] = chunk
    return est


class TestRunStream:
    def test_visual_only_matches_manual_replication(self, model, bundle):
        cfg = _scfg()
        result = run_stream(model, bundle.mixture.samples, bundle.cues.frames, cfg)
        manual = _manual_visual_stream(model, bundle.mixture.samples, bundle.cues.frames, cfg)
        np.testing.assert_array_equal(result.estimate, manual)

    def test_rms_norm_matches_manual_replication(self, model, bundle):
        cfg = _scfg(norm_mode="rms")
        result = run_stream(model, bundle.mixture.samples, bundle.cues.frames, cfg)
        manual = _manual_visual_stream(model, bundle.mixture.samples, bundle.cues.frames, cfg)
        np.testing.assert_array_equal(result.estimate, manual)

    def test_energy_bookkeeping_is_exact(self, model, bundle):
        cfg = _scfg(eval_setting="self_enro")
        result = run_stream(model, bundle.mixture.samples, bundle.cues.frames, cfg)
        cum = 0.0
        for step in result.steps:
            chunk = result.estimate[step.emit_start : step.emit_end]
            want = float(np.sum(chunk**2))
            assert step.emitted_energy == pytest.approx(want, rel=1e-12, abs=0)
            cum += want
            assert step.cumulative_energy == pytest.approx(cum, rel=1e-12, abs=0)

    def test_estimate_covers_stream_without_gaps(self, model, ragged_bundle):
        cfg = _scfg(eval_setting="self_enro")
        result = run_stream(model, ragged_bundle.mixture.samples, ragged_bundle.cues.frames, cfg)
        assert result.estimate.shape == ragged_bundle.mixture.samples.shape
        assert np.all(np.isfinite(result.estimate))
        assert result.steps[-1].emit_end == len(ragged_bundle.mixture)
        assert result.steps[-1].emit_end - result.steps[-1].emit_start == 500
        assert float(np.max(np.abs(result.estimate))) > 0

    def test_prefix_run_is_bit_identical(self, model, bundle):
        for setting in ("visual_only", "self_enro"):
            cfg = _scfg(eval_setting=setting)
            mix = bundle.mixture.samples
            frames = bundle.cues.frames
            full = run_stream(model, mix, frames, cfg)
            prefix = 6400 + 2 * 1600
            part = run_stream(model, mix[:prefix], frames[: prefix // 640], cfg)
            np.testing.assert_array_equal(part.estimate, full.estimate[:prefix])

    def test_deterministic_across_runs(self, model, bundle):
        cfg = _scfg(eval_setting="self_enro")
        a = run_stream(model, bundle.mixture.samples, bundle.cues.frames, cfg)
        b = run_stream(model, bundle.mixture.samples, bundle.cues.frames, cfg)
        np.testing.assert_array_equal(a.estimate, b.estimate)

    def test_visual_only_never_touches_banks(self, model, bundle):
        result = run_stream(model, bundle.mixture.samples, bundle.cues.frames, _scfg())
        for step in result.steps:
            assert step.sizes_before == {}
            assert step.sizes_after == {}
            assert step.slot_scores == {"speaker": None, "context": None}

    def test_self_enrollment_fills_after_first_window(self, model, bundle):
        cfg = _scfg(eval_setting="self_enro", bank_mode="both", capacity=1)
        result = run_stream(model, bundle.mixture.samples, bundle.cues.frames, cfg)
        first = result.steps[0]
        assert first.sizes_before == {"speaker": 0, "context": 0}
        assert first.sizes_after == {"speaker": 1, "context": 1}
        assert first.slot_scores == {"speaker": None, "context": None}
        for step in result.steps[1:]:
            assert step.sizes_before == {"speaker": 1, "context": 1}
            assert step.slot_scores["speaker"] is not None
            assert step.slot_scores["context"] is not None
            assert len(step.slot_scores["context"]) == 1

    def test_oracle_enrollment_retrieves_in_first_window(self, model, bundle):
        cfg = _scfg(eval_setting="tgt_enro")
        result = run_stream(
            model,
            bundle.mixture.samples,
            bundle.cues.frames,
            cfg,
            target=bundle.target.samples,
        )
        assert result.steps[0].slot_scores["context"] is not None
        assert result.steps[0].sizes_after == {"context": 1}

    def test_pre_enrollment_stores_once(self, model, bundle):
        cfg = _scfg(eval_setting="pre_enro", capacity=2, bank_mode="both")
        result = run_stream(
            model,
            bundle.mixture.samples,
            bundle.cues.frames,
            cfg,
            pre_enrolled=bundle.pre_enrolled.samples,
        )
        for step in result.steps:
            assert step.sizes_before == {"speaker": 1, "context": 1}
            assert step.sizes_after == {"speaker": 1, "context": 1}
            assert step.slot_scores["context"] is not None

    def test_capacity_bounds_bank_growth(self, model, bundle):
        cfg = _scfg(eval_setting="self_enro", capacity=3)
        result = run_stream(model, bundle.mixture.samples, bundle.cues.frames, cfg)
        sizes = [s.sizes_after["context"] for s in result.steps]
        assert sizes == [1, 2, 3, 3, 3, 3]

    def test_enrollment_settings_change_the_estimate(self, model, bundle):
        mix, frames = bundle.mixture.samples, bundle.cues.frames
        visual = run_stream(model, mix, frames, _scfg()).estimate
        self_e = run_stream(model, mix, frames, _scfg(eval_setting="self_enro")).estimate
        tgt = run_stream(
            model, mix, frames, _scfg(eval_setting="tgt_enro"), target=bundle.target.samples
        ).estimate
        assert not np.array_equal(visual, self_e)
        assert not np.array_equal(visual, tgt)
        assert not np.array_equal(self_e, tgt)

    def test_transient_speaker_feature_in_vp_mode(self, model, bundle):
        mix, frames = bundle.mixture.samples, bundle.cues.frames
        base = _scfg(eval_setting="pre_enro", bank_mode="contextual")
        vp = _scfg(eval_setting="pre_enro", bank_mode="contextual", init_mode="vp")
        out_v = run_stream(model, mix, frames, base, pre_enrolled=bundle.pre_enrolled.samples)
        out_vp = run_stream(model, mix, frames, vp, pre_enrolled=bundle.pre_enrolled.samples)
        assert not np.array_equal(out_v.estimate, out_vp.estimate)

    def test_short_init_skips_context_retrieval_until_full_window(self, model):
        stream = _make_stream(0.9, seed=302)
        cfg = _scfg(t_init=3200, eval_setting="tgt_enro")
        result = run_stream(
            model,
            stream.mixture.samples,
            stream.cues.frames,
            cfg,
            target=stream.target.samples,
        )
        # init window is 3200 samples, bank slots are padded to 6400: lengths
        # disagree so the first retrieval must be skipped, later ones happen
        assert result.steps[0].slot_scores["context"] is None
        assert result.steps[1].slot_scores["context"] is not None

    def test_missing_conditioning_inputs_rejected(self, model, bundle):
        mix, frames = bundle.mixture.samples, bundle.cues.frames
        with pytest.raises(ValueError):
            run_stream(model, mix, frames, _scfg(eval_setting="pre_enro"))
        with pytest.raises(ValueError):
            run_stream(model, mix, frames, _scfg(eval_setting="tgt_enro"))
        with pytest.raises(ValueError):
            run_stream(
                model, mix, frames, _scfg(eval_setting="tgt_enro"), target=mix[:100]
            )

    def test_config_validation(self):
        with pytest.raises(ValueError):
            _scfg(t_sh=9600).validate()  # shift > window
        with pytest.raises(ValueError):
            _scfg(t_win=7000).validate()  # not a whole frame count
        with pytest.raises(ValueError):
            _scfg(gamma=0.0).validate()
        with pytest.raises(ValueError):
            _scfg(eval_setting="oracle").validate()
        with pytest.raises(ValueError):
            _scfg(self_enroll_len=100).validate()


class TestSwitch:
    def test_reset_step_matches_first_post_switch_emission(self):
        cfg = _scfg()
        for switch in (1000, 6400, 6401, 8000, 9600, 9601, 12000):
            k_reset = switch_reset_step(switch, cfg)
            plan = plan_windows(20000, cfg)
            post = [k for k, _, _, es, ee in plan if k >= 1 and ee > switch]
            want = post[0] if post else plan[-1][0]
            assert k_reset == want, switch

    def test_reset_before_init_window_clamps_to_one(self):
        assert switch_reset_step(100, _scfg()) == 1
        assert switch_reset_step(6400, _scfg()) == 1

    def test_banks_empty_at_reset_step(self, model):
        spec = signals.SwitchSpec(
            speaker_a="spk_0",
            speaker_b="spk_1",
            interferer="spk_2",
            switch_time_s=5.0,
            total_duration_s=10.0,
            seed=77,
            impairment_ratio=0.0,
        )
        sw = signals.build_switch_mixture(spec)
        cfg = StreamConfig(
            t_win=6400, t_sh=3200, t_init=6400, eval_setting="self_enro"
        )
        result = run_switch_stream(
            model,
            sw.mixture.samples,
            sw.cues.frames,
            sw.switch_sample,
            cfg,
            target=sw.target.samples,
        )
        k_reset = switch_reset_step(sw.switch_sample, cfg)
        assert result.reset_step == k_reset
        by_k = {s.k: s for s in result.steps}
        assert by_k[k_reset].sizes_before == {"context": 0}
        assert by_k[k_reset - 1].sizes_before == {"context": 1}
        assert by_k[k_reset].sizes_after == {"context": 1}

    def test_reset_can_be_disabled(self, model):
        spec = signals.SwitchSpec(
            speaker_a="spk_0",
            speaker_b="spk_1",
            interferer="spk_2",
            switch_time_s=5.0,
            total_duration_s=10.0,
            seed=78,
            impairment_ratio=0.0,
        )
        sw = signals.build_switch_mixture(spec)
        cfg = StreamConfig(
            t_win=6400,
            t_sh=3200,
            t_init=6400,
            eval_setting="self_enro",
            empty_on_switch=False,
        )
        result = run_switch_stream(
            model, sw.mixture.samples, sw.cues.frames, sw.switch_sample, cfg
        )
        k_reset = switch_reset_step(sw.switch_sample, cfg)
        by_k = {s.k: s for s in result.steps}
        assert by_k[k_reset].sizes_before == {"context": 1}

    def test_switch_sample_bounds_checked(self, model, bundle):
        with pytest.raises(ValueError):
            run_switch_stream(
                model, bundle.mixture.samples, bundle.cues.frames, 0, _scfg()
            )


class TestOffline:
    def test_visual_only_equals_single_forward_pass(self, model, bundle):
        cfg = _scfg()
        result = run_offline(model, bundle.mixture.samples, bundle.cues.frames, cfg)
        with torch.no_grad():
            want = model.forward_window(
                torch.from_numpy(bundle.mixture.samples).float().unsqueeze(0),
                torch.from_numpy(bundle.cues.frames).float().unsqueeze(0),
            )[0].numpy().astype(np.float64)
        np.testing.assert_array_equal(result.estimate, want)
        assert result.passes == 1

    def test_self_enrollment_runs_exactly_two_passes(self, model, bundle):
        cfg = _scfg(eval_setting="self_enro")
        result = run_offline(model, bundle.mixture.samples, bundle.cues.frames, cfg)
        assert result.passes == 2
        visual = run_offline(model, bundle.mixture.samples, bundle.cues.frames, _scfg())
        assert not np.array_equal(result.estimate, visual.estimate)

    def test_pre_and_oracle_enrollment_condition_the_pass(self, model, bundle):
        mix, frames = bundle.mixture.samples, bundle.cues.frames
        visual = run_offline(model, mix, frames, _scfg()).estimate
        pre = run_offline(
            model,
            mix,
            frames,
            _scfg(eval_setting="pre_enro"),
            pre_enrolled=bundle.pre_enrolled.samples,
        )
        tgt = run_offline(
            model, mix, frames, _scfg(eval_setting="tgt_enro"), target=bundle.target.samples
        )
        assert pre.passes == 1 and tgt.passes == 1
        assert not np.array_equal(visual, pre.estimate)
        assert not np.array_equal(visual, tgt.estimate)

    def test_offline_result_reports_timing(self, model, bundle):
        result = run_offline(model, bundle.mixture.samples, bundle.cues.frames, _scfg())
        assert isinstance(result, OfflineResult)
        assert result.duration_s == pytest.approx(0.9)
        assert result.wall_s > 0
        assert measure_rtf(result) > 0


class TestRtf:
    def test_rtf_is_wall_over_duration(self, model, bundle):
        result = run_stream(model, bundle.mixture.samples, bundle.cues.frames, _scfg())
        assert measure_rtf(result) == pytest.approx(result.wall_s / result.duration_s)
        assert result.duration_s == pytest.approx(0.9)
        assert all(s.wall_ms >= 0 for s in result.steps)
