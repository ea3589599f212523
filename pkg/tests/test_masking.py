"""Tests for masking thresholds: quiet threshold, maskers, temporal, offsets."""

import numpy as np
import pytest

from maskadv import _kernels, dsp, masking
from maskadv.dsp import StftParams, Waveform
from maskadv.masking import (
    MaskingConfig,
    MaskingThresholds,
    TemporalMaskingParams,
    apply_offset,
    ath,
    compute_thresholds,
    contemporaneous_thresholds,
    temporal_masking,
    uap_thresholds,
)

RATE = dsp.PIPELINE_RATE


def _ath_oracle(f_hz):
    f = np.asarray(f_hz) / 1000.0
    return 3.64 * f**-0.8 - 6.5 * np.exp(-0.6 * (f - 3.3) ** 2) + 1e-3 * f**4


def _sine(freq, amp=1.0, n=8192):
    t = np.arange(n) / RATE
    return Waveform(amp * np.sin(2 * np.pi * freq * t), RATE)


class TestAth:
    def test_1khz_value(self):
        # frozen from evaluating the stated formula
        assert ath(1000.0) == pytest.approx(3.369066525895342, abs=1e-12)
        assert ath(1000.0) == pytest.approx(_ath_oracle(1000.0), abs=1e-12)

    def test_3300_near_curve_minimum(self):
        grid = np.linspace(20, 8000, 160001)
        vals = _ath_oracle(grid)
        argmin = grid[np.argmin(vals)]
        assert abs(argmin - 3300.0) < 200.0
        assert ath(3300.0) < vals.min() + 0.01

    def test_low_frequency_high_threshold(self):
        assert ath(20.0) > 70.0

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            ath(10.0)
        with pytest.raises(ValueError):
            ath(9000.0)


class TestContemporaneous:
    def test_silence_equals_ath(self):
        w = Waveform(np.zeros(4096), RATE)
        th = contemporaneous_thresholds(dsp.psd(dsp.stft(w)))
        tables = masking._tables(StftParams(), RATE)
        assert np.array_equal(th.theta, np.tile(tables.ath_db, (th.theta.shape[0], 1)))

    def test_sine_masker_raises_thresholds_near_masker(self):
        th = contemporaneous_thresholds(dsp.psd(dsp.stft(_sine(1000.0))))
        tables = masking._tables(StftParams(), RATE)
        near = np.abs(tables.bark - tables.bark[32]) <= 2.0
        exceed = th.theta[2][near] - tables.ath_db[near]
        assert exceed.min() > 20.0

    def test_masker_level_shift_tracks(self):
        lo = contemporaneous_thresholds(dsp.psd(dsp.stft(_sine(1000.0, 0.1)))).theta[2]
        hi = contemporaneous_thresholds(
            dsp.psd(dsp.stft(_sine(1000.0, 0.1 * 10**0.5)))
        ).theta[2]
        tables = masking._tables(StftParams(), RATE)
        dz = tables.bark - tables.bark[32]
        sel = (dz >= 0) & (dz < 1.0)
        assert np.all(np.abs((hi - lo)[sel] - 10.0) <= 0.5)

    def test_deterministic(self):
        w = dsp.synth_test_signal("harmonic-voice", 0.5, 1)
        a = contemporaneous_thresholds(dsp.psd(dsp.stft(w))).theta
        b = contemporaneous_thresholds(dsp.psd(dsp.stft(w))).theta
        assert np.array_equal(a, b)

    def test_kernel_paths_agree(self):
        w = dsp.synth_test_signal("harmonic-voice", 0.5, 2)
        pm = dsp.psd(dsp.stft(w))
        tables = masking._tables(pm.params, pm.sample_rate)
        args = (
            np.ascontiguousarray(pm.db),
            tables.bark,
            tables.ath_db,
            tables.maxdk,
            tables.band_of_bin,
            tables.band_pos,
            tables.n_bands,
        )
        via_numpy = _kernels._global_thresholds_numpy(*args)
        via_selected = _kernels.global_thresholds(*args)
        assert np.allclose(via_numpy, via_selected, atol=1e-9)


class TestTemporal:
    def test_post_decay_one_frame(self):
        # hop 256 @ 16 kHz = 16 ms; drop/frame = 10*log10(e)*0.02*16
        theta = np.full((8, 257), -100.0)
        theta[2, :] = 60.0
        base = MaskingThresholds(theta, 0.0, StftParams(), RATE)
        out = temporal_masking(base).theta
        expect = 60.0 - 10.0 * np.log10(np.e) * 0.02 * 16.0
        assert out[3, 0] == pytest.approx(expect, abs=1e-9)
        assert expect == pytest.approx(58.61, abs=0.01)

    def test_post_horizon_clips_at_100ms(self):
        theta = np.full((10, 257), -100.0)
        theta[0, :] = 60.0
        base = MaskingThresholds(theta, 0.0, StftParams(), RATE)
        out = temporal_masking(base).theta
        # frame 6 = 96 ms gap: contribution present; frame 7 = 112 ms: absent
        assert out[6, 0] > -100.0
        assert out[7, 0] == -100.0

    def test_pre_horizon_clips_at_20ms(self):
        theta = np.full((10, 257), -100.0)
        theta[5, :] = 60.0
        base = MaskingThresholds(theta, 0.0, StftParams(), RATE)
        out = temporal_masking(base).theta
        assert out[4, 0] == pytest.approx(60.0 - 10 * np.log10(np.e) * 0.16 * 16, abs=1e-9)
        assert out[3, 0] == -100.0

    def test_never_lowers(self):
        rng = np.random.default_rng(3)
        theta = rng.uniform(-50, 60, (20, 257))
        base = MaskingThresholds(theta, 0.0, StftParams(), RATE)
        out = temporal_masking(base).theta
        assert np.all(out >= theta)

    def test_kernel_paths_agree(self):
        rng = np.random.default_rng(4)
        theta = rng.uniform(-50, 60, (30, 257))
        a = _kernels._temporal_max_numpy(theta, 6, 1.39, 1, 11.1)
        b = _kernels.temporal_max(theta, 6, 1.39, 1, 11.1)
        assert np.allclose(a, b, atol=0)


class TestOffset:
    def test_offset_12(self):
        th = MaskingThresholds(np.full((2, 257), 50.0), 0.0, StftParams(), RATE)
        out = apply_offset(th, 12.0)
        assert np.all(out.theta == 38.0)
        assert out.offset_db == 12.0

    def test_offset_zero_identity(self):
        th = MaskingThresholds(np.full((2, 257), 50.0), 0.0, StftParams(), RATE)
        out = apply_offset(th, 0.0)
        assert np.array_equal(out.theta, th.theta)

    def test_offset_6_is_exact_shift(self):
        w = dsp.synth_test_signal("harmonic-voice", 0.5, 5)
        zero = compute_thresholds(w, MaskingConfig(offset_db=0.0))
        six = compute_thresholds(w, MaskingConfig(offset_db=6.0))
        assert np.array_equal(six.theta, zero.theta - 6.0)

    def test_offset_exactness_composition(self):
        w = dsp.synth_test_signal("harmonic-voice", 0.5, 6)
        via_a = apply_offset(compute_thresholds(w, MaskingConfig(offset_db=4.0)), 8.0)
        via_b = compute_thresholds(w, MaskingConfig(offset_db=12.0))
        assert np.array_equal(via_a.theta, via_b.theta)
        assert via_a.offset_db == via_b.offset_db

    def test_negative_offset_rejected(self):
        th = MaskingThresholds(np.zeros((1, 257)), 0.0, StftParams(), RATE)
        with pytest.raises(ValueError):
            apply_offset(th, -1.0)


class TestUap:
    def test_elementwise_min(self):
        p = StftParams()
        ta = np.full((2, 257), 50.0)
        ta[1, :] = 60.0
        tb = np.full((2, 257), 55.0)
        tb[1, :] = 40.0
        out = uap_thresholds(
            [MaskingThresholds(ta, 0.0, p, RATE), MaskingThresholds(tb, 0.0, p, RATE)]
        )
        assert np.all(out.theta[0] == 50.0)
        assert np.all(out.theta[1] == 40.0)

    def test_single_identity(self):
        th = MaskingThresholds(np.full((3, 257), 7.0), 0.0, StftParams(), RATE)
        assert np.array_equal(uap_thresholds([th]).theta, th.theta)

    def test_result_below_every_member(self):
        rng = np.random.default_rng(7)
        p = StftParams()
        members = [
            MaskingThresholds(rng.uniform(-30, 60, (4, 257)), 0.0, p, RATE)
            for _ in range(5)
        ]
        out = uap_thresholds(members)
        for m in members:
            assert np.all(out.theta <= m.theta)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            uap_thresholds([])

    def test_shape_mismatch_rejected(self):
        p = StftParams()
        a = MaskingThresholds(np.zeros((2, 257)), 0.0, p, RATE)
        b = MaskingThresholds(np.zeros((3, 257)), 0.0, p, RATE)
        with pytest.raises(ValueError, match="mismatch"):
            uap_thresholds([a, b])


class TestComputeThresholds:
    def test_silence_is_ath_minus_offset(self):
        w = Waveform(np.zeros(4096), RATE)
        th = compute_thresholds(w, MaskingConfig(offset_db=12.0))
        tables = masking._tables(StftParams(), RATE)
        assert np.allclose(th.theta, tables.ath_db[None, :] - 12.0, atol=1e-12)

    def test_temporal_on_vs_off(self):
        w = dsp.synth_test_signal("harmonic-voice", 0.5, 8)
        on = compute_thresholds(w, MaskingConfig(offset_db=0.0, include_temporal=True))
        off = compute_thresholds(w, MaskingConfig(offset_db=0.0, include_temporal=False))
        assert np.all(on.theta >= off.theta)

    def test_zero_perturbation_always_feasible(self):
        w = dsp.synth_test_signal("babble", 0.5, 9)
        th = compute_thresholds(w)
        assert np.all(dsp.PSD_FLOOR_DB <= th.theta)

    def test_bit_deterministic(self):
        w = dsp.synth_test_signal("harmonic-voice", 0.5, 10)
        a = compute_thresholds(w)
        b = compute_thresholds(w)
        assert np.array_equal(a.theta, b.theta)


class TestCsvDump:
    def test_shape_and_precision(self):
        grid = np.zeros((2, 257))
        grid[0, 0] = 1.23456
        th = MaskingThresholds(grid, 0.0, StftParams(), RATE)
        text = masking.format_thresholds_csv(th)
        lines = text.strip().split("\n")
        assert len(lines) == 2
        assert lines[0].split(",")[0] == "1.235"
        assert len(lines[0].split(",")) == 257
