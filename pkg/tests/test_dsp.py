"""Tests for the audio substrate: WAV I/O, STFT/ISTFT, convolution, PSD, mixing."""

import numpy as np
import pytest

from maskadv import dsp
from maskadv.dsp import (
    ComplexSpectrogram,
    MalformedWavError,
    Rir,
    StftParams,
    UnsupportedBitDepthError,
    UnsupportedChannelsError,
    UnsupportedRateError,
    Waveform,
)

RATE = dsp.PIPELINE_RATE


def _wave(samples):
    return Waveform(np.asarray(samples, dtype=np.float64), RATE)


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------


class TestWavIo:
    def test_scaling_max_int(self, tmp_path):
        path = tmp_path / "x.wav"
        dsp.save_wav(_wave([32767.0 / 32768.0]), path)
        got = dsp.load_wav(path)
        assert got.samples[0] == pytest.approx(32767.0 / 32768.0, abs=0)

    def test_scaling_zero(self, tmp_path):
        path = tmp_path / "x.wav"
        dsp.save_wav(_wave([0.0]), path)
        assert dsp.load_wav(path).samples[0] == 0.0

    def test_saturation_positive(self, tmp_path):
        path = tmp_path / "x.wav"
        dsp.save_wav(_wave([1.0]), path)
        raw = path.read_bytes()
        assert np.frombuffer(raw[-2:], dtype="<i2")[0] == 32767

    def test_out_of_range_clamps_with_warning(self, tmp_path):
        path = tmp_path / "x.wav"
        with pytest.warns(UserWarning, match="clamped"):
            clipped = dsp.save_wav(_wave([1.5, -2.0, 0.25]), path)
        assert clipped == 2
        ints = np.frombuffer(path.read_bytes()[-6:], dtype="<i2")
        assert list(ints) == [32767, -32768, 8192]

    def test_saturation_negative(self, tmp_path):
        path = tmp_path / "x.wav"
        dsp.save_wav(_wave([-1.0]), path)
        raw = path.read_bytes()
        assert np.frombuffer(raw[-2:], dtype="<i2")[0] == -32768

    def test_round_trip_random_int16_bytes(self, tmp_path):
        rng = np.random.default_rng(0)
        ints = rng.integers(-32768, 32768, size=4096, dtype=np.int16)
        first = tmp_path / "a.wav"
        second = tmp_path / "b.wav"
        dsp.save_wav(_wave(ints.astype(np.float64) / 32768.0), first)
        dsp.save_wav(dsp.load_wav(first), second)
        assert first.read_bytes() == second.read_bytes()

    def test_round_trip_samples_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        ints = rng.integers(-32768, 32768, size=1000)
        w = _wave(ints.astype(np.float64) / 32768.0)
        path = tmp_path / "x.wav"
        dsp.save_wav(w, path)
        got = dsp.load_wav(path)
        assert np.array_equal(got.samples, w.samples)

    def test_malformed_header(self, tmp_path):
        path = tmp_path / "bad.wav"
        path.write_bytes(b"not a wav file at all")
        with pytest.raises(MalformedWavError):
            dsp.load_wav(path)

    def test_unsupported_channels(self, tmp_path):
        path = tmp_path / "stereo.wav"
        _write_wav_raw(path, channels=2, rate=RATE, bits=16)
        with pytest.raises(UnsupportedChannelsError):
            dsp.load_wav(path)

    def test_unsupported_bit_depth(self, tmp_path):
        path = tmp_path / "deep.wav"
        _write_wav_raw(path, channels=1, rate=RATE, bits=8)
        with pytest.raises(UnsupportedBitDepthError):
            dsp.load_wav(path)

    def test_unsupported_rate(self, tmp_path):
        path = tmp_path / "cd.wav"
        _write_wav_raw(path, channels=1, rate=44100, bits=16)
        with pytest.raises(UnsupportedRateError):
            dsp.load_wav(path)


def _write_wav_raw(path, channels, rate, bits):
    import struct

    payload = b"\x00" * 64
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF",
        36 + len(payload),
        b"WAVE",
        b"fmt ",
        16,
        1,
        channels,
        rate,
        rate * channels * bits // 8,
        channels * bits // 8,
        bits,
        b"data",
        len(payload),
    )
    path.write_bytes(header + payload)


# ---------------------------------------------------------------------------
# STFT / ISTFT
# ---------------------------------------------------------------------------


def _dft_oracle(frame, fft_size):
    """Naive DFT of one windowed frame (independent of np.fft)."""
    n = np.arange(len(frame))
    bins = fft_size // 2 + 1
    out = np.zeros(bins, dtype=np.complex128)
    for k in range(bins):
        out[k] = np.sum(frame * np.exp(-2j * np.pi * k * n / fft_size))
    return out


class TestStft:
    def test_zero_input_zero_output(self):
        spec = dsp.stft(_wave(np.zeros(2048)))
        assert np.all(spec.data == 0)

    def test_frame_count(self):
        spec = dsp.stft(_wave(np.zeros(16000)))
        assert spec.frames == 1 + (16000 - 512) // 256

    def test_too_short_raises(self):
        with pytest.raises(ValueError):
            dsp.stft(_wave(np.zeros(100)))

    def test_unit_impulse_flat_magnitude(self):
        # impulse at the centre of frame 0: |X[k]| = hann(center) for all k
        x = np.zeros(1024)
        x[256] = 1.0
        spec = dsp.stft(_wave(x))
        expect = dsp.hann_window(512)[256]
        assert np.allclose(np.abs(spec.data[0]), expect, atol=1e-12)

    def test_matches_naive_dft(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(-1, 1, 1024)
        params = StftParams()
        spec = dsp.stft(_wave(x), params)
        win = dsp.hann_window(512)
        for f in [0, 1, 2]:
            frame = x[f * 256 : f * 256 + 512] * win
            assert np.allclose(spec.data[f], _dft_oracle(frame, 512), atol=1e-9)

    def test_sine_energy_at_expected_bin(self):
        freq = 1000.0
        t = np.arange(8192) / RATE
        spec = dsp.stft(_wave(0.9 * np.sin(2 * np.pi * freq * t)))
        mags = np.abs(spec.data)
        expected_bin = round(freq * 512 / RATE)
        assert expected_bin == 32
        assert np.all(np.argmax(mags, axis=1) == expected_bin)


class TestIstft:
    def test_round_trip_interior(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(-1, 1, 16000)
        spec = dsp.stft(_wave(x))
        back = dsp.istft(spec, len(x)).samples
        interior = slice(512, len(x) - 512)
        rms = np.sqrt(np.mean((back[interior] - x[interior]) ** 2))
        assert rms < 1e-6

    def test_zero_spectrogram(self):
        spec = ComplexSpectrogram(np.zeros((4, 257), dtype=np.complex128), StftParams())
        assert np.all(dsp.istft(spec, 2000).samples == 0)

    def test_linearity(self):
        rng = np.random.default_rng(4)
        a = rng.standard_normal((5, 257)) + 1j * rng.standard_normal((5, 257))
        b = rng.standard_normal((5, 257)) + 1j * rng.standard_normal((5, 257))
        p = StftParams()
        wa = dsp.istft(ComplexSpectrogram(a, p), 1800).samples
        wb = dsp.istft(ComplexSpectrogram(b, p), 1800).samples
        wab = dsp.istft(ComplexSpectrogram(a + b, p), 1800).samples
        assert np.allclose(wab, wa + wb, atol=1e-9)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


class TestConvolve:
    def test_identity_kernel(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(-1, 1, 1000)
        out = dsp.convolve(_wave(x), Rir(np.array([1.0]), RATE))
        assert np.array_equal(out.samples, x)

    def test_one_sample_delay(self):
        x = np.array([1.0, 2.0, 3.0, 4.0]) / 8.0
        out = dsp.convolve(_wave(x), Rir(np.array([0.0, 1.0]), RATE))
        assert np.allclose(out.samples, [0.0, 1 / 8, 2 / 8, 3 / 8])

    def test_fft_path_matches_direct_sum(self):
        rng = np.random.default_rng(6)
        n = 6000  # above the FFT-path cutoff
        x = rng.uniform(-1, 1, n)
        taps = rng.uniform(-0.5, 0.5, 300)
        out = dsp.convolve(_wave(x), Rir(taps, RATE)).samples
        direct = np.zeros(n)
        for i, tap in enumerate(taps):
            direct[i:] += tap * x[: n - i]
        assert np.max(np.abs(out - direct)) < 1e-9

    def test_rate_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            dsp.convolve(_wave(np.zeros(100)), Rir(np.array([1.0]), 8000))

    def test_linearity_property(self):
        rng = np.random.default_rng(7)
        u = rng.uniform(-1, 1, 5000)
        v = rng.uniform(-1, 1, 5000)
        r = Rir(rng.uniform(-0.3, 0.3, 64), RATE)
        lhs = dsp.convolve(_wave(2.5 * u + v), r).samples
        rhs = 2.5 * dsp.convolve(_wave(u), r).samples + dsp.convolve(_wave(v), r).samples
        assert np.max(np.abs(lhs - rhs)) < 1e-9


# ---------------------------------------------------------------------------
# PSD
# ---------------------------------------------------------------------------


class TestPsd:
    def test_zero_spectrogram_floors(self):
        spec = ComplexSpectrogram(np.zeros((3, 257), dtype=np.complex128), StftParams())
        out = dsp.psd(spec)
        assert np.all(out.db == dsp.PSD_FLOOR_DB)

    def test_scale_by_ten_adds_twenty_db(self):
        rng = np.random.default_rng(8)
        data = rng.standard_normal((4, 257)) + 1j * rng.standard_normal((4, 257))
        p = StftParams()
        base = dsp.psd(ComplexSpectrogram(data, p)).db
        scaled = dsp.psd(ComplexSpectrogram(10.0 * data, p)).db
        assert np.allclose(scaled - base, 20.0, atol=1e-9)

    def test_full_scale_sine_near_96_db(self):
        t = np.arange(4096) / RATE
        x = np.sin(2 * np.pi * 1000.0 * t)  # bin 32, amplitude 1.0
        out = dsp.psd(dsp.stft(_wave(x)))
        assert abs(np.max(out.db) - 96.0) < 1.0

    def test_double_amplitude_shift(self):
        w = dsp.synth_test_signal("harmonic-voice", 0.5, 11)
        half = Waveform(w.samples * 0.5, RATE)
        hi = dsp.psd(dsp.stft(w)).db
        lo = dsp.psd(dsp.stft(half)).db
        mask = (hi > -150) & (lo > -150)
        assert np.allclose((hi - lo)[mask], 6.0206, atol=1e-3)


# ---------------------------------------------------------------------------
# Mixing
# ---------------------------------------------------------------------------


class TestMixAtSnr:
    def test_equal_power_zero_snr_gain_one(self):
        rng = np.random.default_rng(9)
        y = rng.standard_normal(8000) * 0.1
        b = rng.standard_normal(8000)
        b *= np.sqrt(np.mean(y**2) / np.mean(b**2))
        x, ry = dsp.mix_at_snr(_wave(y), [_wave(b)], 0.0)
        assert np.allclose(x.samples, y + b, atol=1e-12)
        assert np.array_equal(ry.samples, y)

    @pytest.mark.parametrize("snr", [-10.0, 0.0, 30.0, 70.0])
    def test_measured_snr(self, snr):
        y = dsp.synth_test_signal("harmonic-voice", 1.0, 12)
        b = dsp.synth_test_signal("white", 0.7, 13)
        x, ry = dsp.mix_at_snr(y, [b], snr)
        noise_part = x.samples - ry.samples
        measured = 10 * np.log10(np.mean(ry.samples**2) / np.mean(noise_part**2))
        assert measured == pytest.approx(snr, abs=0.01)

    def test_snr_with_rir(self):
        y = dsp.synth_test_signal("harmonic-voice", 1.0, 14)
        b = dsp.synth_test_signal("babble", 1.0, 15)
        rir = Rir(np.array([0.8, 0.0, 0.3, -0.1]), RATE)
        x, ry = dsp.mix_at_snr(y, [b], 5.0, rir)
        noise_part = x.samples - ry.samples
        measured = 10 * np.log10(np.mean(ry.samples**2) / np.mean(noise_part**2))
        assert measured == pytest.approx(5.0, abs=0.01)

    def test_empty_noise_list(self):
        y = dsp.synth_test_signal("harmonic-voice", 0.5, 16)
        x, ry = dsp.mix_at_snr(y, [], 10.0)
        assert np.array_equal(x.samples, y.samples)
        assert np.array_equal(ry.samples, y.samples)

    def test_zero_power_clean_raises(self):
        with pytest.raises(ValueError, match="zero power"):
            dsp.mix_at_snr(_wave(np.zeros(100)), [_wave(np.ones(100))], 0.0)

    def test_zero_power_noise_raises(self):
        with pytest.raises(ValueError, match="zero power"):
            dsp.mix_at_snr(_wave(np.ones(100)), [_wave(np.zeros(100))], 0.0)

    def test_noise_looped_to_clean_length(self):
        y = dsp.synth_test_signal("harmonic-voice", 1.0, 17)
        short = dsp.synth_test_signal("white", 0.2, 18)
        x, _ = dsp.mix_at_snr(y, [short], 0.0)
        assert len(x) == len(y)


# ---------------------------------------------------------------------------
# Synthetic test signals
# ---------------------------------------------------------------------------


class TestSynth:
    def test_deterministic(self):
        a = dsp.synth_test_signal("harmonic-voice", 1.0, 42)
        b = dsp.synth_test_signal("harmonic-voice", 1.0, 42)
        assert np.array_equal(a.samples, b.samples)

    def test_white_mean_near_zero(self):
        w = dsp.synth_test_signal("white", 10.0, 19)
        assert abs(np.mean(w.samples)) < 0.01

    def test_kinds_and_peak(self):
        for kind in ["harmonic-voice", "white", "babble"]:
            w = dsp.synth_test_signal(kind, 0.5, 20)
            assert np.max(np.abs(w.samples)) <= 0.95 + 1e-12

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown"):
            dsp.synth_test_signal("chirp", 1.0, 0)
