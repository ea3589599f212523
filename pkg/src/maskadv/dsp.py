"""Audio signal substrate: WAV I/O, STFT/ISTFT, convolution, PSD, scenario mixing.

All pipeline audio is mono float64 at 16 kHz, amplitudes in [-1, 1].
PSD values are dB SPL under the convention that a full-scale sine maps
to 96 dB; zero-power bins are floored at PSD_FLOOR_DB.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

PIPELINE_RATE = 16000
SPL_FULL_SCALE_DB = 96.0
PSD_FLOOR_DB = -200.0

# Direct time-domain convolution below this length, FFT above.
_FFT_CONV_MIN = 4096


class WavError(ValueError):
    """Base class for WAV parsing/encoding failures."""


class MalformedWavError(WavError):
    pass


class UnsupportedChannelsError(WavError):
    pass


class UnsupportedBitDepthError(WavError):
    pass


class UnsupportedRateError(WavError):
    pass


@dataclass(frozen=True)
class Waveform:
    """Mono audio: float64 samples in [-1, 1] plus a sample rate in Hz."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if samples.ndim != 1:
            raise ValueError(f"waveform must be 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class Rir:
    """Room impulse response taps at a given sample rate."""

    taps: np.ndarray
    sample_rate: int

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64)
        object.__setattr__(self, "taps", taps)
        if taps.ndim != 1 or taps.shape[0] == 0:
            raise ValueError("rir must be a non-empty 1-D tap sequence")
        if not np.all(np.isfinite(taps)):
            raise ValueError("rir contains non-finite taps")

    def is_identity(self) -> bool:
        return self.taps.shape[0] == 1 and self.taps[0] == 1.0


@dataclass(frozen=True)
class StftParams:
    fft_size: int = 512
    window_length: int = 512
    hop_length: int = 256

    def __post_init__(self):
        if self.window_length > self.fft_size:
            raise ValueError("window_length must not exceed fft_size")
        if self.hop_length > self.window_length:
            raise ValueError("hop_length must not exceed window_length")
        if self.window_length % self.hop_length != 0:
            raise ValueError("hop_length must divide window_length")

    @property
    def bins(self) -> int:
        return self.fft_size // 2 + 1

    def frame_count(self, n: int) -> int:
        if n < self.window_length:
            raise ValueError(
                f"waveform of {n} samples is shorter than one window "
                f"({self.window_length})"
            )
        return 1 + (n - self.window_length) // self.hop_length


def hann_window(length: int) -> np.ndarray:
    """Periodic Hann window (exact constant overlap-add at 50% hop)."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(length) / length)


@dataclass(frozen=True)
class ComplexSpectrogram:
    """STFT frames-by-bins grid of complex values."""

    data: np.ndarray
    params: StftParams

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.complex128)
        object.__setattr__(self, "data", data)
        if data.ndim != 2:
            raise ValueError("spectrogram must be 2-D (frames, bins)")
        if data.shape[1] != self.params.bins:
            raise ValueError(
                f"spectrogram has {data.shape[1]} bins, "
                f"params require {self.params.bins}"
            )

    @property
    def frames(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class PsdMatrix:
    """Per-frame, per-bin power spectral density in dB SPL."""

    db: np.ndarray
    floor_db: float
    params: StftParams
    sample_rate: int = PIPELINE_RATE

    def __post_init__(self):
        db = np.asarray(self.db, dtype=np.float64)
        object.__setattr__(self, "db", db)
        if db.ndim != 2:
            raise ValueError("psd matrix must be 2-D (frames, bins)")


def load_wav(path) -> Waveform:
    """Read a mono 16-bit PCM WAV; samples scaled to [-1, 1] by 1/32768."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[0:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise MalformedWavError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(blob):
        cid = blob[pos : pos + 4]
        (size,) = struct.unpack_from("<I", blob, pos + 4)
        body = blob[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise MalformedWavError(f"{path}: truncated '{cid.decode(errors='replace')}' chunk")
        if cid == b"fmt ":
            if size < 16:
                raise MalformedWavError(f"{path}: fmt chunk too small")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)

    if fmt is None or data is None:
        raise MalformedWavError(f"{path}: missing fmt or data chunk")
    audio_format, channels, rate, _byte_rate, _align, bit_depth = fmt
    if audio_format != 1:
        raise MalformedWavError(f"{path}: not PCM (format tag {audio_format})")
    if channels != 1:
        raise UnsupportedChannelsError(f"{path}: {channels} channels, expected mono")
    if bit_depth != 16:
        raise UnsupportedBitDepthError(f"{path}: {bit_depth}-bit, expected 16-bit")
    if rate != PIPELINE_RATE:
        raise UnsupportedRateError(f"{path}: {rate} Hz, expected {PIPELINE_RATE} Hz")

    ints = np.frombuffer(data[: len(data) - (len(data) % 2)], dtype="<i2")
    return Waveform(ints.astype(np.float64) / 32768.0, rate)


def save_wav(wave: Waveform, path) -> int:
    """Write mono 16-bit PCM; returns the count of samples clamped into range."""
    x = wave.samples
    clipped = int(np.count_nonzero((x < -1.0) | (x > 1.0)))
    if clipped:
        warnings.warn(f"save_wav: clamped {clipped} out-of-range samples")
        x = np.clip(x, -1.0, 1.0)
    ints = np.minimum(np.floor(x * 32768.0), 32767.0).astype("<i2")
    payload = ints.tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF",
        36 + len(payload),
        b"WAVE",
        b"fmt ",
        16,
        1,
        1,
        wave.sample_rate,
        wave.sample_rate * 2,
        2,
        16,
        b"data",
        len(payload),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
    return clipped


def stft(wave: Waveform, params: StftParams = StftParams()) -> ComplexSpectrogram:
    """Hann-windowed STFT; trailing samples that do not fill a window are dropped."""
    x = wave.samples
    frames = params.frame_count(len(x))
    win = hann_window(params.window_length)
    idx = (
        np.arange(frames)[:, None] * params.hop_length
        + np.arange(params.window_length)[None, :]
    )
    segs = x[idx] * win[None, :]
    return ComplexSpectrogram(np.fft.rfft(segs, n=params.fft_size, axis=1), params)


def synthesis_norm_pattern(params: StftParams) -> np.ndarray:
    """Window-squared overlap sum per hop residue (the steady-state divisor).

    Normalizing by this periodic pattern rather than the per-sample
    accumulation keeps the inverse bounded at clip edges, where a raw
    accumulation would divide by near-zero window tails.
    """
    win = hann_window(params.window_length)
    wsq = win * win
    pattern = np.zeros(params.hop_length)
    for start in range(0, params.window_length, params.hop_length):
        pattern += wsq[start : start + params.hop_length]
    return pattern


def istft(spec: ComplexSpectrogram, length: int) -> Waveform:
    """Weighted overlap-add inverse; exact on stft output over the interior."""
    params = spec.params
    frames = spec.frames
    win = hann_window(params.window_length)
    segs = np.fft.irfft(spec.data, n=params.fft_size, axis=1)[:, : params.window_length]
    segs = segs * win[None, :]
    covered = (frames - 1) * params.hop_length + params.window_length
    total = max(length, covered)
    out = np.zeros(total)
    for f in range(frames):
        start = f * params.hop_length
        out[start : start + params.window_length] += segs[f]
    pattern = synthesis_norm_pattern(params)
    norm = np.tile(pattern, -(-total // params.hop_length))[:total]
    nz = norm > 1e-12
    out[nz] /= norm[nz]
    out[~nz] = 0.0
    return Waveform(out[:length], PIPELINE_RATE)


def convolve(wave: Waveform, rir: Rir) -> Waveform:
    """Full linear convolution with the RIR, truncated to the input length."""
    if wave.sample_rate != rir.sample_rate:
        raise ValueError(
            f"sample-rate mismatch: wave {wave.sample_rate} Hz vs rir {rir.sample_rate} Hz"
        )
    n = len(wave)
    m = rir.taps.shape[0]
    if m > n:
        raise ValueError(f"rir length {m} exceeds waveform length {n}")
    if n > _FFT_CONV_MIN:
        full = n + m - 1
        nfft = 1 << (full - 1).bit_length()
        out = np.fft.irfft(
            np.fft.rfft(wave.samples, nfft) * np.fft.rfft(rir.taps, nfft), nfft
        )[:n]
    else:
        out = np.convolve(wave.samples, rir.taps)[:n]
    return Waveform(out, wave.sample_rate)


def psd(spec: ComplexSpectrogram) -> PsdMatrix:
    """dB-SPL power spectral density of a spectrogram.

    Calibrated so a full-scale bin-centered sine peaks at SPL_FULL_SCALE_DB:
    the Hann window's coherent gain (sum of the window / 2) is divided out
    before converting to dB.
    """
    win_sum = float(np.sum(hann_window(spec.params.window_length)))
    correction = (2.0 / win_sum) ** 2
    power = (spec.data.real**2 + spec.data.imag**2) * correction
    with np.errstate(divide="ignore"):
        db = SPL_FULL_SCALE_DB + 10.0 * np.log10(power)
    db = np.maximum(db, PSD_FLOOR_DB)
    return PsdMatrix(db, PSD_FLOOR_DB, spec.params)


def power_limit_from_db(theta_db: np.ndarray, params: StftParams) -> np.ndarray:
    """Squared-magnitude ceiling per bin equivalent to a dB-SPL threshold grid."""
    win_sum = float(np.sum(hann_window(params.window_length)))
    correction = (2.0 / win_sum) ** 2
    return 10.0 ** ((theta_db - SPL_FULL_SCALE_DB) / 10.0) / correction


def mix_at_snr(
    clean: Waveform,
    noises: list[Waveform],
    snr_db: float,
    rir: Rir | None = None,
) -> tuple[Waveform, Waveform]:
    """Mix clean speech with summed noise at a post-RIR SNR.

    Returns (x, reverberated_clean) where x = r*(y + g*b) with g chosen so
    that the power ratio of r*y to r*(g*b) equals snr_db. Both returns share
    one peak-normalization factor (applied only when the mix would exceed
    full scale).
    """
    n = len(clean)
    for nz in noises:
        if nz.sample_rate != clean.sample_rate:
            raise ValueError("noise sample rate differs from clean")
    if rir is not None and rir.sample_rate != clean.sample_rate:
        raise ValueError("rir sample rate differs from clean")

    def reverb(x: np.ndarray) -> np.ndarray:
        if rir is None:
            return x
        return convolve(Waveform(x, clean.sample_rate), rir).samples

    ry = reverb(clean.samples)
    p_clean = float(np.mean(ry**2))
    if p_clean <= 0.0:
        raise ValueError("clean signal has zero power after reverberation")

    if noises:
        b = np.zeros(n)
        for nz in noises:
            reps = -(-n // len(nz))
            b += np.tile(nz.samples, reps)[:n]
        rb = reverb(b)
        p_noise = float(np.mean(rb**2))
        if p_noise <= 0.0:
            raise ValueError("summed noise has zero power after reverberation")
        g = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
        x = ry + g * rb
    else:
        x = ry.copy()

    peak = float(np.max(np.abs(x))) if n else 0.0
    scale = 1.0 / peak if peak > 1.0 else 1.0
    return (
        Waveform(x * scale, clean.sample_rate),
        Waveform(ry * scale, clean.sample_rate),
    )


def synth_test_signal(kind: str, seconds: float, seed: int) -> Waveform:
    """Deterministic test audio: 'harmonic-voice', 'white', or 'babble'."""
    if seconds <= 0:
        raise ValueError("seconds must be positive")
    rng = np.random.default_rng(seed)
    n = int(round(seconds * PIPELINE_RATE))
    t = np.arange(n) / PIPELINE_RATE

    if kind == "white":
        x = rng.standard_normal(n)
    elif kind == "harmonic-voice":
        x = _harmonic_voice(rng, t)
    elif kind == "babble":
        x = np.zeros(n)
        for _ in range(6):
            x += _harmonic_voice(np.random.default_rng(rng.integers(2**63)), t)
    else:
        raise ValueError(f"unknown test-signal kind: {kind!r}")

    peak = float(np.max(np.abs(x)))
    if peak > 0:
        x = 0.95 * x / peak
    return Waveform(x, PIPELINE_RATE)


def _harmonic_voice(rng: np.random.Generator, t: np.ndarray) -> np.ndarray:
    """Amplitude-modulated harmonic stack with fricative and murmur bands.

    Carries speech-like 2-8 Hz envelope modulation in every one-third-octave
    band an intelligibility metric tracks: voiced harmonics up to ~3.8 kHz,
    gated noise bursts around 3.3 kHz standing in for fricatives, and a gated
    low murmur filling the lowest analysis band for any pitch.
    """
    n = t.shape[0]
    f0_base = rng.uniform(105.0, 190.0)
    drift = np.cumsum(rng.standard_normal(n)) / PIPELINE_RATE
    drift = drift / (np.max(np.abs(drift)) + 1e-12)
    f0 = f0_base * (1.0 + 0.06 * drift + 0.04 * np.sin(2 * np.pi * 0.7 * t))
    phase = 2 * np.pi * np.cumsum(f0) / PIPELINE_RATE

    # syllabic envelope: a few raised-cosine modulators plus a floor so the
    # signal never drops fully silent
    env = 0.15 + np.zeros(n)
    for _ in range(3):
        rate = rng.uniform(1.5, 7.5)
        ph = rng.uniform(0, 2 * np.pi)
        env += 0.4 * (0.5 + 0.5 * np.sin(2 * np.pi * rate * t + ph)) ** 2
    voiced = np.zeros(n)
    n_harm = int(3800.0 / f0_base)
    for h in range(1, n_harm + 1):
        # spectral tilt roughly -6 dB/octave with a formant-like bump
        freq = h * f0_base
        gain = 1.0 / h * (1.0 + 2.0 * np.exp(-0.5 * ((freq - 800.0) / 350.0) ** 2))
        voiced += gain * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    voiced *= env
    rms_voiced = np.sqrt(np.mean(voiced**2))

    freqs = np.fft.rfftfreq(n, 1.0 / PIPELINE_RATE)

    def shaped_noise(center_hz, width_hz):
        spec = np.fft.rfft(rng.standard_normal(n))
        band = np.exp(-0.5 * ((freqs - center_hz) / width_hz) ** 2)
        out = np.fft.irfft(spec * band, n)
        return out / (np.sqrt(np.mean(out**2)) + 1e-12)

    fric_env = 0.1 + np.zeros(n)
    for _ in range(2):
        rate = rng.uniform(2.0, 6.0)
        ph = rng.uniform(0, 2 * np.pi)
        fric_env += 0.45 * (0.5 + 0.5 * np.sin(2 * np.pi * rate * t + ph)) ** 4
    fricative = fric_env * shaped_noise(3300.0, 900.0) * rms_voiced * 0.5
    murmur = env * shaped_noise(200.0, 60.0) * rms_voiced * 0.3
    return voiced + fricative + murmur
