"""Intelligibility and distortion metrics.

stoi() follows the original short-time objective intelligibility definition:
10 kHz internal rate, energy-based silent-frame removal driven by the
reference signal, 15 one-third-octave bands from 150 Hz, 384 ms envelope
segments, -15 dB SDR clipping, and a mean of per-band-segment correlations.
stoi_diff() is the same pipeline recorded on an autodiff tape; the two paths
agree to well below 1e-9.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffValue, Tape
from .dsp import Waveform

EPS = float(np.finfo(np.float64).eps)
SNR_CAP_DB = 300.0


@dataclass(frozen=True)
class StoiConfig:
    """Fixed parameters of the reference intelligibility definition."""

    internal_rate: int = 10000
    frame_length: int = 256
    hop_length: int = 128
    fft_size: int = 512
    band_count: int = 15
    lowest_center_hz: float = 150.0
    segment_frames: int = 30
    clip_sdr_db: float = -15.0
    dyn_range_db: float = 40.0


_CFG = StoiConfig()


# ---------------------------------------------------------------------------
# fixed tables
# ---------------------------------------------------------------------------


def _resample_filter(up: int, down: int) -> tuple[np.ndarray, int]:
    """Kaiser-windowed sinc low-pass for polyphase resampling (gain `up`)."""
    max_rate = max(up, down)
    half = 10 * max_rate
    n = np.arange(2 * half + 1) - half
    fc = 1.0 / max_rate
    h = fc * np.sinc(fc * n) * np.kaiser(2 * half + 1, 5.0)
    h /= np.sum(h)
    return h * up, half


def _third_octave_matrix(cfg: StoiConfig) -> np.ndarray:
    bins = cfg.fft_size // 2 + 1
    f = np.linspace(0, cfg.internal_rate, cfg.fft_size + 1)[:bins]
    k = np.arange(cfg.band_count, dtype=np.float64)
    f_low = cfg.lowest_center_hz * 2.0 ** ((2 * k - 1) / 6.0)
    f_high = cfg.lowest_center_hz * 2.0 ** ((2 * k + 1) / 6.0)
    obm = np.zeros((cfg.band_count, bins))
    for i in range(cfg.band_count):
        lo = int(np.argmin((f - f_low[i]) ** 2))
        hi = int(np.argmin((f - f_high[i]) ** 2))
        obm[i, lo:hi] = 1.0
    return obm


def _analysis_window(length: int) -> np.ndarray:
    # symmetric Hann without the zero endpoints (matlab hanning)
    k = np.arange(1, length + 1)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * k / (length + 1))


class _StoiTables:
    def __init__(self, cfg: StoiConfig):
        self.cfg = cfg
        self.filter, self.filter_delay = _resample_filter(5, 8)
        self.window = _analysis_window(cfg.frame_length)
        self.obm = _third_octave_matrix(cfg)
        self.dft_cos, self.dft_sin = ad.dft_matrices(cfg.frame_length, cfg.fft_size)
        self.clip_factor = 1.0 + 10.0 ** (-cfg.clip_sdr_db / 20.0)


_TABLES = _StoiTables(_CFG)


# ---------------------------------------------------------------------------
# plain numpy path
# ---------------------------------------------------------------------------


def _resample_16k_to_10k(x: np.ndarray) -> np.ndarray:
    up, down = 5, 8
    h, half = _TABLES.filter, _TABLES.filter_delay
    x_up = np.zeros(len(x) * up)
    x_up[::up] = x
    full = ad.fast_full_convolve(x_up, h)
    return full[half : half + len(x) * up : down].copy()


def _frame_indices(n: int, frame: int, hop: int) -> np.ndarray:
    count = 1 + (n - frame) // hop
    return np.arange(count)[:, None] * hop + np.arange(frame)[None, :]


def _silent_frame_mask(ref10: np.ndarray) -> np.ndarray:
    cfg, w = _CFG, _TABLES.window
    idx = _frame_indices(len(ref10), cfg.frame_length, cfg.hop_length)
    energies = 20.0 * np.log10(np.linalg.norm(ref10[idx] * w, axis=1) + EPS)
    return energies > np.max(energies) - cfg.dyn_range_db


def _overlap_add_frames(frames: np.ndarray, hop: int) -> np.ndarray:
    count, width = frames.shape
    out = np.zeros((count - 1) * hop + width)
    for i in range(count):
        out[i * hop : i * hop + width] += frames[i]
    return out


def _band_envelope(sig: np.ndarray) -> np.ndarray:
    """One-third-octave band magnitudes per frame: (frames, bands)."""
    cfg, w = _CFG, _TABLES.window
    idx = _frame_indices(len(sig), cfg.frame_length, cfg.hop_length)
    segs = sig[idx] * w
    spec = np.fft.rfft(segs, n=cfg.fft_size, axis=1)
    power = spec.real**2 + spec.imag**2
    return np.sqrt(power @ _TABLES.obm.T)


def _segment_rows(tob: np.ndarray, width: int) -> np.ndarray:
    """(F, B) -> (B*M, width) rows matching autodiff.segment_cols."""
    f, b = tob.shape
    m = f - width + 1
    idx = np.arange(m)[:, None] + np.arange(width)[None, :]
    return tob[idx, :].transpose(2, 0, 1).reshape(b * m, width)


def _prepare_reference(ref10_sil: np.ndarray):
    cfg = _CFG
    x_tob = _band_envelope(ref10_sil)
    if x_tob.shape[0] < cfg.segment_frames:
        raise ValueError(
            f"audio too short: {x_tob.shape[0]} frames after silence removal, "
            f"need {cfg.segment_frames}"
        )
    x_rows = _segment_rows(x_tob, cfg.segment_frames)
    x_norms = np.sqrt(np.sum(x_rows * x_rows, axis=1))
    clip_rows = x_rows * _TABLES.clip_factor
    x_centered = x_rows - np.mean(x_rows, axis=1, keepdims=True)
    x_unit = x_centered / (
        np.sqrt(np.sum(x_centered * x_centered, axis=1, keepdims=True)) + EPS
    )
    return x_rows, x_norms, clip_rows, x_unit


def _correlation_mean(y_rows, x_norms, clip_rows, x_unit) -> float:
    alpha = x_norms / (np.sqrt(np.sum(y_rows * y_rows, axis=1)) + EPS)
    y_n = np.minimum(y_rows * alpha[:, None], clip_rows)
    y_c = y_n - np.mean(y_n, axis=1, keepdims=True)
    y_den = np.sqrt(np.sum(y_c * y_c, axis=1)) + EPS
    corr = np.sum(y_c * x_unit, axis=1) / y_den
    return float(np.mean(corr))


def _check_pair(reference: Waveform, degraded_len: int, degraded_rate: int):
    if len(reference) != degraded_len:
        raise ValueError(
            f"length mismatch: reference {len(reference)} vs degraded {degraded_len}"
        )
    if reference.sample_rate != degraded_rate:
        raise ValueError("sample-rate mismatch between reference and degraded")
    if reference.sample_rate not in (16000, _CFG.internal_rate):
        raise ValueError(
            f"unsupported sample rate {reference.sample_rate}; "
            f"expected 16000 or {_CFG.internal_rate}"
        )


def stoi(reference: Waveform, degraded: Waveform) -> float:
    """Short-time objective intelligibility of degraded speech vs a reference."""
    _check_pair(reference, len(degraded), degraded.sample_rate)
    if reference.sample_rate == 16000:
        ref10 = _resample_16k_to_10k(reference.samples)
        deg10 = _resample_16k_to_10k(degraded.samples)
    else:
        ref10 = reference.samples
        deg10 = degraded.samples
    cfg, w = _CFG, _TABLES.window
    if len(ref10) < cfg.frame_length:
        raise ValueError("audio too short for even one analysis frame")

    mask = _silent_frame_mask(ref10)
    if not np.any(mask):
        raise ValueError("reference signal is entirely silent")
    idx = _frame_indices(len(ref10), cfg.frame_length, cfg.hop_length)
    kept = np.nonzero(mask)[0]
    ref_sil = _overlap_add_frames(ref10[idx[kept]] * w, cfg.hop_length)
    deg_sil = _overlap_add_frames(deg10[idx[kept]] * w, cfg.hop_length)

    x_rows, x_norms, clip_rows, x_unit = _prepare_reference(ref_sil)
    y_rows = _segment_rows(_band_envelope(deg_sil), cfg.segment_frames)
    return _correlation_mean(y_rows, x_norms, clip_rows, x_unit)


# ---------------------------------------------------------------------------
# differentiable path
# ---------------------------------------------------------------------------


class StoiContext:
    """Reference-side precomputation reused across attack iterations."""

    def __init__(self, reference: Waveform):
        if reference.sample_rate != 16000:
            raise ValueError("differentiable stoi expects 16 kHz input")
        cfg = _CFG
        self.n_input = len(reference)
        ref10 = _resample_16k_to_10k(reference.samples)
        if len(ref10) < cfg.frame_length:
            raise ValueError("audio too short for even one analysis frame")
        mask = _silent_frame_mask(ref10)
        if not np.any(mask):
            raise ValueError("reference signal is entirely silent")
        self.kept = np.nonzero(mask)[0]
        idx = _frame_indices(len(ref10), cfg.frame_length, cfg.hop_length)
        ref_sil = _overlap_add_frames(ref10[idx[self.kept]] * _TABLES.window, cfg.hop_length)
        self.n_sil = len(ref_sil)
        self.n_resampled = len(ref10)
        (self.x_rows, self.x_norms, self.clip_rows, self.x_unit) = _prepare_reference(
            ref_sil
        )
        self.frame_window = np.tile(_TABLES.window, (len(idx), 1))
        self.sil_window = np.tile(_TABLES.window, (self._sil_frames(), 1))

    def _sil_frames(self) -> int:
        cfg = _CFG
        return 1 + (self.n_sil - cfg.frame_length) // cfg.hop_length


def stoi_diff_from_context(ctx: StoiContext, degraded: DiffValue) -> DiffValue:
    """Differentiable stoi of a degraded 16 kHz waveform on a tape."""
    cfg = _CFG
    if degraded.data.shape != (ctx.n_input,):
        raise ValueError(
            f"length mismatch: context {ctx.n_input} vs degraded {degraded.data.shape}"
        )
    tape = degraded._tape

    up, down = 5, 8
    h, half = _TABLES.filter, _TABLES.filter_delay
    y_up = ad.upsample_zero(degraded, up)
    y_full = ad.conv1d_full(y_up, h)
    y10 = ad.slice1d(y_full, half, half + ctx.n_input * up, down)

    frames = ad.frame(y10, cfg.frame_length, cfg.hop_length)
    frames = ad.mul(frames, tape.constant(ctx.frame_window))
    kept = ad.take_rows(frames, ctx.kept)
    y_sil = ad.overlap_add(kept, cfg.hop_length, ctx.n_sil)

    segs = ad.frame(y_sil, cfg.frame_length, cfg.hop_length)
    segs = ad.mul(segs, tape.constant(ctx.sil_window))
    re = ad.matmul(segs, tape.constant(_TABLES.dft_cos))
    im = ad.matmul(segs, tape.constant(_TABLES.dft_sin))
    power = ad.add(ad.square(re), ad.square(im))
    tob = ad.sqrt(ad.matmul(power, tape.constant(_TABLES.obm.T)))
    y_rows = ad.segment_cols(tob, cfg.segment_frames)

    alpha = ad.div(
        tape.constant(ctx.x_norms),
        ad.add(ad.row_norm(y_rows), tape.constant(EPS)),
    )
    y_n = ad.minimum(ad.mul_rows(y_rows, alpha), tape.constant(ctx.clip_rows))
    y_c = ad.sub_rows(y_n, ad.row_mean(y_n))
    y_den = ad.add(ad.row_norm(y_c), tape.constant(EPS))
    corr = ad.div(ad.row_dot(y_c, tape.constant(ctx.x_unit)), y_den)
    return ad.mean_all(corr)


def stoi_diff(reference: Waveform, degraded: DiffValue) -> DiffValue:
    """Differentiable stoi; silent-frame selection is fixed by the reference."""
    return stoi_diff_from_context(StoiContext(reference), degraded)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def snr_db(reference: Waveform, degraded: Waveform) -> float:
    """10*log10 of reference power over error power, capped at SNR_CAP_DB."""
    if len(reference) != len(degraded):
        raise ValueError("length mismatch")
    p_ref = float(np.mean(reference.samples**2))
    if p_ref <= 0.0:
        raise ValueError("reference has zero power")
    p_err = float(np.mean((reference.samples - degraded.samples) ** 2))
    if p_err == 0.0:
        return SNR_CAP_DB
    return min(10.0 * np.log10(p_ref / p_err), SNR_CAP_DB)


def mse(a: Waveform, b: Waveform) -> float:
    if len(a) != len(b):
        raise ValueError("length mismatch")
    return float(np.mean((a.samples - b.samples) ** 2))
