"""Differentiable STFT/ISTFT/PSD built from autodiff primitives.

The transforms mirror dsp.stft / dsp.istft / dsp.psd numerically (matrix DFT
instead of FFT, identical windowing and normalization) so spectral values
computed on a tape agree with the analysis path to float precision.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import DiffValue, Tape
from .dsp import (
    PSD_FLOOR_DB,
    SPL_FULL_SCALE_DB,
    StftParams,
    hann_window,
    synthesis_norm_pattern,
)


class _DiffTables:
    def __init__(self, params: StftParams):
        self.params = params
        self.window = hann_window(params.window_length)
        self.dft_cos, self.dft_sin = ad.dft_matrices(params.window_length, params.fft_size)
        ic, is_ = ad.idft_matrices(params.fft_size, params.window_length)
        self.idft_cos = ic
        self.idft_sin = is_
        win_sum = float(np.sum(self.window))
        self.psd_correction = (2.0 / win_sum) ** 2
        # linear-power epsilon equivalent to the PSD floor
        self.psd_power_floor = 10.0 ** ((PSD_FLOOR_DB - SPL_FULL_SCALE_DB) / 10.0)


_CACHE: dict[tuple, _DiffTables] = {}


def tables(params: StftParams) -> _DiffTables:
    key = (params.fft_size, params.window_length, params.hop_length)
    if key not in _CACHE:
        _CACHE[key] = _DiffTables(params)
    return _CACHE[key]


def stft_pair(x: DiffValue, params: StftParams) -> tuple[DiffValue, DiffValue]:
    """Differentiable STFT returning (real, imaginary) frame-by-bin grids."""
    t = tables(params)
    tape = x._tape
    frames = ad.frame(x, params.window_length, params.hop_length)
    count = frames.data.shape[0]
    frames = ad.mul(frames, tape.constant(np.tile(t.window, (count, 1))))
    re = ad.matmul(frames, tape.constant(t.dft_cos))
    im = ad.matmul(frames, tape.constant(t.dft_sin))
    return re, im


def istft_wave(
    re: DiffValue, im: DiffValue, params: StftParams, length: int
) -> DiffValue:
    """Differentiable inverse STFT via windowed overlap-add."""
    t = tables(params)
    tape = re._tape
    frames = ad.add(
        ad.matmul(re, tape.constant(t.idft_cos)),
        ad.matmul(im, tape.constant(t.idft_sin)),
    )
    count = frames.data.shape[0]
    frames = ad.mul(frames, tape.constant(np.tile(t.window, (count, 1))))
    covered = (count - 1) * params.hop_length + params.window_length
    total = max(length, covered)
    buf = ad.overlap_add(frames, params.hop_length, total)
    pattern = synthesis_norm_pattern(params)
    norm = np.tile(pattern, -(-total // params.hop_length))[:total]
    recip = np.where(norm > 1e-12, 1.0 / np.where(norm > 1e-12, norm, 1.0), 0.0)
    buf = ad.mul(buf, tape.constant(recip))
    if buf.data.shape[0] == length:
        return buf
    return ad.slice1d(buf, 0, length)


def psd_db(re: DiffValue, im: DiffValue, params: StftParams) -> DiffValue:
    """Differentiable dB-SPL PSD; near-silent bins saturate around the floor."""
    t = tables(params)
    tape = re._tape
    power = ad.mul(
        ad.add(ad.square(re), ad.square(im)), tape.constant(t.psd_correction)
    )
    power = ad.add(power, tape.constant(t.psd_power_floor))
    return ad.add(
        ad.mul(ad.log10(power), tape.constant(10.0)),
        tape.constant(SPL_FULL_SCALE_DB),
    )
