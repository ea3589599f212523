"""Frequency-domain masking thresholds with temporal pre/post-masking.

The contemporaneous model follows the classic MP3-style chain: tonal and
noise masker extraction from the per-frame PSD, absolute-threshold and
0.5-Bark pruning, two-slope Bark-distance spreading, linear-power
combination, and a floor at the threshold in quiet. Temporal masking adds
exponentially decaying contributions from neighbouring frames; the final
threshold is the element-wise maximum of all contributions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .dsp import PIPELINE_RATE, PsdMatrix, StftParams, Waveform, psd, stft

ATH_MIN_HZ = 20.0
ATH_MAX_HZ = 8000.0

# dB drop per ms of frame gap for a linear-power decay rate of k per ms:
# 10*log10(e) * k
_DB_PER_NEPER = 10.0 * np.log10(np.e)


@dataclass(frozen=True)
class TemporalMaskingParams:
    post_decay: float = 0.02  # per ms
    post_horizon_ms: float = 100.0
    pre_decay: float = 0.16  # per ms
    pre_horizon_ms: float = 20.0

    def __post_init__(self):
        if self.post_decay <= 0 or self.pre_decay <= 0:
            raise ValueError("decay rates must be positive")
        if self.post_horizon_ms <= 0 or self.pre_horizon_ms <= 0:
            raise ValueError("horizons must be positive")


@dataclass(frozen=True)
class MaskingConfig:
    offset_db: float = 12.0
    temporal: TemporalMaskingParams = field(default_factory=TemporalMaskingParams)
    include_temporal: bool = True

    def __post_init__(self):
        if self.offset_db < 0:
            raise ValueError("offset_db must be non-negative")


@dataclass(frozen=True)
class MaskingThresholds:
    """Per-frame, per-bin threshold grid theta in dB SPL.

    theta_raw holds the pre-offset basis; theta = theta_raw - offset_db is
    always computed as a single subtraction so that composing offsets is
    bit-exact regardless of how the total was accumulated.
    """

    theta: np.ndarray
    offset_db: float
    params: StftParams
    sample_rate: int = PIPELINE_RATE
    theta_raw: np.ndarray | None = None

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64)
        object.__setattr__(self, "theta", theta)
        if self.theta_raw is None:
            if self.offset_db != 0.0:
                raise ValueError("theta_raw required when offset_db is nonzero")
            object.__setattr__(self, "theta_raw", theta)
        if theta.ndim != 2:
            raise ValueError("theta must be 2-D (frames, bins)")
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta contains non-finite entries")

    @property
    def shape(self):
        return self.theta.shape


def ath(freq: float) -> float:
    """Absolute threshold of hearing (dB SPL) for 20 Hz <= freq <= 8 kHz."""
    if not (ATH_MIN_HZ <= freq <= ATH_MAX_HZ):
        raise ValueError(f"frequency {freq} Hz outside [{ATH_MIN_HZ}, {ATH_MAX_HZ}]")
    return float(_ath_unchecked(np.asarray(freq, dtype=np.float64)))


def _ath_unchecked(freq):
    f = np.asarray(freq, dtype=np.float64) / 1000.0
    return (
        3.64 * f**-0.8
        - 6.5 * np.exp(-0.6 * (f - 3.3) ** 2)
        + 1e-3 * f**4
    )


def bark(freq):
    """Hz to Bark (Zwicker)."""
    f = np.asarray(freq, dtype=np.float64)
    return 13.0 * np.arctan(0.00076 * f) + 3.5 * np.arctan((f / 7500.0) ** 2)


class _ModelTables:
    """Per-(params, rate) constants for the threshold kernels."""

    def __init__(self, params: StftParams, sample_rate: int):
        bins = params.bins
        freqs = np.arange(bins) * sample_rate / params.fft_size
        self.freqs = freqs
        self.bark = bark(freqs)
        # quiet threshold, clamped to the formula's valid band; bins above
        # 8 kHz inherit the 8 kHz value rather than the quartic blow-up
        self.ath_db = _ath_unchecked(np.clip(freqs, ATH_MIN_HZ, ATH_MAX_HZ))

        # tonal-masker examination half-width by frequency tier
        maxdk = np.zeros(bins, dtype=np.int64)
        maxdk[freqs < 5512.5] = 2
        maxdk[(freqs >= 5512.5) & (freqs < 11025.0)] = 3
        maxdk[freqs >= 11025.0] = 6
        maxdk[:2] = 0
        maxdk[bins - 1 :] = 0
        self.maxdk = maxdk

        # critical-band membership (integer Bark), bin 0 excluded
        band_of_bin = np.floor(self.bark).astype(np.int64)
        band_of_bin[0] = -1
        self.band_of_bin = band_of_bin
        n_bands = int(band_of_bin.max()) + 1
        self.n_bands = n_bands
        band_pos = np.zeros(n_bands, dtype=np.int64)
        for b in range(n_bands):
            members = np.nonzero(band_of_bin == b)[0]
            if len(members):
                band_pos[b] = int(round(np.exp(np.mean(np.log(members)))))
            else:
                band_pos[b] = 0
        self.band_pos = band_pos


_TABLE_CACHE: dict[tuple, _ModelTables] = {}


def _tables(params: StftParams, sample_rate: int) -> _ModelTables:
    key = (params.fft_size, params.window_length, params.hop_length, sample_rate)
    if key not in _TABLE_CACHE:
        _TABLE_CACHE[key] = _ModelTables(params, sample_rate)
    return _TABLE_CACHE[key]


def contemporaneous_thresholds(psd_matrix: PsdMatrix) -> MaskingThresholds:
    """Per-frame global masking thresholds from a PSD grid (no offset)."""
    tables = _tables(psd_matrix.params, psd_matrix.sample_rate)
    if psd_matrix.db.shape[1] != tables.freqs.shape[0]:
        raise ValueError(
            f"psd has {psd_matrix.db.shape[1]} bins, params give {tables.freqs.shape[0]}"
        )
    theta = _kernels.global_thresholds(
        np.ascontiguousarray(psd_matrix.db),
        tables.bark,
        tables.ath_db,
        tables.maxdk,
        tables.band_of_bin,
        tables.band_pos,
        tables.n_bands,
    )
    return MaskingThresholds(theta, 0.0, psd_matrix.params, psd_matrix.sample_rate)


def temporal_masking(
    theta_c: MaskingThresholds, params: TemporalMaskingParams | None = None
) -> MaskingThresholds:
    """Extend contemporaneous thresholds with pre/post-masking decay.

    A threshold in frame tau contributes to frame tau +/- delta a candidate
    reduced by 10*log10(e) * decay * dt dB (dt in ms between frame centres),
    vanishing beyond the horizon; the output is the element-wise maximum of
    all candidates.
    """
    if params is None:
        params = TemporalMaskingParams()
    hop_ms = 1000.0 * theta_c.params.hop_length / theta_c.sample_rate
    post_steps = int(np.floor(params.post_horizon_ms / hop_ms))
    pre_steps = int(np.floor(params.pre_horizon_ms / hop_ms))
    raw = _kernels.temporal_max(
        np.ascontiguousarray(theta_c.theta_raw),
        post_steps,
        _DB_PER_NEPER * params.post_decay * hop_ms,
        pre_steps,
        _DB_PER_NEPER * params.pre_decay * hop_ms,
    )
    return MaskingThresholds(
        raw - theta_c.offset_db,
        theta_c.offset_db,
        theta_c.params,
        theta_c.sample_rate,
        theta_raw=raw,
    )


def apply_offset(thresholds: MaskingThresholds, offset_db: float) -> MaskingThresholds:
    """Shift every threshold down by offset_db (tightening the feasible set)."""
    if offset_db < 0:
        raise ValueError("offset_db must be non-negative")
    total = thresholds.offset_db + offset_db
    return MaskingThresholds(
        thresholds.theta_raw - total,
        total,
        thresholds.params,
        thresholds.sample_rate,
        theta_raw=thresholds.theta_raw,
    )


def uap_thresholds(members: list[MaskingThresholds]) -> MaskingThresholds:
    """Element-wise minimum across thresholds: the shared feasible set."""
    if not members:
        raise ValueError("empty threshold list")
    shape = members[0].shape
    offset = members[0].offset_db
    for m in members[1:]:
        if m.shape != shape:
            raise ValueError(f"threshold shape mismatch: {m.shape} vs {shape}")
        if m.offset_db != offset:
            raise ValueError("cannot intersect thresholds with differing offsets")
    raw = members[0].theta_raw.copy()
    for m in members[1:]:
        np.minimum(raw, m.theta_raw, out=raw)
    return MaskingThresholds(
        raw - offset,
        offset,
        members[0].params,
        members[0].sample_rate,
        theta_raw=raw,
    )


def compute_thresholds(
    x: Waveform,
    config: MaskingConfig | None = None,
    params: StftParams | None = None,
) -> MaskingThresholds:
    """Full pipeline: PSD -> contemporaneous -> optional temporal -> offset."""
    if config is None:
        config = MaskingConfig()
    if params is None:
        params = StftParams()
    theta = contemporaneous_thresholds(psd(stft(x, params)))
    if config.include_temporal:
        theta = temporal_masking(theta, config.temporal)
    return apply_offset(theta, config.offset_db)


def format_thresholds_csv(thresholds: MaskingThresholds) -> str:
    """CSV dump: one row per frame, one column per bin, 3-decimal dB values."""
    lines = []
    for row in thresholds.theta:
        lines.append(",".join(f"{v:.3f}" for v in row))
    return "\n".join(lines) + "\n"
