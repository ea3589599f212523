"""Hot inner loops for the masking model, JIT-compiled when numba is available.

Set MASKADV_NO_NUMBA=1 to force the pure-numpy fallbacks (same semantics,
slower). benchmarks/bench_kernels.py compares the two paths.
"""

from __future__ import annotations

import os

import numpy as np

_DB_FLOOR = -200.0
_SF_LOW = -3.0  # spreading reaches 3 Bark below a masker
_SF_HIGH = 8.0  # and 8 Bark above


def numba_enabled() -> bool:
    return _USE_NUMBA


def _spreading_db(dz: float, level: float) -> float:
    """Two-slope spreading function value at Bark distance dz from a masker."""
    if dz < -1.0:
        return 17.0 * dz - 0.4 * level + 11.0
    if dz < 0.0:
        return (0.4 * level + 6.0) * dz
    if dz < 1.0:
        return -17.0 * dz
    return (0.15 * level - 17.0) * dz - 0.15 * level


def _frame_threshold_impl(
    psd_frame,
    bark,
    ath_db,
    maxdk,
    band_of_bin,
    band_pos,
    n_bands,
    theta_out,
):
    """Global masking threshold for one frame (written into theta_out).

    Stages: tonal-masker scan, per-critical-band noise maskers, absolute
    threshold and 0.5-Bark pruning, two-slope spreading, linear-power
    combination, max with the quiet threshold.
    """
    n_bins = psd_frame.shape[0]

    # --- tonal maskers -----------------------------------------------------
    masker_bin = np.full(n_bins + n_bands, -1, dtype=np.int64)
    masker_level = np.zeros(n_bins + n_bands)
    masker_tonal = np.zeros(n_bins + n_bands, dtype=np.bool_)
    n_maskers = 0
    claimed = np.zeros(n_bins, dtype=np.bool_)

    for k in range(2, n_bins - 1):
        if maxdk[k] == 0:
            continue
        if not (psd_frame[k] > psd_frame[k - 1] and psd_frame[k] > psd_frame[k + 1]):
            continue
        is_tonal = True
        for d in range(2, maxdk[k] + 1):
            if k - d >= 0 and psd_frame[k] - psd_frame[k - d] < 7.0:
                is_tonal = False
                break
            if k + d < n_bins and psd_frame[k] - psd_frame[k + d] < 7.0:
                is_tonal = False
                break
        if not is_tonal:
            continue
        level = 10.0 * np.log10(
            10.0 ** (psd_frame[k - 1] / 10.0)
            + 10.0 ** (psd_frame[k] / 10.0)
            + 10.0 ** (psd_frame[k + 1] / 10.0)
        )
        masker_bin[n_maskers] = k
        masker_level[n_maskers] = level
        masker_tonal[n_maskers] = True
        n_maskers += 1
        lo = k - maxdk[k]
        if lo < 0:
            lo = 0
        hi = k + maxdk[k]
        if hi > n_bins - 1:
            hi = n_bins - 1
        for i in range(lo, hi + 1):
            claimed[i] = True

    # --- noise maskers (residual energy per critical band) ------------------
    band_power = np.zeros(n_bands)
    for k in range(1, n_bins):
        b = band_of_bin[k]
        if b >= 0 and not claimed[k]:
            band_power[b] += 10.0 ** (psd_frame[k] / 10.0)
    for b in range(n_bands):
        if band_power[b] > 0.0:
            masker_bin[n_maskers] = band_pos[b]
            masker_level[n_maskers] = 10.0 * np.log10(band_power[b])
            masker_tonal[n_maskers] = False
            n_maskers += 1

    # --- pruning ------------------------------------------------------------
    keep = np.ones(n_maskers, dtype=np.bool_)
    for m in range(n_maskers):
        if masker_level[m] < ath_db[masker_bin[m]]:
            keep[m] = False
    for a in range(n_maskers):
        if not keep[a]:
            continue
        for b in range(a + 1, n_maskers):
            if not keep[b]:
                continue
            dz = bark[masker_bin[a]] - bark[masker_bin[b]]
            if dz < 0.0:
                dz = -dz
            if dz < 0.5:
                if masker_level[a] >= masker_level[b]:
                    keep[b] = False
                else:
                    keep[a] = False
                    break

    # --- spreading and combination -------------------------------------------
    acc = np.zeros(n_bins)
    for m in range(n_maskers):
        if not keep[m]:
            continue
        zj = bark[masker_bin[m]]
        level = masker_level[m]
        if masker_tonal[m]:
            base = level - 0.275 * zj - 6.025
        else:
            base = level - 0.175 * zj - 2.025
        for i in range(n_bins):
            dz = bark[i] - zj
            if dz < _SF_LOW or dz >= _SF_HIGH:
                continue
            acc[i] += 10.0 ** ((base + _spreading_db(dz, level)) / 10.0)

    for i in range(n_bins):
        if acc[i] > 0.0:
            spread_db = 10.0 * np.log10(acc[i])
            theta_out[i] = spread_db if spread_db > ath_db[i] else ath_db[i]
        else:
            theta_out[i] = ath_db[i]


def _global_thresholds_loop(psd, bark, ath_db, maxdk, band_of_bin, band_pos, n_bands):
    theta = np.empty_like(psd)
    for f in range(psd.shape[0]):
        _frame_threshold_impl(
            psd[f], bark, ath_db, maxdk, band_of_bin, band_pos, n_bands, theta[f]
        )
    return theta


def _temporal_max_loop(theta, post_steps, post_db_per_step, pre_steps, pre_db_per_step):
    frames, bins = theta.shape
    out = theta.copy()
    for f in range(frames):
        for d in range(1, post_steps + 1):
            src = f - d
            if src < 0:
                break
            drop = post_db_per_step * d
            for k in range(bins):
                cand = theta[src, k] - drop
                if cand > out[f, k]:
                    out[f, k] = cand
        for d in range(1, pre_steps + 1):
            src = f + d
            if src >= frames:
                break
            drop = pre_db_per_step * d
            for k in range(bins):
                cand = theta[src, k] - drop
                if cand > out[f, k]:
                    out[f, k] = cand
    return out


# ---------------------------------------------------------------------------
# Pure-numpy fallbacks (vectorized, same math)
# ---------------------------------------------------------------------------


def _global_thresholds_numpy(psd, bark, ath_db, maxdk, band_of_bin, band_pos, n_bands):
    frames, n_bins = psd.shape
    theta = np.empty_like(psd)
    for f in range(frames):
        theta[f] = _frame_threshold_numpy(
            psd[f], bark, ath_db, maxdk, band_of_bin, band_pos, n_bands
        )
    return theta


def _frame_threshold_numpy(p, bark, ath_db, maxdk, band_of_bin, band_pos, n_bands):
    n_bins = p.shape[0]
    k = np.arange(2, n_bins - 1)
    peak = (p[k] > p[k - 1]) & (p[k] > p[k + 1]) & (maxdk[k] > 0)
    tonal = peak.copy()
    for d in range(2, int(maxdk.max()) + 1):
        active = maxdk[k] >= d
        lo = np.maximum(k - d, 0)
        hi = np.minimum(k + d, n_bins - 1)
        ok = np.ones_like(tonal)
        in_lo = k - d >= 0
        ok &= ~in_lo | (p[k] - p[lo] >= 7.0)
        in_hi = k + d < n_bins
        ok &= ~in_hi | (p[k] - p[hi] >= 7.0)
        tonal &= ok | ~active
    tonal_bins = k[tonal]

    claimed = np.zeros(n_bins, dtype=bool)
    for tb in tonal_bins:
        claimed[max(tb - maxdk[tb], 0) : tb + maxdk[tb] + 1] = True

    linear = 10.0 ** (p / 10.0)
    tonal_levels = 10.0 * np.log10(
        linear[tonal_bins - 1] + linear[tonal_bins] + linear[tonal_bins + 1]
    )

    band_power = np.zeros(n_bands)
    noise_sel = (band_of_bin >= 0) & ~claimed
    noise_sel[0] = False
    np.add.at(band_power, band_of_bin[noise_sel], linear[noise_sel])
    noise_bands = np.nonzero(band_power > 0.0)[0]

    masker_bins = np.concatenate([tonal_bins, band_pos[noise_bands]])
    with np.errstate(divide="ignore"):
        masker_levels = np.concatenate(
            [tonal_levels, 10.0 * np.log10(band_power[noise_bands])]
        )
    masker_is_tonal = np.concatenate(
        [np.ones(len(tonal_bins), dtype=bool), np.zeros(len(noise_bands), dtype=bool)]
    )

    keep = masker_levels >= ath_db[masker_bins]
    n_m = len(masker_bins)
    for a in range(n_m):
        if not keep[a]:
            continue
        for b in range(a + 1, n_m):
            if not keep[b]:
                continue
            if abs(bark[masker_bins[a]] - bark[masker_bins[b]]) < 0.5:
                if masker_levels[a] >= masker_levels[b]:
                    keep[b] = False
                else:
                    keep[a] = False
                    break

    acc = np.zeros(n_bins)
    for m in range(n_m):
        if not keep[m]:
            continue
        zj = bark[masker_bins[m]]
        level = masker_levels[m]
        dz = bark - zj
        within = (dz >= _SF_LOW) & (dz < _SF_HIGH)
        sf = np.where(
            dz < -1.0,
            17.0 * dz - 0.4 * level + 11.0,
            np.where(
                dz < 0.0,
                (0.4 * level + 6.0) * dz,
                np.where(dz < 1.0, -17.0 * dz, (0.15 * level - 17.0) * dz - 0.15 * level),
            ),
        )
        if masker_is_tonal[m]:
            base = level - 0.275 * zj - 6.025
        else:
            base = level - 0.175 * zj - 2.025
        acc[within] += 10.0 ** ((base + sf[within]) / 10.0)

    with np.errstate(divide="ignore"):
        spread_db = np.where(acc > 0.0, 10.0 * np.log10(np.maximum(acc, 1e-300)), -np.inf)
    return np.maximum(spread_db, ath_db)


def _temporal_max_numpy(theta, post_steps, post_db_per_step, pre_steps, pre_db_per_step):
    out = theta.copy()
    frames = theta.shape[0]
    for d in range(1, post_steps + 1):
        if d >= frames:
            break
        np.maximum(out[d:], theta[:-d] - post_db_per_step * d, out=out[d:])
    for d in range(1, pre_steps + 1):
        if d >= frames:
            break
        np.maximum(out[:-d], theta[d:] - pre_db_per_step * d, out=out[:-d])
    return out


# ---------------------------------------------------------------------------
# Path selection
# ---------------------------------------------------------------------------

_USE_NUMBA = False
if not os.environ.get("MASKADV_NO_NUMBA"):
    try:
        from numba import njit

        _spreading_db = njit(cache=True)(_spreading_db)
        _frame_threshold_impl = njit(cache=True)(_frame_threshold_impl)
        global_thresholds = njit(cache=True)(_global_thresholds_loop)
        temporal_max = njit(cache=True)(_temporal_max_loop)
        _USE_NUMBA = True
    except ImportError:
        pass

if not _USE_NUMBA:
    global_thresholds = _global_thresholds_numpy
    temporal_max = _temporal_max_numpy
