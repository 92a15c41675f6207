"""Distance measures and statistics for modulation signals, plus frame-rate
audio features used as ground-truth stand-ins for real recordings."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .losses import hann_periodic
from .modsig import ModSignal, reflect_pad_indices

FLATNESS_THRESHOLD = 1e-3  # |first difference| below this counts as flat


@dataclass
class SignalStats:
    total_variation: float
    turning_points: int
    spectral_entropy: float


@dataclass
class DistanceQuad:
    l1: float
    grad_l1: float
    pcc: float
    frechet: float


def _values(sig) -> np.ndarray:
    if isinstance(sig, ModSignal):
        return sig.values
    return np.asarray(sig, dtype=np.float64)


def _rate(sig, default: float = 500.0) -> float:
    return sig.f_ms if isinstance(sig, ModSignal) else default


def l1_dist(a, b) -> float:
    """Mean absolute difference."""
    va, vb = _values(a), _values(b)
    if va.shape != vb.shape:
        raise ValueError(f"length mismatch: {va.shape} vs {vb.shape}")
    return float(np.mean(np.abs(va - vb)))


def central_difference(values: np.ndarray) -> np.ndarray:
    """First-order central difference, one-sided at the edges."""
    if len(values) < 3:
        raise ValueError("need at least 3 samples")
    d = np.empty_like(values)
    d[1:-1] = (values[2:] - values[:-2]) / 2.0
    d[0] = values[1] - values[0]
    d[-1] = values[-1] - values[-2]
    return d


def grad_l1_dist(a, b) -> float:
    """Mean absolute central-difference gap, scaled by the control rate.

    The rate factor makes the value a per-second slope difference,
    independent of how densely the signals are sampled.
    """
    va, vb = _values(a), _values(b)
    if va.shape != vb.shape:
        raise ValueError(f"length mismatch: {va.shape} vs {vb.shape}")
    rate = _rate(a)
    if isinstance(a, ModSignal) and isinstance(b, ModSignal) and a.f_ms != b.f_ms:
        raise ValueError("signals disagree on control rate")
    return float(np.mean(np.abs(central_difference(va) - central_difference(vb))) * rate)


def pcc(a, b) -> float:
    """Pearson correlation; NaN when either signal has zero variance."""
    va, vb = _values(a), _values(b)
    if va.shape != vb.shape:
        raise ValueError(f"length mismatch: {va.shape} vs {vb.shape}")
    da = va - va.mean()
    db = vb - vb.mean()
    na = np.linalg.norm(da)
    nb = np.linalg.norm(db)
    if na == 0.0 or nb == 0.0:
        return float("nan")
    return float(np.clip(np.dot(da, db) / (na * nb), -1.0, 1.0))


@njit(cache=True)
def _frechet_dp(px, py, qx, qy):
    n = px.shape[0]
    m = qx.shape[0]
    ca = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            d = math.hypot(px[i] - qx[j], py[i] - qy[j])
            if i == 0 and j == 0:
                ca[i, j] = d
            elif i == 0:
                ca[i, j] = max(ca[0, j - 1], d)
            elif j == 0:
                ca[i, j] = max(ca[i - 1, 0], d)
            else:
                best = ca[i - 1, j]
                if ca[i - 1, j - 1] < best:
                    best = ca[i - 1, j - 1]
                if ca[i, j - 1] < best:
                    best = ca[i, j - 1]
                ca[i, j] = max(best, d)
    return ca[n - 1, m - 1]


def _polyline(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = len(values)
    t = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
    return t, values


def frechet_dist(a, b) -> float:
    """Discrete Frechet distance between the signals as planar polylines.

    Each signal is embedded as points (i/(N-1), value[i]) so the metric is
    independent of the sampling rate.
    """
    va, vb = _values(a), _values(b)
    if len(va) == 0 or len(vb) == 0:
        raise ValueError("empty input")
    px, py = _polyline(va)
    qx, qy = _polyline(vb)
    return float(_frechet_dp(px, py, qx, qy))


def total_variation(s) -> float:
    """Sum of absolute first differences per second of signal."""
    v = _values(s)
    if len(v) < 2:
        raise ValueError("need at least 2 samples")
    duration = (len(v) - 1) / _rate(s)
    return float(np.sum(np.abs(np.diff(v))) / duration)


def turning_points(s) -> int:
    """Strict sign changes of the first difference, zero runs collapsed."""
    v = _values(s)
    if len(v) < 3:
        raise ValueError("need at least 3 samples")
    d = np.diff(v)
    signs = np.sign(d[d != 0.0])
    if len(signs) < 2:
        return 0
    return int(np.sum(signs[1:] != signs[:-1]))


def spectral_entropy(s) -> float:
    """Shannon entropy of the normalized AC power spectrum, in [0, 1].

    Mean is removed and the DC bin excluded, so constants score 0; the
    entropy is divided by log of the bin count.
    """
    v = _values(s)
    if len(v) < 2:
        raise ValueError("need at least 2 samples")
    centered = v - v.mean()
    if np.max(np.abs(centered)) == 0.0:
        return 0.0
    power = np.abs(np.fft.rfft(centered * hann_periodic(len(centered)))) ** 2
    power = power[1:]
    total = power.sum()
    if total <= 0.0 or len(power) < 2:
        return 0.0
    p = power / total
    nz = p[p > 0.0]
    return float(-np.sum(nz * np.log(nz)) / np.log(len(power)))


def signal_stats(s) -> SignalStats:
    return SignalStats(total_variation(s), turning_points(s), spectral_entropy(s))


def distance_quad(a, b) -> DistanceQuad:
    return DistanceQuad(l1_dist(a, b), grad_l1_dist(a, b), pcc(a, b), frechet_dist(a, b))


def _centered_frames(x: np.ndarray, hop: int, win: int) -> np.ndarray:
    """Frames of length win centered at multiples of hop; 1 + n/hop frames."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) % hop != 0:
        raise ValueError(f"signal length {len(x)} not a multiple of hop {hop}")
    n_frames = len(x) // hop + 1
    pad = win // 2
    padded = x[reflect_pad_indices(len(x), pad)]
    starts = np.arange(n_frames) * hop
    idx = starts[:, None] + np.arange(win)[None, :]
    return padded[idx]


def rms_frames(x: np.ndarray, f_ms: float = 500.0, hop: int = 96) -> ModSignal:
    """Per-frame RMS over centered windows, rescaled to [0,1] by the clip max."""
    frames = _centered_frames(x, hop, 2 * hop)
    rms = np.sqrt(np.mean(frames**2, axis=1))
    peak = rms.max()
    if peak > 0.0:
        rms = rms / peak
    return ModSignal(rms, f_ms)


def spectral_flatness_frames(
    x: np.ndarray, f_ms: float = 500.0, hop: int = 96, win: int = 1024, floor: float = 1e-12
) -> ModSignal:
    """Per-frame spectral flatness: geometric over arithmetic mean power.

    The power spectrum of each centered window is a Welch estimate (256-point
    Hann sub-frames, half overlap), which keeps per-frame estimates of truly
    flat spectra near 1 instead of the raw-periodogram bias. Silence scores 1
    by the floor convention.
    """
    frames = _centered_frames(x, hop, win)
    sub = 256
    sub_hop = 128
    window = hann_periodic(sub)
    n_sub = (win - sub) // sub_hop + 1
    psd = np.zeros((frames.shape[0], sub // 2 + 1))
    for s in range(n_sub):
        seg = frames[:, s * sub_hop : s * sub_hop + sub] * window
        psd += np.abs(np.fft.rfft(seg, axis=1)) ** 2
    psd = np.maximum(psd / n_sub, floor)
    flatness = np.exp(np.mean(np.log(psd), axis=1)) / np.mean(psd, axis=1)
    return ModSignal(np.clip(flatness, 0.0, 1.0), f_ms)


def vital_filter_predicate(s, max_segments: int = 24) -> bool:
    """Keep/drop rule for real-world curves; True means keep.

    Drops curves that span less than half the modulation range, are flat
    over more than half their length, or whose turning-point count implies
    more than max_segments segments.
    """
    v = _values(s)
    if v.max() - v.min() < 0.5:
        return False
    d = np.abs(np.diff(v))
    if np.mean(d < FLATNESS_THRESHOLD) > 0.5:
        return False
    if len(v) >= 3 and turning_points(s) + 1 > max_segments:
        return False
    return True
