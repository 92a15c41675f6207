"""Multi-resolution STFT loss and MFCC distance, with handwritten adjoints."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.fft import dct

from .modsig import reflect_pad_indices

# the standard triplet of (fft_size, hop, window_length) resolutions
DEFAULT_RESOLUTIONS = ((1024, 120, 600), (2048, 240, 1200), (512, 50, 240))


@dataclass
class MssSpec:
    resolutions: tuple = DEFAULT_RESOLUTIONS
    eps_mag: float = 1e-7

    def __post_init__(self):
        if len(self.resolutions) < 1:
            raise ValueError("need at least one resolution")
        for fft_size, hop, win in self.resolutions:
            if not (hop <= win <= fft_size):
                raise ValueError(f"resolution ({fft_size}, {hop}, {win}) violates hop <= win <= fft")


@dataclass
class MfccSpec:
    n_mels: int = 40
    n_coeffs: int = 20
    fft_size: int = 2048
    hop: int = 512
    win: int = 2048
    floor: float = 1e-10

    def __post_init__(self):
        if self.n_coeffs > self.n_mels:
            raise ValueError("cannot keep more coefficients than mel bands")


def hann_periodic(win: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(win) / win)


_INDEX_CACHE: dict[tuple, np.ndarray] = {}


def _frame_indices(n_padded: int, hop: int, win: int) -> np.ndarray:
    key = (n_padded, hop, win)
    idx = _INDEX_CACHE.get(key)
    if idx is None:
        starts = np.arange(0, n_padded - win + 1, hop)
        idx = starts[:, None] + np.arange(win)[None, :]
        _INDEX_CACHE[key] = idx
    return idx


def _reflect_indices(n: int, pad: int) -> np.ndarray:
    key = (n, pad, "reflect")
    idx = _INDEX_CACHE.get(key)
    if idx is None:
        idx = reflect_pad_indices(n, pad)
        _INDEX_CACHE[key] = idx
    return idx


def stft_mag(x: np.ndarray, fft_size: int, hop: int, win: int):
    """Magnitude STFT with centered, reflect-padded, Hann-windowed frames.

    Returns (mags, aux); mags has shape (n_frames, fft_size//2 + 1).
    """
    x = np.asarray(x, dtype=np.float64)
    if not (0 < hop <= win <= fft_size):
        raise ValueError("need 0 < hop <= win <= fft_size")
    pad = fft_size // 2
    if len(x) < win or len(x) <= pad:
        raise ValueError(f"signal of {len(x)} samples too short for win {win}, pad {pad}")
    padded = x[_reflect_indices(len(x), pad)]
    idx = _frame_indices(len(padded), hop, win)
    window = hann_periodic(win)
    frames = padded[idx] * window
    spec = np.fft.rfft(frames, n=fft_size, axis=1)
    mags = np.abs(spec)
    aux = (spec, mags, idx, window, len(x), len(padded), pad, fft_size, win)
    return mags, aux


@njit(cache=True)
def _mag_grad_kernel(g_mag, spec, mags, interior_half, has_nyquist):
    rows, cols = spec.shape
    out = np.empty((rows, cols), dtype=np.complex128)
    for r in range(rows):
        for c in range(cols):
            m = mags[r, c]
            if m == 0.0:
                out[r, c] = 0.0
            else:
                out[r, c] = g_mag[r, c] * spec[r, c] / m
            if interior_half and 0 < c and (c < cols - 1 or not has_nyquist):
                out[r, c] *= 0.5
    return out


def stft_mag_vjp(aux, upstream: np.ndarray) -> np.ndarray:
    """Adjoint of stft_mag back to the input samples."""
    spec, mags, idx, window, n, n_padded, pad, fft_size, win = aux
    # adjoint of rfft is Re[sum_k G_k e^{+2pi i k m / N}]; with interior bins
    # halved this is exactly fft_size * irfft (bins 0 and N/2 carry real
    # cotangents for real input, so no imaginary correction is needed)
    g_spec = _mag_grad_kernel(
        np.ascontiguousarray(upstream, dtype=np.float64), spec, mags, True, fft_size % 2 == 0
    )
    g_frames = np.fft.irfft(g_spec, fft_size, axis=1) * fft_size
    g_frames = g_frames[:, :win] * window
    g_padded = np.bincount(idx.ravel(), weights=g_frames.ravel(), minlength=n_padded)
    return np.bincount(_reflect_indices(n, pad), weights=g_padded, minlength=n)


@njit(cache=True)
def _spectral_terms_kernel(mx, my, ly, eps):
    rows, cols = mx.shape
    sq_sum = 0.0
    abs_sum = 0.0
    lx = np.empty((rows, cols))
    for r in range(rows):
        for c in range(cols):
            d = my[r, c] - mx[r, c]
            sq_sum += d * d
            v = mx[r, c]
            l = math.log(v) if v > eps else math.log(eps)
            lx[r, c] = l
            abs_sum += abs(l - ly[r, c])
    return sq_sum, abs_sum, lx


@njit(cache=True)
def _spectral_terms_grad_kernel(mx, my, lx, ly, eps, sc_scale, inv_count, upstream):
    rows, cols = mx.shape
    g = np.empty((rows, cols))
    for r in range(rows):
        for c in range(cols):
            v = sc_scale * (mx[r, c] - my[r, c])
            dl = lx[r, c] - ly[r, c]
            if dl != 0.0 and mx[r, c] > eps:
                sgn = 1.0 if dl > 0.0 else -1.0
                v += sgn * inv_count / mx[r, c]
            g[r, c] = upstream * v
    return g


def spectral_terms(mx: np.ndarray, my: np.ndarray, eps: float, my_log=None, my_norm=None):
    """Spectral convergence plus log-magnitude L1 for one resolution.

    my is the target magnitude; the convergence term is normalized by its
    Frobenius norm (floored by eps so silence stays finite). my_log and
    my_norm may be precomputed when the same target is matched repeatedly.
    Returns (loss, aux).
    """
    mx = np.ascontiguousarray(mx, dtype=np.float64)
    my = np.ascontiguousarray(my, dtype=np.float64)
    ly = np.log(np.maximum(my, eps)) if my_log is None else my_log
    sq_sum, abs_sum, lx = _spectral_terms_kernel(mx, my, ly, eps)
    nrm = math.sqrt(sq_sum)
    den = max(float(np.linalg.norm(my)) if my_norm is None else my_norm, eps)
    loss = nrm / den + abs_sum / mx.size
    aux = (mx, my, nrm, den, lx, ly, eps)
    return loss, aux


def spectral_terms_vjp(aux, upstream: float) -> np.ndarray:
    mx, my, nrm, den, lx, ly, eps = aux
    sc_scale = 1.0 / (nrm * den) if nrm > 0.0 else 0.0
    return _spectral_terms_grad_kernel(mx, my, lx, ly, eps, sc_scale, 1.0 / mx.size, float(upstream))


def mss_loss(x: np.ndarray, y: np.ndarray, spec: MssSpec | None = None) -> float:
    """Multi-resolution STFT loss: mean over resolutions of sc + log-mag L1."""
    if spec is None:
        spec = MssSpec()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    total = 0.0
    for fft_size, hop, win in spec.resolutions:
        mx, _ = stft_mag(x, fft_size, hop, win)
        my, _ = stft_mag(y, fft_size, hop, win)
        term, _ = spectral_terms(mx, my, spec.eps_mag)
        total += term
    return total / len(spec.resolutions)


def mel_filterbank(n_mels: int, fft_size: int, f_s: float) -> np.ndarray:
    """Triangular mel filterbank spanning 0 to f_s/2, shape (n_mels, bins)."""

    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)

    bins = fft_size // 2 + 1
    mel_pts = np.linspace(0.0, hz_to_mel(f_s / 2.0), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    freqs = np.arange(bins) * f_s / fft_size
    fb = np.zeros((n_mels, bins))
    for i in range(n_mels):
        lo, ctr, hi = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        up = (freqs - lo) / max(ctr - lo, 1e-12)
        down = (hi - freqs) / max(hi - ctr, 1e-12)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
    return fb


def mfcc(x: np.ndarray, spec: MfccSpec | None = None, f_s: float = 48000.0) -> np.ndarray:
    """MFCC frames: floored log-mel energies through an orthonormal DCT-II."""
    if spec is None:
        spec = MfccSpec()
    mags, _ = stft_mag(x, spec.fft_size, spec.hop, spec.win)
    power = mags**2
    fb = mel_filterbank(spec.n_mels, spec.fft_size, f_s)
    mel_e = power @ fb.T
    log_mel = np.log(np.maximum(mel_e, spec.floor))
    coeffs = dct(log_mel, type=2, axis=1, norm="ortho")
    return coeffs[:, : spec.n_coeffs]


def mfcc_l1(x: np.ndarray, y: np.ndarray, spec: MfccSpec | None = None, f_s: float = 48000.0) -> float:
    """Mean absolute MFCC difference over coefficients and frames."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    return float(np.mean(np.abs(mfcc(x, spec, f_s) - mfcc(y, spec, f_s))))
