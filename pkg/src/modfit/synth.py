"""Differentiable subtractive synth: wavetable oscillator -> time-varying
resonant low-pass biquad -> amplitude envelope, chained in series.

All three stages take control from mod signals in [0, 1]: the first maps to
wavetable position, the second log-uniformly to filter cutoff, the third
multiplies the output. Every stage has a handwritten adjoint so the chain
can be driven by gradient descent (see diffkit).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from . import modsig
from .modsig import ModSignal, upsample_adjoint, upsample_values

FRAME_LEN = 1024  # samples per wavetable position
DEFAULT_SAMPLE_RATE = 48000.0
DEFAULT_HOP = 96
ANTIALIAS_FRACTION = 0.9  # cutoff as a fraction of Nyquist


@dataclass
class Wavetable:
    """Bank of P single-cycle frames, 1024 samples each."""

    data: np.ndarray
    learnable: bool = False

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[1] != FRAME_LEN:
            raise ValueError(f"wavetable must be (P, {FRAME_LEN}), got {self.data.shape}")
        if self.data.shape[0] < 1:
            raise ValueError("wavetable needs at least one position")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("wavetable contains non-finite samples")

    @property
    def positions(self) -> int:
        return self.data.shape[0]


@dataclass
class FilterRange:
    """Cutoff and resonance ranges of the low-pass filter module."""

    f_c_min: float = 100.0
    f_c_max: float = 8000.0
    q_min: float = math.sqrt(2.0) / 2.0
    q_max: float = 4.0
    q_mode: str = "constant"

    def __post_init__(self):
        if not 0.0 < self.f_c_min < self.f_c_max:
            raise ValueError("need 0 < f_c_min < f_c_max")
        if not 0.0 < self.q_min <= self.q_max:
            raise ValueError("need 0 < q_min <= q_max")
        if self.q_mode not in ("constant", "modulated"):
            raise ValueError(f"unknown q_mode {self.q_mode!r}")


@dataclass
class SynthPatch:
    """Everything needed to render audio from three mod signals."""

    wavetable: Wavetable
    filter: FilterRange = field(default_factory=FilterRange)
    f0: float = 220.0
    phi0: float = 0.0  # initial phase in turns, [0, 1)
    f_s: float = DEFAULT_SAMPLE_RATE
    hop: int = DEFAULT_HOP

    def __post_init__(self):
        if not 0.0 < self.f0 < self.f_s / 2.0:
            raise ValueError(f"f0 {self.f0} outside (0, {self.f_s / 2})")
        if self.filter.f_c_max >= self.f_s / 2.0:
            raise ValueError("filter range exceeds Nyquist")

    @property
    def f_ms(self) -> float:
        return self.f_s / self.hop


def antialias_bin_mask(f0: float, f_s: float, frame_len: int = FRAME_LEN) -> np.ndarray:
    """Boolean keep-mask over rfft bins of one wavetable frame.

    Bin h of a frame read at fundamental f0 lands at h*f0 Hz; bins above
    ANTIALIAS_FRACTION * f_s/2 are dropped.
    """
    harmonics = np.arange(frame_len // 2 + 1)
    return harmonics * f0 <= ANTIALIAS_FRACTION * f_s / 2.0


def antialias_wavetable(data: np.ndarray, f0: float, f_s: float) -> np.ndarray:
    """Remove frame harmonics that would alias when read at f0.

    Frames are single periods, so zeroing DFT bins is the exact periodic
    low-pass; the map is an orthogonal projection and therefore its own
    adjoint (energy never increases).
    """
    data = np.asarray(data, dtype=np.float64)
    spec = np.fft.rfft(data, axis=-1)
    spec[..., ~antialias_bin_mask(f0, f_s, data.shape[-1])] = 0.0
    return np.fft.irfft(spec, data.shape[-1], axis=-1)


def oscillator_phases(f0: float, phi0: float, n_samples: int, f_s: float) -> np.ndarray:
    """Accumulated phase in turns, wrapped into [0, 1)."""
    if not 0.0 < f0 < f_s / 2.0:
        raise ValueError(f"f0 {f0} outside (0, {f_s / 2})")
    return (phi0 + np.arange(n_samples) * (f0 / f_s)) % 1.0


def map_mod_to_position(m: np.ndarray, positions: int) -> np.ndarray:
    """Affine map of a [0,1] mod value onto wavetable position [0, P-1]."""
    return np.asarray(m, dtype=np.float64) * (positions - 1)


def map_mod_to_cutoff(m: np.ndarray, fr: FilterRange) -> np.ndarray:
    """Log-domain map of a [0,1] mod value onto cutoff [f_c_min, f_c_max]."""
    return fr.f_c_min * (fr.f_c_max / fr.f_c_min) ** np.asarray(m, dtype=np.float64)


def wavetable_read(table: np.ndarray, pos01: np.ndarray, phases: np.ndarray, table_grad: bool = True):
    """Bilinear table lookup at (position, phase) per sample.

    Returns (audio, aux). Position input is in [0, 1] and is clamped at the
    table edges (zero gradient outside); phase wraps around the frame.
    table_grad=False skips accumulating table cotangents in the adjoint.
    """
    P, L = table.shape
    col = phases * L
    c0 = np.floor(col).astype(np.int64) % L
    c1 = (c0 + 1) % L
    fc = col - np.floor(col)

    if P == 1:
        row = table[0]
        out = row[c0] * (1.0 - fc) + row[c1] * fc
        aux = (table.shape, None, None, c0, c1, fc, None, None, None, table_grad)
        return out, aux

    z_raw = pos01 * (P - 1)
    z = np.clip(z_raw, 0.0, P - 1.0)
    in_range = (z_raw >= 0.0) & (z_raw <= P - 1.0)
    r0 = np.minimum(np.floor(z), P - 2).astype(np.int64)
    r1 = r0 + 1
    fr = z - r0

    vA = table[r0, c0] * (1.0 - fc) + table[r0, c1] * fc
    vB = table[r1, c0] * (1.0 - fc) + table[r1, c1] * fc
    out = (1.0 - fr) * vA + fr * vB
    aux = (table.shape, r0, fr, c0, c1, fc, vA, vB, in_range, table_grad)
    return out, aux


def wavetable_read_vjp(aux, upstream: np.ndarray):
    """Gradients of the bilinear read w.r.t. (pos01, table)."""
    (shape, r0, fr, c0, c1, fc, vA, vB, in_range, table_grad) = aux
    P, L = shape

    def scatter(rows, cols, weights):
        return np.bincount(rows * L + cols, weights=weights, minlength=P * L)

    if P == 1:
        g_table = None
        if table_grad:
            flat = scatter(np.zeros_like(c0), c0, upstream * (1.0 - fc))
            flat += scatter(np.zeros_like(c1), c1, upstream * fc)
            g_table = flat.reshape(shape)
        return np.zeros_like(upstream), g_table
    g_pos = upstream * (vB - vA) * (P - 1) * in_range
    g_table = None
    if table_grad:
        flat = scatter(r0, c0, upstream * (1.0 - fr) * (1.0 - fc))
        flat += scatter(r0, c1, upstream * (1.0 - fr) * fc)
        flat += scatter(r0 + 1, c0, upstream * fr * (1.0 - fc))
        flat += scatter(r0 + 1, c1, upstream * fr * fc)
        g_table = flat.reshape(shape)
    return g_pos, g_table


def wavetable_osc(
    wt: Wavetable, pos: np.ndarray, f0: float, phi0: float, n_samples: int, f_s: float
) -> np.ndarray:
    """Wavetable oscillator with controllable position.

    pos is the audio-rate position control in [0, 1], one value per sample.
    """
    pos = np.asarray(pos, dtype=np.float64)
    if len(pos) != n_samples:
        raise ValueError(f"position control has {len(pos)} samples, expected {n_samples}")
    phases = oscillator_phases(f0, phi0, n_samples, f_s)
    out, _ = wavetable_read(wt.data, pos, phases)
    return out


def biquad_lp_coeffs(f_c, Q, f_s: float):
    """Cookbook resonant low-pass coefficients (b0, b1, b2, a1, a2), a0-normalized.

    Unity DC gain holds exactly by construction; poles are strictly inside
    the unit circle for any f_c < f_s/2 and Q > 0.
    """
    f_c = np.asarray(f_c, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if np.any(f_c <= 0.0) or np.any(f_c >= f_s / 2.0):
        raise ValueError("cutoff outside (0, Nyquist)")
    if np.any(Q <= 0.0):
        raise ValueError("Q must be positive")
    omega = 2.0 * np.pi * f_c / f_s
    c = np.cos(omega)
    s = np.sin(omega)
    alpha = s / (2.0 * Q)
    a0 = 1.0 + alpha
    n0 = (1.0 - c) / 2.0
    b0 = n0 / a0
    b1 = 2.0 * n0 / a0
    b2 = b0
    a1 = -2.0 * c / a0
    a2 = (1.0 - alpha) / a0
    return np.stack(np.broadcast_arrays(b0, b1, b2, a1, a2))


def lp_coeffs_fwd(f_c: np.ndarray, Q, f_s: float):
    """biquad_lp_coeffs plus the intermediates its adjoint needs."""
    coeffs = biquad_lp_coeffs(f_c, Q, f_s)
    omega = 2.0 * np.pi * np.asarray(f_c, dtype=np.float64) / f_s
    aux = (omega, np.asarray(Q, dtype=np.float64), f_s)
    return coeffs, aux


def lp_coeffs_vjp(aux, upstream: np.ndarray):
    """Gradients of the 5 coefficient rows w.r.t. (f_c, Q)."""
    omega, Q, f_s = aux
    c = np.cos(omega)
    s = np.sin(omega)
    alpha = s / (2.0 * Q)
    a0 = 1.0 + alpha
    n0 = (1.0 - c) / 2.0
    inv_a02 = 1.0 / (a0 * a0)

    # partials w.r.t. omega (alpha depends on omega through sin)
    dalpha_w = c / (2.0 * Q)
    db0_w = (0.5 * s * a0 - n0 * dalpha_w) * inv_a02
    db1_w = 2.0 * db0_w
    da1_w = (2.0 * s * a0 + 2.0 * c * dalpha_w) * inv_a02
    da2_w = -2.0 * dalpha_w * inv_a02

    # partials w.r.t. Q enter only through alpha
    dalpha_q = -s / (2.0 * Q * Q)
    db0_q = -n0 * dalpha_q * inv_a02
    db1_q = 2.0 * db0_q
    da1_q = 2.0 * c * dalpha_q * inv_a02
    da2_q = -2.0 * dalpha_q * inv_a02

    gb0, gb1, gb2, ga1, ga2 = upstream
    g_omega = (gb0 + gb2) * db0_w + gb1 * db1_w + ga1 * da1_w + ga2 * da2_w
    g_fc = g_omega * (2.0 * np.pi / f_s)
    g_q_per = (gb0 + gb2) * db0_q + gb1 * db1_q + ga1 * da1_q + ga2 * da2_q
    if np.size(Q) == 1:
        g_q = np.full(np.shape(Q), np.sum(g_q_per))
    else:
        g_q = g_q_per
    return g_fc, g_q


@njit(cache=True)
def _tv_biquad_fwd_kernel(x, b0, b1, b2, a1, a2):
    n = x.shape[0]
    y = np.empty(n)
    xm1 = 0.0
    xm2 = 0.0
    ym1 = 0.0
    ym2 = 0.0
    for i in range(n):
        yi = b0[i] * x[i] + b1[i] * xm1 + b2[i] * xm2 - a1[i] * ym1 - a2[i] * ym2
        y[i] = yi
        xm2 = xm1
        xm1 = x[i]
        ym2 = ym1
        ym1 = yi
    return y


@njit(cache=True)
def _tv_biquad_bwd_kernel(g, x, y, b0, b1, b2, a1, a2):
    n = x.shape[0]
    ybar = np.zeros(n)
    for i in range(n - 1, -1, -1):
        acc = g[i]
        if i + 1 < n:
            acc -= a1[i + 1] * ybar[i + 1]
        if i + 2 < n:
            acc -= a2[i + 2] * ybar[i + 2]
        ybar[i] = acc
    gx = np.zeros(n)
    gc = np.zeros((5, n))
    for i in range(n):
        gi = b0[i] * ybar[i]
        if i + 1 < n:
            gi += b1[i + 1] * ybar[i + 1]
        if i + 2 < n:
            gi += b2[i + 2] * ybar[i + 2]
        gx[i] = gi
        xm1 = x[i - 1] if i >= 1 else 0.0
        xm2 = x[i - 2] if i >= 2 else 0.0
        ym1 = y[i - 1] if i >= 1 else 0.0
        ym2 = y[i - 2] if i >= 2 else 0.0
        gc[0, i] = ybar[i] * x[i]
        gc[1, i] = ybar[i] * xm1
        gc[2, i] = ybar[i] * xm2
        gc[3, i] = -ybar[i] * ym1
        gc[4, i] = -ybar[i] * ym2
    return gx, gc


def _coeffs_per_sample(coeff_frames: np.ndarray, hop: int, n_samples: int) -> np.ndarray:
    rows = [upsample_values(coeff_frames[i], hop, n_samples) for i in range(5)]
    return np.stack(rows)


def tv_biquad(x: np.ndarray, coeff_frames: np.ndarray, hop: int):
    """Direct-form biquad with coefficients linearly interpolated per sample.

    coeff_frames is (5, F) of a0-normalized (b0, b1, b2, a1, a2) per control
    frame; a (5,) vector means constant coefficients. Zero initial state.
    Returns (audio, aux) for the adjoint pass.
    """
    x = np.asarray(x, dtype=np.float64)
    coeff_frames = np.asarray(coeff_frames, dtype=np.float64)
    n = len(x)
    if coeff_frames.ndim == 1:
        per = np.repeat(coeff_frames[:, None], n, axis=1)
        constant = True
    else:
        if coeff_frames.shape[0] != 5:
            raise ValueError("expected 5 coefficient rows")
        per = _coeffs_per_sample(coeff_frames, hop, n)
        constant = False
    y = _tv_biquad_fwd_kernel(x, per[0], per[1], per[2], per[3], per[4])
    aux = (x, y, per, hop, constant, coeff_frames.shape)
    return y, aux


def tv_biquad_vjp(aux, upstream: np.ndarray):
    """Gradients w.r.t. (x, coeff_frames) by running the recursion adjoint."""
    x, y, per, hop, constant, frame_shape = aux
    gx, gc = _tv_biquad_bwd_kernel(
        np.ascontiguousarray(upstream, dtype=np.float64), x, y, per[0], per[1], per[2], per[3], per[4]
    )
    if constant:
        return gx, gc.sum(axis=1)
    n_frames = frame_shape[1]
    g_frames = np.stack([upsample_adjoint(gc[i], hop, n_frames) for i in range(5)])
    return gx, g_frames


def apply_envelope(x: np.ndarray, env_audio: np.ndarray) -> np.ndarray:
    """Pointwise amplitude envelope."""
    x = np.asarray(x, dtype=np.float64)
    env_audio = np.asarray(env_audio, dtype=np.float64)
    if x.shape != env_audio.shape:
        raise ValueError(f"audio {x.shape} and envelope {env_audio.shape} differ")
    return x * env_audio


def mod_synth_render(patch: SynthPatch, mods: dict[str, ModSignal], Q: float) -> np.ndarray:
    """Render the full chain from three mod signals {add, sub, env}.

    add drives wavetable position, sub drives filter cutoff, env the
    output envelope. Deterministic for fixed inputs.
    """
    add, sub, env = mods["add"], mods["sub"], mods["env"]
    n_frames = add.n_frames
    for sig in (sub, env):
        if sig.n_frames != n_frames or sig.f_ms != add.f_ms:
            raise ValueError("mod signals disagree on frame grid")
    if abs(add.f_ms - patch.f_ms) > 1e-9:
        raise ValueError(f"mod rate {add.f_ms} does not match patch rate {patch.f_ms}")
    n_samples = (n_frames - 1) * patch.hop

    table = antialias_wavetable(patch.wavetable.data, patch.f0, patch.f_s)
    pos_audio = upsample_values(add.values, patch.hop, n_samples)
    phases = oscillator_phases(patch.f0, patch.phi0, n_samples, patch.f_s)
    raw, _ = wavetable_read(table, pos_audio, phases)

    f_c = map_mod_to_cutoff(sub.values, patch.filter)
    coeffs = biquad_lp_coeffs(f_c, Q, patch.f_s)
    filtered, _ = tv_biquad(raw, coeffs, patch.hop)

    env_audio = upsample_values(env.values, patch.hop, n_samples)
    return apply_envelope(filtered, env_audio)


def save_wavetable(wt: Wavetable, wav_path) -> None:
    """Mono WAV of P concatenated 1024-sample frames plus a JSON sidecar."""
    from scipy.io import wavfile

    wav_path = Path(wav_path)
    flat = np.clip(wt.data.reshape(-1), -1.0, 1.0).astype(np.float32)
    wavfile.write(wav_path, int(DEFAULT_SAMPLE_RATE), flat)
    sidecar = {"positions": wt.positions, "frame_len": FRAME_LEN}
    wav_path.with_suffix(".json").write_text(json.dumps(sidecar))


def load_wavetable(wav_path) -> Wavetable:
    from scipy.io import wavfile

    wav_path = Path(wav_path)
    _, flat = wavfile.read(wav_path)
    flat = np.asarray(flat, dtype=np.float64)
    sidecar_path = wav_path.with_suffix(".json")
    if sidecar_path.exists():
        meta = json.loads(sidecar_path.read_text())
        frame_len = int(meta.get("frame_len", FRAME_LEN))
    else:
        frame_len = FRAME_LEN
    if len(flat) % frame_len != 0:
        raise ValueError(f"{wav_path}: length {len(flat)} not a multiple of {frame_len}")
    return Wavetable(flat.reshape(-1, frame_len))


def default_wavetable(positions: int = 16, harmonics: int = 64) -> Wavetable:
    """Synthetic table morphing sine (position 0) to saw (position P-1).

    Harmonic amplitudes interpolate between a pure fundamental and the 1/h
    sawtooth series; each frame is peak-normalized to 0.9.
    """
    phase = 2.0 * np.pi * np.arange(FRAME_LEN) / FRAME_LEN
    h_idx = np.arange(1, harmonics + 1)
    sine_amps = np.zeros(harmonics)
    sine_amps[0] = 1.0
    saw_amps = 1.0 / h_idx
    frames = np.empty((positions, FRAME_LEN))
    for p in range(positions):
        mix = p / max(positions - 1, 1)
        amps = (1.0 - mix) * sine_amps + mix * saw_amps
        frame = np.sum(amps[:, None] * np.sin(h_idx[:, None] * phase[None, :]), axis=0)
        frames[p] = 0.9 * frame / np.max(np.abs(frame))
    return Wavetable(frames)
