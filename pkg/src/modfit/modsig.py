"""Modulation-signal parameterizations and control-rate rendering.

Three ways to produce a control-rate signal in [0, 1]:

* Frame -- one free value per control frame, squashed by a logistic.
* LPF   -- framewise values smoothed by a zero-phase Blackman windowed-sinc.
* Spline -- a piecewise Bezier curve rendered as y(x) onto the frame grid,
  with an optional blend towards its degree-1 control polygon.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import curves
from .curves import CurveValidationError, PiecewiseBezier

DEFAULT_F_MS = 500.0  # control rate in Hz

# dense samples per output frame when rendering splines; keeps the
# x-resampling error far below metric tolerances for <= 24 segments
SPLINE_OVERSAMPLE = 8


@dataclass
class ModSignal:
    """Control-rate sequence of values in [0, 1]."""

    values: np.ndarray
    f_ms: float = DEFAULT_F_MS

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.f_ms <= 0:
            raise ValueError("control rate must be positive")
        if self.values.size and (self.values.min() < -1e-9 or self.values.max() > 1 + 1e-9):
            raise ValueError("mod signal values must lie in [0, 1]")
        np.clip(self.values, 0.0, 1.0, out=self.values)

    @property
    def n_frames(self) -> int:
        return len(self.values)

    @property
    def duration(self) -> float:
        """Signal span in seconds, (N-1) frame intervals."""
        return (self.n_frames - 1) / self.f_ms


@dataclass
class LpfSpec:
    """Zero-phase FIR smoothing filter for the LPF parameterization."""

    cutoff_hz: float = 8.0
    taps: np.ndarray | None = None  # designed on demand when None

    def __post_init__(self):
        if not self.cutoff_hz < 20.0:
            raise ValueError("LPF cutoff must stay below 20 Hz")
        if self.taps is not None:
            self.taps = np.asarray(self.taps, dtype=np.float64)
            if len(self.taps) % 2 == 0:
                raise ValueError("tap count must be odd for a zero-phase filter")

    def taps_for_rate(self, f_ms: float) -> np.ndarray:
        if self.taps is None:
            self.taps = design_windowed_sinc(self.cutoff_hz, f_ms)
        return self.taps


@dataclass
class FrameParams:
    """Unconstrained per-frame values, one per control frame."""

    raw: np.ndarray

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64)


def logistic(x: np.ndarray) -> np.ndarray:
    """Numerically stable elementwise logistic squash onto (0, 1)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logistic_grad(value: np.ndarray) -> np.ndarray:
    """Derivative of the logistic expressed through its output value."""
    return value * (1.0 - value)


def render_frame(params: FrameParams, f_ms: float = DEFAULT_F_MS) -> ModSignal:
    """Framewise parameterization: logistic squash of the raw values."""
    if params.raw.size == 0:
        raise ValueError("empty frame parameters")
    return ModSignal(logistic(params.raw), f_ms)


def design_windowed_sinc(f_c: float, f_ms: float) -> np.ndarray:
    """Blackman windowed-sinc low-pass taps, normalized to unity DC gain.

    Tap count is ceil(f_ms / f_c), rounded up to odd so the filter can run
    zero-phase. The 8 Hz / 500 Hz configuration yields 63 taps.
    """
    if not 0.0 < f_c < f_ms / 2.0:
        raise ValueError(f"cutoff {f_c} Hz outside (0, {f_ms / 2}) at control rate {f_ms}")
    n = int(np.ceil(f_ms / f_c))
    if n % 2 == 0:
        n += 1
    m = np.arange(n) - (n - 1) / 2.0
    fc_norm = f_c / f_ms
    h = 2.0 * fc_norm * np.sinc(2.0 * fc_norm * m)
    h *= np.blackman(n)
    return h / h.sum()


def reflect_pad_indices(n: int, pad: int) -> np.ndarray:
    """Index map of length n + 2*pad implementing symmetric reflection."""
    return np.pad(np.arange(n), pad, mode="reflect")


def smooth_zero_phase(values: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Zero-phase FIR convolution with reflect padding; output length = input."""
    values = np.asarray(values, dtype=np.float64)
    pad = (len(taps) - 1) // 2
    if len(values) < len(taps):
        raise ValueError(f"signal of {len(values)} frames shorter than {len(taps)}-tap filter")
    padded = values[reflect_pad_indices(len(values), pad)]
    return np.correlate(padded, taps, mode="valid")


def smooth_zero_phase_adjoint(upstream: np.ndarray, taps: np.ndarray, n: int) -> np.ndarray:
    """Adjoint of smooth_zero_phase: spread through the taps, fold the padding."""
    pad = (len(taps) - 1) // 2
    g_padded = np.convolve(upstream, taps, mode="full")
    return np.bincount(reflect_pad_indices(n, pad), weights=g_padded, minlength=n)


def render_lpf(params: FrameParams, spec: LpfSpec, f_ms: float = DEFAULT_F_MS) -> ModSignal:
    """LPF parameterization: logistic squash, smooth, clamp to [0, 1]."""
    if params.raw.size == 0:
        raise ValueError("empty frame parameters")
    taps = spec.taps_for_rate(f_ms)
    v = smooth_zero_phase(logistic(params.raw), taps)
    return ModSignal(np.clip(v, 0.0, 1.0), f_ms)


def _resample_rows(x_grid: np.ndarray, taus: np.ndarray):
    """Linear-interpolation indices and weights of taus on a sorted grid."""
    j = np.clip(np.searchsorted(x_grid, taus, side="right"), 1, len(x_grid) - 1)
    x0 = x_grid[j - 1]
    x1 = x_grid[j]
    dx = x1 - x0
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(dx > 1e-15, (taus - x0) / np.where(dx > 1e-15, dx, 1.0), np.where(taus >= x1, 1.0, 0.0))
    return j, np.clip(w, 0.0, 1.0)


def spline_render_matrices(curve: PiecewiseBezier, n_frames: int) -> tuple[np.ndarray, np.ndarray]:
    """(M_poly, M_full): linear maps from flat y control values to frames.

    M_full densely samples the curve at SPLINE_OVERSAMPLE * n_frames uniform
    t and linearly resamples y onto the uniform frame-time grid in x.
    M_poly renders the control polygon as a degree-1 piecewise curve. Both
    depend only on the (fixed) x control values, so rendering stays linear
    in y and the blend is differentiable for free.
    """
    errs = curves.validate(curve)
    if errs:
        raise CurveValidationError("; ".join(errs))
    if n_frames < 2:
        raise ValueError("need at least 2 output frames")
    n = curve.degree
    n_pts = curve.num_points
    K = curve.num_segments
    dense = SPLINE_OVERSAMPLE * n_frames
    t_dense = np.linspace(0.0, 1.0, dense)
    k_idx, u = curves.segment_index(t_dense, K)

    W = np.zeros((dense, n_pts))
    for seg in range(K):
        m = k_idx == seg
        if not np.any(m):
            continue
        W[np.ix_(m, np.arange(seg * n, seg * n + n + 1))] = curves.bernstein_matrix(n, u[m])

    x_dense = W @ curve.x
    taus = np.linspace(0.0, 1.0, n_frames)
    j, w = _resample_rows(x_dense, taus)
    M_full = (1.0 - w)[:, None] * W[j - 1] + w[:, None] * W[j]

    jp, wp = _resample_rows(curve.x, taus)
    M_poly = np.zeros((n_frames, n_pts))
    rows = np.arange(n_frames)
    np.add.at(M_poly, (rows, jp - 1), 1.0 - wp)
    np.add.at(M_poly, (rows, jp), wp)
    return M_poly, M_full


def render_spline(
    curve: PiecewiseBezier, n_frames: int, blend: float = 1.0, f_ms: float = DEFAULT_F_MS
) -> ModSignal:
    """Render a curve to the frame grid, blending control polygon and full degree.

    blend = 0 renders the degree-1 control polygon, blend = 1 the pure Bezier
    curve; intermediate values interpolate the two renderings in output space.
    """
    M_poly, M_full = spline_render_matrices(curve, n_frames)
    vals = (1.0 - blend) * (M_poly @ curve.y) + blend * (M_full @ curve.y)
    return ModSignal(np.clip(vals, 0.0, 1.0), f_ms)


def blend_schedule(step: int, total: int) -> float:
    """Degree blend over optimization: 0 at start, 1 from two thirds onward."""
    if total <= 0:
        return 1.0
    if not 0 <= step <= total:
        raise ValueError("step outside [0, total]")
    return min(1.0, step / (2.0 * total / 3.0))


def audio_hop(f_ms: float, f_s: float) -> int:
    """Samples per control frame; must divide the sample rate exactly."""
    hop = f_s / f_ms
    if abs(hop - round(hop)) > 1e-9:
        raise ValueError(f"sample rate {f_s} is not an integer multiple of control rate {f_ms}")
    return int(round(hop))


_UPSAMPLE_CACHE: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}


def _upsample_grid(hop: int, n_samples: int) -> tuple[np.ndarray, np.ndarray]:
    key = (hop, n_samples)
    cached = _UPSAMPLE_CACHE.get(key)
    if cached is None:
        idx = np.arange(n_samples)
        cached = (idx // hop, (idx % hop) / hop)
        _UPSAMPLE_CACHE[key] = cached
    return cached


def upsample_values(values: np.ndarray, hop: int, n_samples: int) -> np.ndarray:
    """Linear interpolation of frame values onto the audio grid."""
    n_frames = len(values)
    if n_samples != (n_frames - 1) * hop:
        raise ValueError(f"{n_frames} frames with hop {hop} cover {(n_frames - 1) * hop} samples, not {n_samples}")
    j, frac = _upsample_grid(hop, n_samples)
    return values[j] * (1.0 - frac) + values[j + 1] * frac


def upsample_adjoint(upstream: np.ndarray, hop: int, n_frames: int) -> np.ndarray:
    """Adjoint of upsample_values: accumulate sample cotangents per frame."""
    j, frac = _upsample_grid(hop, len(upstream))
    g = np.bincount(j, weights=upstream * (1.0 - frac), minlength=n_frames)
    g += np.bincount(j + 1, weights=upstream * frac, minlength=n_frames)
    return g


def upsample_to_audio(sig: ModSignal, n_samples: int, f_s: float) -> np.ndarray:
    """Control-to-audio rate conversion by linear interpolation."""
    hop = audio_hop(sig.f_ms, f_s)
    return upsample_values(sig.values, hop, n_samples)


def save_csv(sig: ModSignal, path) -> None:
    """One value per line, control rate recorded in the leading comment."""
    with open(path, "w") as fh:
        fh.write(f"# f_ms={sig.f_ms!r}\n")
        fh.write("value\n")
        for v in sig.values:
            fh.write(f"{v!r}\n")


def load_csv(path) -> ModSignal:
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith("# f_ms="):
            raise ValueError(f"{path}: missing f_ms header")
        f_ms = float(header.split("=", 1)[1])
        fh.readline()  # column name
        values = np.array([float(line) for line in fh if line.strip()])
    return ModSignal(values, f_ms)


def to_json(sig: ModSignal) -> str:
    return json.dumps({"f_ms": sig.f_ms, "values": sig.values.tolist()})


def from_json(text: str) -> ModSignal:
    obj = json.loads(text)
    return ModSignal(np.asarray(obj["values"], dtype=np.float64), float(obj["f_ms"]))
