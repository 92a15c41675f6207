"""Piecewise 2D Bezier curves used as modulation-signal parameterizations.

A curve is K segments of degree n. Control points are stored flat: segment k
owns points[k*n : k*n + n + 1], so junction points exist exactly once and
positional continuity holds by construction. The x coordinates live in [0, 1]
(normalized time), y carries the modulation value.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

# floor(K*t) snaps to the nearest integer when K*t sits within this distance,
# so decimal literals like t=0.6, K=5 land on the segment boundary they name.
_KNOT_SNAP = 1e-12


@dataclass
class PiecewiseBezier:
    """K-segment degree-n curve with shared junction points stored once."""

    degree: int
    x: np.ndarray  # shape (K*degree + 1,)
    y: np.ndarray  # same shape

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)

    @property
    def num_segments(self) -> int:
        return (len(self.x) - 1) // self.degree

    @property
    def num_points(self) -> int:
        return len(self.x)

    def segment_points(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """(x, y) control points of segment k, views into flat storage."""
        n = self.degree
        return self.x[k * n : k * n + n + 1], self.y[k * n : k * n + n + 1]

    def knots(self) -> np.ndarray:
        """Junction x coordinates, K+1 values from 0 to 1."""
        return self.x[:: self.degree]


@dataclass
class CurveGenConfig:
    """Sampling ranges for random 1D modulation curves."""

    degree_range: tuple[int, int] = (1, 3)
    segment_range: tuple[int, int] = (1, 8)
    min_segment_fraction: float = 0.5
    value_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if not (1 <= self.degree_range[0] <= self.degree_range[1] <= 3):
            raise ValueError("degree_range must lie within [1, 3]")
        if not (1 <= self.segment_range[0] <= self.segment_range[1] <= 8):
            raise ValueError("segment_range must lie within [1, 8]")
        if not 0.0 < self.min_segment_fraction <= 1.0:
            raise ValueError("min_segment_fraction must be in (0, 1]")


class CurveValidationError(ValueError):
    """Raised when an operation receives a curve that fails validate()."""


def segment_index(t, K: int):
    """Map global parameter t in [0,1] to (segment k, local parameter u).

    k = min(floor(K*t), K-1) and u = K*t - k, with the upper boundary
    clamped so t = 1 yields (K-1, 1).
    """
    if K < 1:
        raise ValueError("segment count must be >= 1")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise ValueError("t outside [0, 1]")
    r = K * t_arr
    k = np.minimum(np.floor(r + _KNOT_SNAP), K - 1).astype(np.int64)
    u = np.clip(r - k, 0.0, 1.0)
    if np.isscalar(t) or t_arr.ndim == 0:
        return int(k), float(u)
    return k, u


def bernstein_matrix(n: int, u) -> np.ndarray:
    """Bernstein basis values B_{n,i}(u), shape (len(u), n+1). Rows sum to 1."""
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    out = np.empty((len(u), n + 1))
    for i in range(n + 1):
        out[:, i] = math.comb(n, i) * (1.0 - u) ** (n - i) * u**i
    return out


def eval_bezier_segment(points: np.ndarray, u):
    """Evaluate one Bezier segment at local parameter(s) u.

    points has shape (n+1, 2). Returns (x, y) for scalar u, or an (N, 2)
    array for a batch.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 2 or points.shape[1] != 2:
        raise ValueError("need at least 2 control points of shape (n+1, 2)")
    n = points.shape[0] - 1
    w = bernstein_matrix(n, u)
    vals = w @ points
    if np.isscalar(u) or np.asarray(u).ndim == 0:
        return float(vals[0, 0]), float(vals[0, 1])
    return vals


def eval_piecewise(curve: PiecewiseBezier, t):
    """Evaluate the full piecewise curve at t in [0,1] via segment lookup."""
    errs = validate(curve)
    if errs:
        raise CurveValidationError("; ".join(errs))
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    k, u = segment_index(t_arr, curve.num_segments)
    out = np.empty((len(t_arr), 2))
    for seg in np.unique(k):
        m = k == seg
        sx, sy = curve.segment_points(int(seg))
        pts = np.stack([sx, sy], axis=1)
        out[m] = eval_bezier_segment(pts, u[m])
    if np.isscalar(t) or np.asarray(t).ndim == 0:
        return float(out[0, 0]), float(out[0, 1])
    return out


def validate(curve: PiecewiseBezier) -> list[str]:
    """Return a deterministic list of invariant violations, empty if valid."""
    problems: list[str] = []
    n = curve.degree
    if n < 1:
        return ["degree must be >= 1"]
    if (len(curve.x) - 1) % n != 0 or len(curve.x) < n + 1:
        return [f"point count {len(curve.x)} does not fit degree {n} segments"]
    if len(curve.x) != len(curve.y):
        return ["x and y control arrays differ in length"]
    if not (np.all(np.isfinite(curve.x)) and np.all(np.isfinite(curve.y))):
        problems.append("non-finite control coordinates")
        return problems
    if curve.x[0] != 0.0:
        problems.append("start knot != 0")
    if curve.x[-1] != 1.0:
        problems.append("end knot != 1")
    knots = curve.knots()
    for k in range(len(knots) - 1):
        if not knots[k] < knots[k + 1]:
            problems.append(f"knots not strictly increasing at segment {k}")
    for k in range(curve.num_segments):
        sx, _ = curve.segment_points(k)
        if np.any(np.diff(sx) < 0.0):
            problems.append(f"segment {k}: x control values decrease")
    return problems


def bezier_vjp(curve: PiecewiseBezier, t_batch: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Cotangents on the flat y control values for y outputs at t_batch.

    upstream[i] is dL/dy(t_i); the result accumulates Bernstein weights into
    the shared flat storage, so junction points receive contributions from
    both neighbouring segments.
    """
    t_batch = np.atleast_1d(np.asarray(t_batch, dtype=np.float64))
    upstream = np.atleast_1d(np.asarray(upstream, dtype=np.float64))
    if t_batch.shape != upstream.shape:
        raise ValueError("t_batch and upstream must have matching shapes")
    n = curve.degree
    k, u = segment_index(t_batch, curve.num_segments)
    grad = np.zeros_like(curve.y)
    for seg in np.unique(k):
        m = k == seg
        w = bernstein_matrix(n, u[m])  # (M, n+1)
        contrib = upstream[m] @ w  # (n+1,)
        grad[seg * n : seg * n + n + 1] += contrib
    return grad


def random_mod_curve(rng: np.random.Generator, cfg: CurveGenConfig | None = None) -> PiecewiseBezier:
    """Draw a random 1D modulation curve.

    Degree and segment count are uniform over their ranges. Interior knots
    are rejection-sampled until every gap is at least
    min_segment_fraction * (1/K); after 1000 failed draws we fall back to
    jittered uniform knots, which satisfy the gap bound by construction.
    Interior control x's are evenly spaced inside each segment, y values
    are uniform in value_range.
    """
    if cfg is None:
        cfg = CurveGenConfig()
    degree = int(rng.integers(cfg.degree_range[0], cfg.degree_range[1] + 1))
    K = int(rng.integers(cfg.segment_range[0], cfg.segment_range[1] + 1))
    min_gap = cfg.min_segment_fraction / K

    if K == 1:
        knots = np.array([0.0, 1.0])
    else:
        knots = None
        for _ in range(1000):
            interior = np.sort(rng.uniform(0.0, 1.0, size=K - 1))
            cand = np.concatenate([[0.0], interior, [1.0]])
            if np.all(np.diff(cand) >= min_gap):
                knots = cand
                break
        if knots is None:
            base = np.linspace(0.0, 1.0, K + 1)
            jitter_amp = 0.5 * (1.0 - cfg.min_segment_fraction) / K
            jitter = rng.uniform(-jitter_amp, jitter_amp, size=K - 1)
            knots = base.copy()
            knots[1:-1] += jitter

    # interior x evenly spaced within each segment keeps x(u) affine per
    # segment and strictly increasing overall
    x = np.empty(K * degree + 1)
    for k in range(K):
        seg = np.linspace(knots[k], knots[k + 1], degree + 1)
        x[k * degree : k * degree + degree + 1] = seg
    x[0], x[-1] = 0.0, 1.0

    lo, hi = cfg.value_range
    y = rng.uniform(lo, hi, size=K * degree + 1)
    curve = PiecewiseBezier(degree=degree, x=x, y=y)
    assert not validate(curve)
    return curve


def to_json(curve: PiecewiseBezier) -> str:
    """Serialize to JSON: degree, junction knots, per-segment point lists.

    Floats are emitted via repr, which round-trips float64 exactly.
    """
    segments = []
    for k in range(curve.num_segments):
        sx, sy = curve.segment_points(k)
        segments.append([[float(a), float(b)] for a, b in zip(sx, sy)])
    obj = {
        "degree": curve.degree,
        "knots": [float(v) for v in curve.knots()],
        "points": segments,
    }
    return json.dumps(obj)


def from_json(text: str) -> PiecewiseBezier:
    obj = json.loads(text)
    degree = int(obj["degree"])
    segments = obj["points"]
    K = len(segments)
    x = np.empty(K * degree + 1)
    y = np.empty(K * degree + 1)
    for k, pts in enumerate(segments):
        if len(pts) != degree + 1:
            raise ValueError(f"segment {k} has {len(pts)} points, expected {degree + 1}")
        for i, (px, py) in enumerate(pts):
            if k > 0 and i == 0:
                if px != x[k * degree] or py != y[k * degree]:
                    raise ValueError(f"segment {k} start point disagrees with junction")
                continue
            x[k * degree + i] = px
            y[k * degree + i] = py
    return PiecewiseBezier(degree=degree, x=x, y=y)
