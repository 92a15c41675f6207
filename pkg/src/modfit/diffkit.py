"""Reverse-mode differentiation over the synthesis graph, plus the fitting loop.

The render pipeline is a fixed composition, so instead of a general autodiff
system each operation carries a handwritten adjoint. A minimal tape records
(primitive, parents, aux) triples; backward() walks it once in reverse and
accumulates cotangents into the leaves.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import losses, modsig, synth
from .curves import PiecewiseBezier
from .losses import MssSpec
from .modsig import ModSignal


class UnregisteredPrimitiveError(KeyError):
    """A graph tried to apply an operation with no registered adjoint."""


class NanGradientError(FloatingPointError):
    """A gradient turned non-finite during optimization."""


@dataclass(frozen=True)
class Primitive:
    """forward(*arrays, **static) -> (value, aux); vjp(aux, upstream) -> grads."""

    name: str
    forward: Callable
    vjp: Callable


PRIMITIVES: dict[str, Primitive] = {}


def register(prim: Primitive) -> None:
    PRIMITIVES[prim.name] = prim


class Var:
    """Value bound to a tape slot."""

    __slots__ = ("idx", "value")

    def __init__(self, idx: int, value):
        self.idx = idx
        self.value = value


class Tape:
    """Linear record of primitive applications for one forward pass."""

    def __init__(self):
        self._nodes: list[tuple[Primitive | None, tuple, object]] = []

    def leaf(self, value) -> Var:
        self._nodes.append((None, (), None))
        return Var(len(self._nodes) - 1, np.asarray(value, dtype=np.float64))

    def apply(self, name: str, *inputs, **static) -> Var:
        prim = PRIMITIVES.get(name)
        if prim is None:
            raise UnregisteredPrimitiveError(f"primitive {name!r} is not registered")
        values = [v.value if isinstance(v, Var) else v for v in inputs]
        out, aux = prim.forward(*values, **static)
        parents = tuple(v.idx if isinstance(v, Var) else None for v in inputs)
        self._nodes.append((prim, parents, aux))
        return Var(len(self._nodes) - 1, out)

    def backward(self, out: Var, seed=1.0) -> dict[int, np.ndarray]:
        """Cotangents for every tape slot reachable from out."""
        grads: dict[int, np.ndarray] = {out.idx: np.asarray(seed, dtype=np.float64)}
        for i in range(out.idx, -1, -1):
            if i not in grads:
                continue
            prim, parents, aux = self._nodes[i]
            if prim is None:
                continue
            parent_grads = prim.vjp(aux, grads[i])
            for p, g in zip(parents, parent_grads):
                if p is None or g is None:
                    continue
                if p in grads:
                    grads[p] = grads[p] + g
                else:
                    grads[p] = g
        return grads


def vjp(graph_fn: Callable, params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Gradients of a scalar-valued graph w.r.t. every parameter leaf.

    graph_fn(tape, leaves) must compose registered primitives only and
    return the output Var.
    """
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    out = tape.backward(graph_fn(tape, leaves))
    return {k: out.get(leaf.idx, np.zeros_like(np.asarray(params[k], dtype=np.float64))) for k, leaf in leaves.items()}


# ---------------------------------------------------------------------------
# primitive registrations


def _fwd_logistic(x):
    v = modsig.logistic(x)
    return v, v


def _fwd_linmap(y, matrix=None):
    return matrix @ y, matrix


def _fwd_smooth(x, taps=None):
    return modsig.smooth_zero_phase(x, taps), (taps, len(x))


def _fwd_clamp01(x):
    return np.clip(x, 0.0, 1.0), (x > 0.0) & (x < 1.0)


def _fwd_add_const(x, c=None):
    return x + c, None


def _fwd_upsample(v, hop=None, n_samples=None):
    return modsig.upsample_values(v, hop, n_samples), (hop, len(v))


def _fwd_geom_map(m, lo=None, hi=None):
    out = lo * (hi / lo) ** m
    return out, (out, np.log(hi / lo))


def _fwd_osc_read(pos01, table, phases=None, table_grad=True):
    return synth.wavetable_read(table, pos01, phases, table_grad=table_grad)


def _fwd_antialias(data, f0=None, f_s=None):
    return synth.antialias_wavetable(data, f0, f_s), (f0, f_s)


def _fwd_lp_coeffs(f_c, q, f_s=None):
    return synth.lp_coeffs_fwd(f_c, q, f_s)


def _fwd_tv_biquad(x, coeffs, hop=None):
    return synth.tv_biquad(x, coeffs, hop)


def _fwd_mul(x, y):
    return x * y, (x, y)


def _fwd_stft_mag(x, fft_size=None, hop=None, win=None):
    return losses.stft_mag(x, fft_size, hop, win)


def _fwd_spectral_terms(mx, target_mag=None, eps=None, target_log=None, target_norm=None):
    return losses.spectral_terms(mx, target_mag, eps, my_log=target_log, my_norm=target_norm)


def _fwd_mean(*xs):
    return sum(float(x) for x in xs) / len(xs), len(xs)


register(Primitive("logistic", _fwd_logistic, lambda v, g: (g * modsig.logistic_grad(v),)))
register(Primitive("linmap", _fwd_linmap, lambda M, g: (M.T @ g,)))
register(Primitive("smooth", _fwd_smooth, lambda a, g: (modsig.smooth_zero_phase_adjoint(g, a[0], a[1]),)))
register(Primitive("clamp01", _fwd_clamp01, lambda mask, g: (g * mask,)))
register(Primitive("add_const", _fwd_add_const, lambda _, g: (g,)))
register(Primitive("upsample", _fwd_upsample, lambda a, g: (modsig.upsample_adjoint(g, a[0], a[1]),)))
register(Primitive("geom_map", _fwd_geom_map, lambda a, g: (g * a[0] * a[1],)))
register(Primitive("osc_read", _fwd_osc_read, synth.wavetable_read_vjp))
register(Primitive("antialias", _fwd_antialias, lambda a, g: (synth.antialias_wavetable(g, a[0], a[1]),)))
register(Primitive("lp_coeffs", _fwd_lp_coeffs, synth.lp_coeffs_vjp))
register(Primitive("tv_biquad", _fwd_tv_biquad, synth.tv_biquad_vjp))
register(Primitive("mul", _fwd_mul, lambda a, g: (g * a[1], g * a[0])))
register(Primitive("stft_mag", _fwd_stft_mag, lambda a, g: (losses.stft_mag_vjp(a, g),)))
register(Primitive("spectral_terms", _fwd_spectral_terms, lambda a, g: (losses.spectral_terms_vjp(a, g),)))
register(Primitive("mean", _fwd_mean, lambda n, g: (g / n,) * n))


# ---------------------------------------------------------------------------
# optimizer


def adam_init(params: dict[str, np.ndarray]) -> dict:
    return {
        "t": 0,
        "m": {k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in params.items()},
        "v": {k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in params.items()},
    }


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: dict,
    lr: float | dict[str, float],
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """One Adam update with bias correction, no weight decay.

    lr may be a scalar or a per-parameter dict. Returns (params', state').
    """
    t = state["t"] + 1
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise NanGradientError(f"non-finite gradient for parameter {k!r}")
        m = beta1 * state["m"][k] + (1.0 - beta1) * g
        v = beta2 * state["v"][k] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        step_lr = lr[k] if isinstance(lr, dict) else lr
        new_params[k] = p - step_lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[k] = m
        new_v[k] = v
    return new_params, {"t": t, "m": new_m, "v": new_v}


# ---------------------------------------------------------------------------
# fitting


PARAMETERIZATIONS = ("frame", "lpf", "spline")
SYNTH_PARAM_NAMES = ("wt_data", "q_raw")
ROLES = ("add", "sub", "env")


@dataclass
class FitConfig:
    """Hyperparameters of one per-example sound-matching fit."""

    steps: int = 500
    lr_mods: float = 0.05
    lr_synth: float = 0.05
    warmup_steps: int = 20  # linear lr ramp; full-size first Adam steps are jarring
    noise_sigma: float = 0.33
    parameterization: str = "frame"
    lpf_cutoff_hz: float = 8.0
    spline_segments: int = 24
    spline_degree: int = 3
    mss: MssSpec = field(default_factory=MssSpec)
    seed: int = 0
    learn_wavetable: bool = False
    learn_q: bool = False
    wavetable_positions: int = 16
    wavetable_init_sigma: float = 0.01

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lr_mods <= 0 or self.lr_synth <= 0:
            raise ValueError("learning rates must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        if self.parameterization not in PARAMETERIZATIONS:
            raise ValueError(f"unknown parameterization {self.parameterization!r}")


@dataclass
class FitResult:
    params: dict[str, np.ndarray]
    mods: dict[str, ModSignal]
    spline_curves: dict[str, PiecewiseBezier] | None
    final_loss: float | None
    loss_history: np.ndarray
    init_loss_clean: float
    final_loss_clean: float
    wavetable: synth.Wavetable | None
    q: float
    phi0: float
    wall_seconds: float
    diverged: bool
    best_step: int


def noise_schedule(step: int, total: int, sigma: float) -> float:
    """Position-noise std: full sigma at step 0, linear decay to 0 at 2/3."""
    if total <= 0:
        return 0.0
    return sigma * max(0.0, 1.0 - step / (2.0 * total / 3.0))


def uniform_spline_layout(segments: int, degree: int) -> PiecewiseBezier:
    """Uniform-knot curve skeleton with evenly spaced interior control x's."""
    n_pts = segments * degree + 1
    x = np.linspace(0.0, 1.0, n_pts)
    x[0], x[-1] = 0.0, 1.0
    return PiecewiseBezier(degree=degree, x=x, y=np.full(n_pts, 0.5))


class SoundMatchProblem:
    """Precomputed state for fitting one target clip against one patch."""

    def __init__(self, target: np.ndarray, patch: synth.SynthPatch, cfg: FitConfig, q: float | None = None):
        target = np.asarray(target, dtype=np.float64)
        self.patch = patch
        self.cfg = cfg
        self.n_samples = len(target)
        if self.n_samples % patch.hop != 0:
            raise ValueError(f"target length {self.n_samples} not a multiple of hop {patch.hop}")
        self.n_frames = self.n_samples // patch.hop + 1

        self.target_mags = []
        self.target_logs = []
        self.target_norms = []
        for fft_size, hop, win in cfg.mss.resolutions:
            mag, _ = losses.stft_mag(target, fft_size, hop, win)
            self.target_mags.append(mag)
            self.target_logs.append(np.log(np.maximum(mag, cfg.mss.eps_mag)))
            self.target_norms.append(float(np.linalg.norm(mag)))
        self.phases = synth.oscillator_phases(patch.f0, patch.phi0, self.n_samples, patch.f_s)

        if cfg.parameterization == "lpf":
            self.taps = modsig.design_windowed_sinc(cfg.lpf_cutoff_hz, patch.f_ms)
        else:
            self.taps = None
        if cfg.parameterization == "spline":
            self.layout = uniform_spline_layout(cfg.spline_segments, cfg.spline_degree)
            self.m_poly, self.m_full = modsig.spline_render_matrices(self.layout, self.n_frames)
        else:
            self.layout = None

        if cfg.learn_q or q is None:
            self.q_fixed = float(np.sqrt(patch.filter.q_min * patch.filter.q_max))
        else:
            self.q_fixed = float(q)
        if not cfg.learn_wavetable:
            self.table = synth.antialias_wavetable(patch.wavetable.data, patch.f0, patch.f_s)
        else:
            self.table = None

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        n_raw = self.n_frames if self.cfg.parameterization != "spline" else self.layout.num_points
        params = {f"{role}_raw": np.zeros(n_raw) for role in ROLES}
        if self.cfg.learn_wavetable:
            params["wt_data"] = rng.normal(
                0.0, self.cfg.wavetable_init_sigma, (self.cfg.wavetable_positions, synth.FRAME_LEN)
            )
        if self.cfg.learn_q:
            params["q_raw"] = np.zeros(1)
        return params

    def mod_var(self, tape: Tape, leaf: Var, beta: float) -> Var:
        cfg = self.cfg
        v = tape.apply("logistic", leaf)
        if cfg.parameterization == "lpf":
            v = tape.apply("smooth", v, taps=self.taps)
            v = tape.apply("clamp01", v)
        elif cfg.parameterization == "spline":
            m_beta = (1.0 - beta) * self.m_poly + beta * self.m_full
            v = tape.apply("linmap", v, matrix=m_beta)
        return v

    def build_loss(self, tape: Tape, leaves: dict[str, Var], beta: float, pos_noise: np.ndarray | None) -> Var:
        patch, cfg = self.patch, self.cfg
        mods = {role: self.mod_var(tape, leaves[f"{role}_raw"], beta) for role in ROLES}

        pos = mods["add"]
        if pos_noise is not None:
            pos = tape.apply("add_const", pos, c=pos_noise)
        pos_audio = tape.apply("upsample", pos, hop=patch.hop, n_samples=self.n_samples)
        if cfg.learn_wavetable:
            table = tape.apply("antialias", leaves["wt_data"], f0=patch.f0, f_s=patch.f_s)
        else:
            table = self.table
        osc = tape.apply("osc_read", pos_audio, table, phases=self.phases, table_grad=cfg.learn_wavetable)

        f_c = tape.apply("geom_map", mods["sub"], lo=patch.filter.f_c_min, hi=patch.filter.f_c_max)
        if cfg.learn_q:
            q01 = tape.apply("logistic", leaves["q_raw"])
            q = tape.apply("geom_map", q01, lo=patch.filter.q_min, hi=patch.filter.q_max)
        else:
            q = np.asarray(self.q_fixed)
        coeffs = tape.apply("lp_coeffs", f_c, q, f_s=patch.f_s)
        filtered = tape.apply("tv_biquad", osc, coeffs, hop=patch.hop)

        env_audio = tape.apply("upsample", mods["env"], hop=patch.hop, n_samples=self.n_samples)
        out = tape.apply("mul", filtered, env_audio)

        terms = []
        for i, (fft_size, hop, win) in enumerate(cfg.mss.resolutions):
            mx = tape.apply("stft_mag", out, fft_size=fft_size, hop=hop, win=win)
            terms.append(
                tape.apply(
                    "spectral_terms",
                    mx,
                    target_mag=self.target_mags[i],
                    eps=cfg.mss.eps_mag,
                    target_log=self.target_logs[i],
                    target_norm=self.target_norms[i],
                )
            )
        return tape.apply("mean", *terms)

    def loss_and_grads(self, params: dict[str, np.ndarray], beta: float, pos_noise=None):
        tape = Tape()
        leaves = {k: tape.leaf(v) for k, v in params.items()}
        loss_var = self.build_loss(tape, leaves, beta, pos_noise)
        grads_by_idx = tape.backward(loss_var)
        grads = {
            k: grads_by_idx.get(leaf.idx, np.zeros_like(np.asarray(params[k], dtype=np.float64)))
            for k, leaf in leaves.items()
        }
        return float(loss_var.value), grads

    def render_mods(self, params: dict[str, np.ndarray], beta: float = 1.0) -> dict[str, ModSignal]:
        """Noise-free rendering of the current mod parameters."""
        tape = Tape()
        out = {}
        for role in ROLES:
            leaf = tape.leaf(params[f"{role}_raw"])
            out[role] = ModSignal(np.clip(self.mod_var(tape, leaf, beta).value, 0.0, 1.0), self.patch.f_ms)
        return out

    def current_q(self, params: dict[str, np.ndarray]) -> float:
        if self.cfg.learn_q:
            q01 = modsig.logistic(params["q_raw"])[0]
            return float(self.patch.filter.q_min * (self.patch.filter.q_max / self.patch.filter.q_min) ** q01)
        return self.q_fixed

    def spline_curve(self, params: dict[str, np.ndarray], role: str) -> PiecewiseBezier:
        y = modsig.logistic(params[f"{role}_raw"])
        return PiecewiseBezier(degree=self.layout.degree, x=self.layout.x.copy(), y=y)


def fit(
    target: np.ndarray,
    patch: synth.SynthPatch,
    cfg: FitConfig,
    rng: np.random.Generator,
    q: float | None = None,
) -> FitResult:
    """Match the target by direct gradient optimization of mod parameters.

    Renders mods (with position-noise injection and spline degree blend per
    their schedules), runs the synth, takes the MSS loss, backpropagates,
    and applies Adam. Returns the best-loss parameters seen.
    """
    t_start = time.perf_counter()
    problem = SoundMatchProblem(target, patch, cfg, q=q)
    params = problem.init_params(rng)
    state = adam_init(params)
    lr = {k: (cfg.lr_synth if k in SYNTH_PARAM_NAMES else cfg.lr_mods) for k in params}

    init_loss_clean, _ = problem.loss_and_grads(params, beta=blend_for(cfg, 0), pos_noise=None)

    history: list[float] = []
    best_loss = np.inf
    best_params = {k: v.copy() for k, v in params.items()}
    best_step = 0
    diverged = False

    for step in range(cfg.steps):
        sigma = noise_schedule(step, cfg.steps, cfg.noise_sigma)
        noise = rng.normal(0.0, sigma, problem.n_frames) if sigma > 0.0 else None
        beta = blend_for(cfg, step)
        try:
            loss, grads = problem.loss_and_grads(params, beta, noise)
        except NanGradientError:
            diverged = True
            break
        if not np.isfinite(loss):
            diverged = True
            break
        history.append(loss)
        if loss < best_loss:
            best_loss = loss
            best_params = {k: v.copy() for k, v in params.items()}
            best_step = step
        ramp = min(1.0, (step + 1) / cfg.warmup_steps) if cfg.warmup_steps > 0 else 1.0
        try:
            params, state = adam_step(params, grads, state, {k: v * ramp for k, v in lr.items()})
        except NanGradientError:
            diverged = True
            break

    mods = problem.render_mods(best_params, beta=1.0)
    final_loss_clean, _ = problem.loss_and_grads(best_params, beta=1.0, pos_noise=None)

    spline_curves = None
    if cfg.parameterization == "spline":
        spline_curves = {role: problem.spline_curve(best_params, role) for role in ROLES}
    wavetable = None
    if cfg.learn_wavetable:
        wavetable = synth.Wavetable(best_params["wt_data"].copy(), learnable=True)

    return FitResult(
        params=best_params,
        mods=mods,
        spline_curves=spline_curves,
        final_loss=history[-1] if history else None,
        loss_history=np.asarray(history),
        init_loss_clean=init_loss_clean,
        final_loss_clean=final_loss_clean,
        wavetable=wavetable,
        q=problem.current_q(best_params),
        phi0=patch.phi0,
        wall_seconds=time.perf_counter() - t_start,
        diverged=diverged,
        best_step=best_step,
    )


def blend_for(cfg: FitConfig, step: int) -> float:
    """Degree blend for this step; non-spline parameterizations ignore it."""
    if cfg.parameterization != "spline":
        return 1.0
    return modsig.blend_schedule(step, cfg.steps)


def finite_diff_check(
    loss_and_grads: Callable,
    params: dict[str, np.ndarray],
    eps: float = 1e-6,
    max_coords: int = 16,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error of analytic gradients vs central differences.

    loss_and_grads(params) -> (loss, grads). The step is scaled by each
    coordinate's magnitude; for large parameter arrays a random coordinate
    subset of size max_coords is probed.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    _, grads = loss_and_grads(params)
    worst = 0.0
    for k, p in params.items():
        p = np.asarray(p, dtype=np.float64)
        flat = p.ravel()
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        for c in coords:
            step = eps * max(1.0, abs(flat[c]))
            bump = np.zeros_like(flat)
            bump[c] = step
            pp = dict(params)
            pp[k] = (flat + bump).reshape(p.shape)
            lo_p, _ = loss_and_grads(pp)
            pp[k] = (flat - bump).reshape(p.shape)
            lo_m, _ = loss_and_grads(pp)
            fd = (lo_p - lo_m) / (2.0 * step)
            an = np.asarray(grads[k]).ravel()[c]
            denom = max(abs(fd), abs(an))
            if denom < 1e-12:
                continue
            worst = max(worst, abs(fd - an) / denom)
    return worst
