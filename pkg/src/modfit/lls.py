"""Linear least-squares alignment of discovered mod signals to references.

Discovered signals may come out shifted, flipped, or scaled, and several of
them may jointly realize one reference modulation. Aligning one source
(single-source mode) or a linear combination of all three against the
reference absorbs these ambiguities before distances are measured. A bias
term is always included to account for shifts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .modsig import ModSignal

RIDGE_SCALE = 1e-9  # trace-scaled ridge on the Gram matrix


@dataclass
class LlsFit:
    weights: np.ndarray  # one per source
    bias: float
    aligned: np.ndarray
    residual_rms: float
    rank_deficient: bool


def _values(sig) -> np.ndarray:
    if isinstance(sig, ModSignal):
        return sig.values
    return np.asarray(sig, dtype=np.float64)


def lls_align(sources, reference) -> LlsFit:
    """Least-squares fit of sum_i w_i * source_i + b to the reference.

    Solved via normal equations with a small trace-scaled ridge so
    degenerate (constant or collinear) sources still yield the minimum-norm
    solution; such cases are flagged. The aligned output is intentionally
    not re-clamped to [0, 1].
    """
    ref = _values(reference)
    cols = [_values(s) for s in sources]
    if len(cols) < 1:
        raise ValueError("need at least one source")
    for c in cols:
        if c.shape != ref.shape:
            raise ValueError(f"source length {c.shape} does not match reference {ref.shape}")
    X = np.column_stack(cols + [np.ones_like(ref)])
    gram = X.T @ X
    ridge = RIDGE_SCALE * np.trace(gram) / gram.shape[0]
    rank_deficient = bool(np.linalg.matrix_rank(gram) < gram.shape[0])
    w = np.linalg.solve(gram + ridge * np.eye(gram.shape[0]), X.T @ ref)
    aligned = X @ w
    residual_rms = float(np.sqrt(np.mean((aligned - ref) ** 2)))
    return LlsFit(
        weights=w[:-1],
        bias=float(w[-1]),
        aligned=aligned,
        residual_rms=residual_rms,
        rank_deficient=rank_deficient,
    )


def best_single_alignment(sources, reference) -> tuple[int, LlsFit]:
    """Single-source mode: fit each source alone, return the best residual."""
    fits = [lls_align([s], reference) for s in sources]
    idx = int(np.argmin([f.residual_rms for f in fits]))
    return idx, fits[idx]
