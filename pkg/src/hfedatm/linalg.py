"""Dense numerical kernels shared by the aggregation code.

Everything here works in float64. Randomness always flows through an explicit
``numpy.random.Generator`` built on PCG64 so that a seed fully determines the
stream on every platform.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
import scipy.linalg

logger = logging.getLogger(__name__)

SeedLike = Union[int, Sequence[int]]

_SYMMETRY_TOL = 1e-9
_MAX_JITTER_ATTEMPTS = 3
# Cholesky pivots below this ratio of the largest are treated as rank deficiency.
_PIVOT_RATIO_FLOOR = 1e-14


class SingularSystemError(np.linalg.LinAlgError):
    """Raised when a symmetric system stays singular after all jitter attempts."""


def make_rng(seed: SeedLike) -> np.random.Generator:
    """Return a PCG64 generator for ``seed``.

    ``seed`` may be a single integer or a sequence of non-negative integers; the
    sequence form is how independent sub-streams (per round, per client, ...)
    are derived without depending on call order.
    """
    if isinstance(seed, (int, np.integer)):
        seq = np.random.SeedSequence(int(seed))
    else:
        seq = np.random.SeedSequence([int(s) for s in seed])
    return np.random.Generator(np.random.PCG64(seq))


@dataclass(frozen=True)
class SolveResult:
    x: np.ndarray
    jitter: float = 0.0
    method: str = "cholesky"


def _check_finite(name: str, a: np.ndarray) -> None:
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")


def _cholesky_or_none(a: np.ndarray):
    try:
        c, lower = scipy.linalg.cho_factor(a, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        return None
    piv = np.abs(np.diag(c)) ** 2
    if piv.min() <= _PIVOT_RATIO_FLOOR * piv.max():
        return None
    return c, lower


def solve_spd(a: np.ndarray, b: np.ndarray) -> SolveResult:
    """Solve ``a @ x = b`` for symmetric ``a``.

    Tries a Cholesky factorisation first. On rank deficiency a ridge
    ``delta * I`` with ``delta = 1e-8 * trace(a) / dim`` is added, doubling up to
    three times. A symmetric but indefinite, non-singular ``a`` (which is what a
    DP-noised Gram sum looks like) is solved with a symmetric LU instead.

    Raises:
        ValueError: on shape mismatch, asymmetry or non-finite input.
        SingularSystemError: if no attempt produces an acceptable residual.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    vector_rhs = b.ndim == 1
    if vector_rhs:
        b = b[:, None]
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"solve_spd needs a square matrix, got {a.shape}")
    if b.ndim != 2 or b.shape[0] != a.shape[1]:
        raise ValueError(f"right-hand side {b.shape} incompatible with {a.shape}")
    _check_finite("A", a)
    _check_finite("B", b)
    scale = max(1.0, float(np.abs(a).max(initial=0.0)))
    if np.abs(a - a.T).max(initial=0.0) > _SYMMETRY_TOL * scale:
        raise ValueError("matrix is not symmetric within 1e-9")

    dim = a.shape[0]
    b_norm = np.linalg.norm(b)

    def acceptable(x: np.ndarray, mat: np.ndarray) -> bool:
        return bool(np.all(np.isfinite(x))) and (
            np.linalg.norm(mat @ x - b) <= 1e-8 * (1.0 + b_norm) * max(1.0, np.linalg.norm(mat))
        )

    def finish(res: SolveResult) -> SolveResult:
        return SolveResult(res.x[:, 0] if vector_rhs else res.x, res.jitter, res.method)

    fac = _cholesky_or_none(a)
    if fac is not None:
        x = scipy.linalg.cho_solve(fac, b, check_finite=False)
        if acceptable(x, a):
            return finish(SolveResult(x))

    # the ridge is scaled by the trace; a non-positive trace gives it no scale
    trace = float(np.trace(a))
    base = 1e-8 * trace / dim
    for attempt in range(_MAX_JITTER_ATTEMPTS if trace > 0 else 0):
        delta = base * (2.0 ** attempt)
        shifted = a + delta * np.eye(dim)
        fac = _cholesky_or_none(shifted)
        if fac is None:
            continue
        x = scipy.linalg.cho_solve(fac, b, check_finite=False)
        if acceptable(x, shifted):
            logger.debug("solve_spd: ridge jitter %.3e after %d attempts", delta, attempt + 1)
            return finish(SolveResult(x, jitter=delta, method="cholesky+jitter"))

    # Indefinite but invertible: symmetric LU is still exact.
    if np.linalg.cond(a) < 1e12:
        x = scipy.linalg.solve(a, b, assume_a="sym", check_finite=False)
        if acceptable(x, a):
            return finish(SolveResult(x, method="symmetric-lu"))
    raise SingularSystemError(
        f"system of dimension {dim} is singular after {_MAX_JITTER_ATTEMPTS} jitter attempts"
    )


def bilinear_resize(kernel: np.ndarray, target: int) -> np.ndarray:
    """Resize a square 2-D kernel to ``target x target`` with align-corners bilinear sampling.

    Source coordinate for output index ``t`` is ``t * (n - 1) / (target - 1)``;
    a target (or source) of size 1 maps to the single first cell.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1] or kernel.shape[0] < 1:
        raise ValueError(f"expected a non-empty square kernel, got {kernel.shape}")
    if target < 1:
        raise ValueError("target size must be >= 1")
    n = kernel.shape[0]
    if target == n:
        return kernel.copy()
    if target == 1 or n == 1:
        coords = np.zeros(target)
    else:
        coords = np.arange(target) * (n - 1) / (target - 1)
    lo = np.clip(np.floor(coords).astype(int), 0, n - 1)
    hi = np.minimum(lo + 1, n - 1)
    frac = coords - lo
    # separable: interpolate rows, then columns
    rows = kernel[lo, :] * (1.0 - frac)[:, None] + kernel[hi, :] * frac[:, None]
    return rows[:, lo] * (1.0 - frac)[None, :] + rows[:, hi] * frac[None, :]


def gaussian_sample(rng: np.random.Generator, rows: int, cols: int, sigma: float) -> np.ndarray:
    """I.i.d. ``N(0, sigma^2)`` matrix. ``sigma == 0`` gives exact zeros without touching ``rng``."""
    if sigma < 0 or not np.isfinite(sigma):
        raise ValueError(f"sigma must be a finite non-negative number, got {sigma}")
    if sigma == 0:
        return np.zeros((rows, cols))
    return rng.normal(0.0, sigma, size=(rows, cols))


def spectral_norm(a: np.ndarray) -> float:
    """Largest singular value (largest |eigenvalue| for symmetric input)."""
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        return 0.0
    if a.shape[0] == a.shape[1] and np.allclose(a, a.T, atol=1e-12, rtol=0):
        return float(np.abs(np.linalg.eigvalsh(a)).max())
    return float(np.linalg.norm(a, 2))


def symmetry_residual(a: np.ndarray) -> float:
    return float(np.abs(a - a.T).max(initial=0.0))
