"""Log-gamma, digamma and trigamma on numpy arrays.

Evaluated in float64 regardless of the input dtype. Accurate to roughly
1e-13 relative for positive arguments, which is all the Beta policy needs.
"""

from __future__ import annotations

import numpy as np

_LANCZOS_G = 7.0
_LANCZOS_COEF = np.array(
    [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ]
)
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def _lgamma_pos(x: np.ndarray) -> np.ndarray:
    # Lanczos for x >= 0.5
    x = x - 1.0
    acc = np.full_like(x, _LANCZOS_COEF[0])
    for i in range(1, 9):
        acc = acc + _LANCZOS_COEF[i] / (x + i)
    t = x + _LANCZOS_G + 0.5
    return _HALF_LOG_2PI + (x + 0.5) * np.log(t) - t + np.log(acc)


def lgamma(x) -> np.ndarray:
    """log|Gamma(x)|, using the reflection formula below 0.5."""
    x = np.asarray(x, dtype=np.float64)
    small = x < 0.5
    safe = np.where(small, 1.0 - x, x)
    out = _lgamma_pos(safe)
    if np.any(small):
        refl = np.log(np.pi / np.abs(np.sin(np.pi * x))) - out
        out = np.where(small, refl, out)
    return out


def _shift_up(x: np.ndarray, terms, lower: float = 10.0):
    """Recurrence shift so the asymptotic series applies."""
    acc = np.zeros_like(x)
    y = x.copy()
    for _ in range(int(lower) + 1):
        mask = y < lower
        if not mask.any():
            break
        acc = acc + np.where(mask, terms(np.where(mask, y, 1.0)), 0.0)
        y = np.where(mask, y + 1.0, y)
    return y, acc


def digamma(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0):
        raise ValueError("digamma is only implemented for positive arguments")
    y, acc = _shift_up(x, lambda v: -1.0 / v)
    inv2 = 1.0 / (y * y)
    series = inv2 * (1.0 / 12 - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 * (1.0 / 240 - inv2 / 132))))
    return acc + np.log(y) - 0.5 / y - series


def trigamma(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0):
        raise ValueError("trigamma is only implemented for positive arguments")
    y, acc = _shift_up(x, lambda v: 1.0 / (v * v))
    inv = 1.0 / y
    inv2 = inv * inv
    series = inv + 0.5 * inv2 + inv * inv2 * (
        1.0 / 6 - inv2 * (1.0 / 30 - inv2 * (1.0 / 42 - inv2 * (1.0 / 30 - inv2 * 5.0 / 66)))
    )
    return acc + series


def log_beta(a, b) -> np.ndarray:
    return lgamma(a) + lgamma(b) - lgamma(np.asarray(a, dtype=np.float64) + b)
