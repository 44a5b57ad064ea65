"""Jukes-Cantor kernels for the end-region mismatch count M(t) and the
intermediate-region cutter indicator Z(t)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import gammaln

from .model import IndelHistory, SUBSTITUTION_RATE

_FLUSH = 1e-300


def mismatch_probability(t: float, u: float = SUBSTITUTION_RATE) -> float:
    """Per-site probability that a JC site differs from its start after time t."""
    return 0.75 * -math.expm1(-4.0 * u * t / 3.0)


@dataclass(frozen=True)
class MismatchMatrix:
    r: int
    t: float
    p: float
    entries: np.ndarray

    @property
    def log_entries(self) -> np.ndarray:
        return mismatch_logmatrix(self.r, self.t)


@lru_cache(maxsize=None)
def _mismatch_terms(r: int):
    i, j, k = np.meshgrid(np.arange(r + 1), np.arange(r + 1), np.arange(r + 1), indexing="ij")
    a = j - i + k  # matches that become mismatches
    b = r - j - k  # matches that stay matches
    valid = (k >= np.maximum(0, i - j)) & (k <= np.minimum(i, r - j))
    # invalid slots get zero exponents; they are masked to -inf below
    a, b = np.where(valid, a, 0), np.where(valid, b, 0)
    kk, d = np.where(valid, k, 0), np.where(valid, i - k, 0)
    lc = (gammaln(r - i + 1) - gammaln(a + 1) - gammaln(r - i - a + 1)
          + gammaln(i + 1) - gammaln(kk + 1) - gammaln(i - kk + 1))
    lc = np.where(valid, lc, -np.inf)
    return lc, a.astype(float), b.astype(float), kk.astype(float), d.astype(float)


@lru_cache(maxsize=16384)
def mismatch_logmatrix(r: int, t: float) -> np.ndarray:
    """Elementwise log of the (r+1)x(r+1) mismatch transition matrix."""
    if t < 0:
        raise ValueError("time must be non-negative")
    if r < 1:
        raise ValueError("end-region length must be positive")
    if t == 0:
        out = np.full((r + 1, r + 1), -np.inf)
        np.fill_diagonal(out, 0.0)
        out.flags.writeable = False
        return out
    p = mismatch_probability(t)
    lc, a, b, k, d = _mismatch_terms(r)
    with np.errstate(divide="ignore"):
        lp, lq = math.log(p), math.log1p(-p)
        lp3, lq3 = math.log(p / 3.0), math.log1p(-p / 3.0)
    terms = lc + a * lp + b * lq + k * lp3 + d * lq3
    m = terms.max(axis=2, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = (m + np.log(np.exp(terms - m).sum(axis=2, keepdims=True)))[:, :, 0]
    out[out < math.log(_FLUSH)] = -np.inf
    out.flags.writeable = False
    return out


def mismatch_matrix(r: int, t: float) -> MismatchMatrix:
    """Transition matrix of the number of mismatches among ``r`` end-region sites."""
    if t < 0:
        raise ValueError("time must be non-negative")
    return MismatchMatrix(r, t, mismatch_probability(t), np.exp(mismatch_logmatrix(r, t)))


def mismatch_stationary(r: int) -> np.ndarray:
    if r < 1:
        raise ValueError("end-region length must be positive")
    i = np.arange(r + 1)
    logpi = gammaln(r + 1) - gammaln(i + 1) - gammaln(r - i + 1) + i * math.log(3.0) - r * math.log(4.0)
    return np.exp(logpi)


# ---------------------------------------------------------------------------
# cutters


@lru_cache(maxsize=8192)
def cutter_stationary(n: int) -> float:
    """Approximate probability of no internal restriction site among n bases."""
    if n < 1:
        raise ValueError("intermediate length must be >= 1")
    return (1.0 - 4.0 ** -4) ** max(n - 3, 0) * (1.0 - 4.0 ** -6) ** max(n - 5, 0)


@lru_cache(maxsize=8192)
def cutter_rate01(n: int, u: float = SUBSTITUTION_RATE) -> float:
    if n < 1:
        raise ValueError("intermediate length must be >= 1")
    return 4.0 * max(n - 3, 0) * u / (4 ** 4 - 1) + 6.0 * max(n - 5, 0) * u / (4 ** 6 - 1)


@dataclass(frozen=True)
class CutterKernel:
    n: int
    pi0: float
    q01: float
    eta_t: float
    entries: np.ndarray


@lru_cache(maxsize=1 << 16)
def _cutter_2x2(t: float, n: int) -> tuple[float, float, float, float]:
    pi0 = cutter_stationary(n)
    if pi0 >= 1.0:
        return 1.0, 0.0, 0.0, 1.0
    eta = math.exp(-cutter_rate01(n) * SUBSTITUTION_RATE * t / (1.0 - pi0))
    return (pi0 + (1.0 - pi0) * eta, (1.0 - pi0) * (1.0 - eta),
            pi0 * (1.0 - eta), 1.0 - pi0 * (1.0 - eta))


def cutter_matrix(t: float, n: int) -> CutterKernel:
    if t < 0:
        raise ValueError("time must be non-negative")
    pi0 = cutter_stationary(n)
    q01 = cutter_rate01(n)
    a, b, c, d = _cutter_2x2(t, n)
    eta = 1.0 if pi0 >= 1.0 else math.exp(-q01 * SUBSTITUTION_RATE * t / (1.0 - pi0))
    return CutterKernel(n, pi0, q01, eta, np.array([[a, b], [c, d]]))


def cutter_product_given_history(h: IndelHistory, T: float, n_parent: int) -> tuple[float, float, float, float]:
    """Row-major entries of the piecewise cutter kernel along an edge."""
    if h.kill:
        raise ValueError("cutter kernel is undefined on a killed edge")
    a, b, c, d = 1.0, 0.0, 0.0, 1.0
    t_prev = 0.0
    n = n_parent
    for e in h.events:
        x = _cutter_2x2(e.time - t_prev, n)
        a, b, c, d = a * x[0] + b * x[2], a * x[1] + b * x[3], c * x[0] + d * x[2], c * x[1] + d * x[3]
        n += e.kind.sign * e.length
        t_prev = e.time
    if T < t_prev:
        raise ValueError("edge length shorter than history")
    x = _cutter_2x2(T - t_prev, n)
    return a * x[0] + b * x[2], a * x[1] + b * x[3], c * x[0] + d * x[2], c * x[1] + d * x[3]


def cutter_matrix_given_history(h: IndelHistory, T: float, n_parent: int) -> CutterKernel:
    """Cutter transition matrix along an edge whose intermediate length changes
    at the events of ``h``."""
    a, b, c, d = cutter_product_given_history(h, T, n_parent)
    n_end = h.final_length(n_parent)
    pi0 = cutter_stationary(n_end)
    return CutterKernel(n_end, pi0, cutter_rate01(n_end), math.nan, np.array([[a, b], [c, d]]))
