"""Statistical comparisons between evaluation runs, self-contained.

Distribution tails come from series/continued-fraction evaluations of the
regularized incomplete gamma and beta functions (the classical numerical
recipes), so no statistics library is required at runtime. Includes McNemar's
test with continuity correction (exact binomial fallback for small discordant
counts), the paired two-sided t-test, Pearson correlation, mean-rank
summaries with average-rank ties, and a Gaussian kernel density over token
ids for frequency diagnostics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

_MAX_ITER = 500
_EPS = 1e-15
_TINY = 1e-300


class LengthMismatch(ValueError):
    """Paired inputs must have equal, sufficient length."""


class ZeroVariance(ValueError):
    """Correlation is undefined when one side is constant."""


class EmptyStream(ValueError):
    """Token density needs at least one token id."""


def _gamma_series(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x) by series, for x < a + 1."""
    term = 1.0 / a
    total = term
    n = a
    for _ in range(_MAX_ITER):
        n += 1.0
        term *= x / n
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))

def _gamma_cf(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x) by continued fraction,
    for x >= a + 1 (modified Lentz iteration)."""
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER + 1):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


def regularized_gamma_p(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x)."""
    if a <= 0:
        raise ValueError("shape parameter must be positive")
    if x < 0:
        raise ValueError("x must be nonnegative")
    if x == 0.0:
        return 0.0
    if x < a + 1.0:
        return _gamma_series(a, x)
    return 1.0 - _gamma_cf(a, x)


def regularized_gamma_q(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x) = 1 - P(a, x)."""
    if a <= 0:
        raise ValueError("shape parameter must be positive")
    if x < 0:
        raise ValueError("x must be nonnegative")
    if x == 0.0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_series(a, x)
    return _gamma_cf(a, x)


def chi_square_sf(x: float, df: float) -> float:
    """Survival function of the chi-square distribution."""
    return regularized_gamma_q(df / 2.0, x / 2.0)


def _beta_cf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return h


def regularized_beta(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("shape parameters must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    front = math.exp(
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log(1.0 - x)
    )
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cf(a, b, x) / a
    return 1.0 - front * _beta_cf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, df: float) -> float:
    """Two-sided p-value of a Student t statistic."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    return regularized_beta(df / 2.0, 0.5, df / (df + t * t))


@dataclass
class PairedOutcomes:
    """Per-sample correctness of two systems on the same samples."""

    a_correct: np.ndarray
    b_correct: np.ndarray

    def __post_init__(self) -> None:
        self.a_correct = np.asarray(self.a_correct, dtype=bool)
        self.b_correct = np.asarray(self.b_correct, dtype=bool)
        if self.a_correct.shape != self.b_correct.shape or self.a_correct.ndim != 1:
            raise LengthMismatch("outcome vectors must be 1-d and equally long")
        if self.a_correct.size == 0:
            raise LengthMismatch("outcome vectors must be nonempty")


@dataclass
class McNemarResult:
    b: int
    c: int
    statistic: float | None
    p_value: float
    method: str


EXACT_THRESHOLD = 10


def mcnemar_test(outcomes: PairedOutcomes) -> McNemarResult:
    """McNemar's test on paired correctness with continuity correction.

    b counts samples only the first system got right, c the converse. With
    b + c >= 10 the statistic (|b - c| - 1)^2 / (b + c) is referred to
    chi-square with one degree of freedom; below that an exact two-sided
    binomial(b + c, 1/2) test is used (doubled smaller tail, capped at 1).
    b + c == 0 degenerates to p = 1.
    """
    b = int(np.sum(outcomes.a_correct & ~outcomes.b_correct))
    c = int(np.sum(~outcomes.a_correct & outcomes.b_correct))
    n = b + c
    if n == 0:
        return McNemarResult(b, c, None, 1.0, "degenerate")
    if n < EXACT_THRESHOLD:
        k = min(b, c)
        tail = sum(math.comb(n, i) for i in range(k + 1)) / 2.0**n
        return McNemarResult(b, c, None, min(1.0, 2.0 * tail), "exact-binomial")
    statistic = (abs(b - c) - 1.0) ** 2 / n
    return McNemarResult(b, c, statistic, chi_square_sf(statistic, 1.0), "chi-square")


@dataclass
class TTestResult:
    statistic: float
    p_value: float
    df: int
    degenerate: bool = False


def paired_t_test(x: Sequence[float], y: Sequence[float]) -> TTestResult:
    """Two-sided paired t-test on matched score vectors.

    Zero-variance differences degenerate: p = 1 when the mean difference is
    zero too, else p = 0 with an infinite statistic.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise LengthMismatch("paired vectors must be 1-d and equally long")
    n = x.size
    if n < 2:
        raise LengthMismatch("paired t-test needs at least two pairs")
    d = x - y
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    df = n - 1
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0, df, degenerate=True)
        return TTestResult(math.copysign(math.inf, mean), 0.0, df, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(t, student_t_two_sided_p(t, df), df)


def pearson_r(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation coefficient of two equally long vectors."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise LengthMismatch("vectors must be 1-d and equally long")
    if x.size < 2:
        raise LengthMismatch("correlation needs at least two points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        raise ZeroVariance("correlation is undefined for a constant vector")
    return float(np.dot(dx, dy) / math.sqrt(sxx * syy))


@dataclass
class ScoreTable:
    """Rows are systems, columns are score sets with a direction flag each."""

    row_names: tuple[str, ...]
    col_names: tuple[str, ...]
    scores: np.ndarray
    higher_is_better: tuple[bool, ...]

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (len(self.row_names), len(self.col_names)):
            raise LengthMismatch("score matrix shape must match row/column names")
        if len(self.higher_is_better) != len(self.col_names):
            raise LengthMismatch("one direction flag per column is required")


def _column_ranks(scores: np.ndarray, higher_is_better: bool) -> np.ndarray:
    """Ranks with 1 = best; tied scores share the average of their ranks."""
    keyed = -scores if higher_is_better else scores
    order = np.argsort(keyed, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and keyed[order[j + 1]] == keyed[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def mean_rank(table: ScoreTable) -> dict[str, float]:
    """Average per-column rank of each row (rank 1 = best in a column)."""
    all_ranks = np.column_stack(
        [
            _column_ranks(table.scores[:, c], table.higher_is_better[c])
            for c in range(len(table.col_names))
        ]
    )
    means = all_ranks.mean(axis=1)
    return {name: float(means[i]) for i, name in enumerate(table.row_names)}


@dataclass
class TokenDensity:
    """Gaussian KDE over integer token ids, with the raw histogram."""

    ids: np.ndarray
    density: np.ndarray
    log_density: np.ndarray
    histogram: np.ndarray
    bandwidth: float
    n: int


def token_density(
    token_ids: Sequence[int], bandwidth: float | str = "scott"
) -> TokenDensity:
    """Smoothed frequency profile of a token id stream.

    The kernel estimate is evaluated on every integer id between the observed
    minimum and maximum, with mass reflected at the range boundaries and the
    result renormalized so its trapezoid integral over the grid is exactly 1.
    Bandwidth follows Scott's rule (std * n^(-1/5)) unless a positive number
    is given; a degenerate single-id stream falls back to bandwidth 1.
    """
    ids = np.asarray(token_ids, dtype=np.int64).ravel()
    if ids.size == 0:
        raise EmptyStream("token stream is empty")
    n = ids.size
    lo, hi = int(ids.min()), int(ids.max())
    grid = np.arange(lo, hi + 1, dtype=np.float64)
    offset_counts = np.bincount(ids - lo, minlength=hi - lo + 1).astype(np.float64)

    if bandwidth == "scott":
        sigma = float(ids.std(ddof=1)) if n > 1 else 0.0
        h = sigma * n ** (-1.0 / 5.0)
        if not (h > 0.0):
            h = 1.0
    else:
        h = float(bandwidth)
        if h <= 0.0:
            raise ValueError("bandwidth must be positive")

    centers = grid
    left, right = lo - 0.5, hi + 0.5

    def kernel_sum(points: np.ndarray) -> np.ndarray:
        z = (grid[:, None] - points[None, :]) / h
        return (np.exp(-0.5 * z * z) * offset_counts[None, :]).sum(axis=1)

    total = kernel_sum(centers)
    total += kernel_sum(2.0 * left - centers)
    total += kernel_sum(2.0 * right - centers)
    density = total / (n * h * math.sqrt(2.0 * math.pi))
    if grid.size > 1:
        mass = float(0.5 * np.sum((density[1:] + density[:-1]) * np.diff(grid)))
        if mass > 0.0:
            density = density / mass
    log_density = np.log(np.clip(density, _TINY, None))
    return TokenDensity(grid.astype(np.int64), density, log_density, offset_counts, h, n)
