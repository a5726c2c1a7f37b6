"""Paired comparisons of two models evaluated on the same test set."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import betainc

from .errors import InputError

EXACT_BELOW = 25


@dataclass
class McNemarResult:
    b: int
    c: int
    statistic: float
    p_value: float
    exact: bool
    degenerate: bool = False

    def to_dict(self):
        return asdict(self)


@dataclass
class TTestResult:
    t: float
    df: int
    p_value: float
    mean_difference: float
    degenerate: bool = False

    def to_dict(self):
        return asdict(self)


def _correct(preds, truth):
    return np.array([_same(p, y) for p, y in zip(preds, truth)], dtype=bool)


def _same(p, y):
    if isinstance(p, (tuple, list, np.ndarray)) or isinstance(y, (tuple, list, np.ndarray)):
        return tuple(np.ravel(p).tolist()) == tuple(np.ravel(y).tolist())
    return p == y


def binomial_two_sided(k: int, n: int) -> float:
    """Exact two-sided p of ``min(b, c) = k`` under Binomial(n, 1/2)."""
    tail = sum(math.comb(n, i) for i in range(min(k, n - k) + 1))
    return min(1.0, 2.0 * tail / 2.0**n)


def chi2_upper_1df(x: float) -> float:
    return math.erfc(math.sqrt(x / 2.0))


def mcnemar_from_counts(b: int, c: int) -> McNemarResult:
    n = b + c
    if n == 0:
        return McNemarResult(0, 0, 0.0, 1.0, True, degenerate=True)
    stat = (abs(b - c) - 1) ** 2 / n
    if n < EXACT_BELOW:
        return McNemarResult(b, c, stat, binomial_two_sided(min(b, c), n), True)
    return McNemarResult(b, c, stat, chi2_upper_1df(stat), False)


def mcnemar_test(preds_a, preds_b, truth) -> McNemarResult:
    """Continuity-corrected McNemar test; exact binomial when ``b + c < 25``.

    ``b`` counts samples model A gets right and model B wrong, ``c`` the
    reverse.
    """
    preds_a, preds_b, truth = list(preds_a), list(preds_b), list(truth)
    if not len(preds_a) == len(preds_b) == len(truth):
        raise InputError(f"length mismatch: {len(preds_a)}, {len(preds_b)}, {len(truth)}")
    ca, cb = _correct(preds_a, truth), _correct(preds_b, truth)
    return mcnemar_from_counts(int(np.sum(ca & ~cb)), int(np.sum(~ca & cb)))


def t_two_sided(t: float, df: int) -> float:
    """Two-sided tail of Student's t via the regularized incomplete beta."""
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


def paired_t_test(errors_a, errors_b) -> TTestResult:
    a = np.asarray(errors_a, dtype=float)
    b = np.asarray(errors_b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise InputError(f"paired samples must be equal-length vectors, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise InputError("paired t-test needs at least 2 samples")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, n - 1, 1.0, mean, degenerate=True)
        return TTestResult(math.copysign(math.inf, mean), n - 1, 0.0, mean, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(t, n - 1, t_two_sided(t, n - 1), mean)
