"""Correlation, rank-test and segmentation-quality statistics.

Special functions are computed here directly (log-gamma from ``math``, the
regularized incomplete gamma and beta functions by series and continued
fractions) so results do not depend on a statistics package.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

BIN_EDGES = (0.0, 0.2, 0.4, 0.6, 1.0)
BIN_NAMES = ("G1", "G2", "G3", "G4")

_EPS = 1e-15
_MAX_ITER = 10_000


class UndefinedCorrelation(ValueError):
    """Raised when a series has zero variance."""


def _paired(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"series lengths differ: {x.size} vs {y.size}")
    if x.size < 3:
        raise ValueError("need at least 3 pairs")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ValueError("series contain non-finite values")
    return x, y


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelation("correlation undefined for a constant series")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return min(max(r, -1.0), 1.0)


def plcc(x, y) -> float:
    """Pearson linear correlation coefficient."""
    return _pearson(*_paired(x, y))


def rankdata(values) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    values = np.asarray(values, dtype=np.float64).ravel()
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    ranks = np.empty(values.size, dtype=np.float64)
    # boundaries of runs of equal values in sorted order
    starts = np.flatnonzero(np.r_[True, sorted_vals[1:] != sorted_vals[:-1]])
    ends = np.r_[starts[1:], values.size]
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + e + 1)
    return ranks


def srcc(x, y) -> float:
    """Spearman rank correlation: Pearson correlation of average ranks."""
    x, y = _paired(x, y)
    return _pearson(rankdata(x), rankdata(y))


# -- special functions ------------------------------------------------------------------

def _gamma_series(a: float, x: float) -> float:
    """Lower regularized incomplete gamma P(a, x) by its power series."""
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_cf(a: float, x: float) -> float:
    """Upper regularized incomplete gamma Q(a, x) by modified Lentz continued fraction."""
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = tiny if abs(d) < tiny else d
        c = b + an / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gammaincc(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x) = Gamma(a, x) / Gamma(a)."""
    if a <= 0:
        raise ValueError("a must be > 0")
    if x < 0:
        raise ValueError("x must be >= 0")
    if x == 0:
        return 1.0
    if x < a + 1.0:
        return min(max(1.0 - _gamma_series(a, x), 0.0), 1.0)
    return min(max(_gamma_cf(a, x), 0.0), 1.0)


def chi2_sf(x: float, dof: int) -> float:
    """Chi-square survival function P(X >= x)."""
    if dof <= 0:
        raise ValueError("dof must be positive")
    if x <= 0:
        return 1.0
    return gammaincc(0.5 * dof, 0.5 * x)


def _beta_cf(a: float, b: float, x: float) -> float:
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITER):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return h


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be > 0")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x in (0.0, 1.0):
        return x
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(log_front)
    # the continued fraction converges fastest on the side of the mean
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cf(a, b, x) / a
    return 1.0 - front * _beta_cf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, dof: float) -> float:
    """P(|T| >= |t|) for Student's t with ``dof`` degrees of freedom."""
    if dof <= 0:
        raise ValueError("dof must be positive")
    if math.isinf(t):
        return 0.0
    return betainc(0.5 * dof, 0.5, dof / (dof + t * t))


# -- tests --------------------------------------------------------------------------------

def spearman_test(x, y, exact: bool = False) -> tuple[float, float]:
    """Spearman rho with a two-sided p-value.

    The default p uses t = rho * sqrt((n - 2) / (1 - rho^2)) against Student's t
    with n - 2 dof. ``exact=True`` enumerates every permutation (n <= 10 only).
    """
    x, y = _paired(x, y)
    rx, ry = rankdata(x), rankdata(y)
    rho = _pearson(rx, ry)
    n = x.size
    if exact:
        return rho, _spearman_exact_p(rx, ry, rho)
    if abs(rho) >= 1.0:
        return rho, 0.0
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    return rho, t_sf_two_sided(t, n - 2)


def _spearman_exact_p(rx: np.ndarray, ry: np.ndarray, rho: float, chunk: int = 100_000) -> float:
    n = rx.size
    if n > 10:
        raise ValueError("exact permutation p-value is limited to n <= 10")
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    denom = math.sqrt(float(dx @ dx) * float(dy @ dy))
    threshold = abs(rho) - 1e-12
    hits = total = 0
    perms = itertools.permutations(range(n))
    while True:
        block = np.fromiter(itertools.chain.from_iterable(itertools.islice(perms, chunk)), dtype=np.int8)
        if block.size == 0:
            break
        idx = block.reshape(-1, n)
        r = (dy[idx] @ dx) / denom
        hits += int(np.count_nonzero(np.abs(r) >= threshold))
        total += idx.shape[0]
    return hits / total


def kruskal_wallis(groups) -> tuple[float, float]:
    """Tie-corrected Kruskal-Wallis H and its chi-square (k - 1 dof) p-value."""
    groups = [np.asarray(g, dtype=np.float64).ravel() for g in groups]
    if len(groups) < 2:
        raise ValueError("need at least 2 groups")
    if any(g.size == 0 for g in groups):
        raise ValueError("groups must be nonempty")
    pooled = np.concatenate(groups)
    n = pooled.size
    if n < 5:
        raise ValueError("need at least 5 observations in total")
    if not np.isfinite(pooled).all():
        raise ValueError("groups contain non-finite values")
    _, tie_counts = np.unique(pooled, return_counts=True)
    correction = 1.0 - float(np.sum(tie_counts**3 - tie_counts)) / (n**3 - n)
    if correction <= 0.0:
        return 0.0, 1.0
    ranks = rankdata(pooled)
    mean_rank = (n + 1) / 2.0
    h = 0.0
    start = 0
    for g in groups:
        r = ranks[start:start + g.size]
        h += g.size * (r.mean() - mean_rank) ** 2
        start += g.size
    h = 12.0 / (n * (n + 1)) * h / correction
    return float(h), chi2_sf(float(h), len(groups) - 1)


def dice(a, b) -> float:
    """2|A and B| / (|A| + |B|); two empty masks score 1.0."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def count_error(pred_count: int, ref_count: int) -> float:
    """|pred - ref| / max(ref, 1)."""
    if ref_count < 0:
        raise ValueError("reference count must be >= 0")
    return abs(pred_count - ref_count) / max(ref_count, 1)


# -- usability bins ---------------------------------------------------------------------

def bin_index(score: float) -> int:
    """G1..G4 as 0..3: half-open bins except the last, which includes 1.0."""
    if not 0.0 <= score <= 1.0:
        raise ValueError(f"score {score} outside [0, 1]")
    for i, hi in enumerate(BIN_EDGES[1:-1]):
        if score < hi:
            return i
    return len(BIN_NAMES) - 1


@dataclass
class BinReport:
    n: int
    rho: float
    rho_p: float
    medians: list[float]                 # nan for an empty bin
    counts: list[int]
    kw_h: float
    kw_p: float
    warnings: list[str] = field(default_factory=list)

    def monotone_increasing(self) -> bool:
        vals = [m for m in self.medians if not math.isnan(m)]
        return all(b > a for a, b in zip(vals, vals[1:]))


def bin_group_analysis(scores, metrics, exact: bool = False) -> BinReport:
    """Group metric values by usability-score bin; Spearman rho over all pairs and
    Kruskal-Wallis across the nonempty bins."""
    scores, metrics = _paired(scores, metrics)
    if scores.size < 8:
        raise ValueError("need at least 8 pairs")
    bins: list[list[float]] = [[] for _ in BIN_NAMES]
    for s, m in zip(scores, metrics):
        bins[bin_index(float(s))].append(float(m))
    notes = []
    for name, vals in zip(BIN_NAMES, bins):
        if not vals:
            msg = f"bin {name} is empty and is excluded from Kruskal-Wallis"
            warnings.warn(msg, stacklevel=2)
            notes.append(msg)
    filled = [v for v in bins if v]
    if len(filled) < 2:
        raise ValueError("need at least 2 nonempty bins")
    rho, rho_p = spearman_test(scores, metrics, exact=exact)
    h, kw_p = kruskal_wallis(filled)
    return BinReport(
        n=int(scores.size),
        rho=rho,
        rho_p=rho_p,
        medians=[float(np.median(v)) if v else float("nan") for v in bins],
        counts=[len(v) for v in bins],
        kw_h=h,
        kw_p=kw_p,
        warnings=notes,
    )
