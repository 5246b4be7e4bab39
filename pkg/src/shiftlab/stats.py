"""Metrics, interval estimates, and significance tests for small runs.

Everything here is self-contained: the Student-t machinery goes through a
hand-rolled regularized incomplete beta (Lentz continued fraction, good to
about 1e-10 absolute for the degrees of freedom seen here), so the library
works without any external stats dependency.  Tests cross-check the values
against an independent reference implementation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "regularized_incomplete_beta",
    "student_t_cdf",
    "student_t_quantile",
    "auc",
    "topk_accuracy",
    "accuracy",
    "confidence_interval",
    "welch_ttest",
    "WelchResult",
    "matching_fraction",
    "subgroup_metrics",
    "SubgroupResult",
    "MetricSeries",
    "EfficiencyCurve",
    "log_space",
]


# ---------------------------------------------------------------------------
# special functions


def _beta_cf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    max_iter = 500
    eps = 1e-15
    fpmin = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < fpmin:
        d = fpmin
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if a <= 0.0 or b <= 0.0:
        raise ValueError("incomplete beta needs a, b > 0")
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must be in [0, 1], got {x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_bt = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    bt = math.exp(ln_bt)
    # the continued fraction converges fast on one side of the mean; use the
    # symmetry I_x(a,b) = 1 - I_{1-x}(b,a) for the other
    if x < (a + 1.0) / (a + b + 2.0):
        return bt * _beta_cf(a, b, x) / a
    return 1.0 - bt * _beta_cf(b, a, 1.0 - x) / b


def student_t_cdf(t: float, dof: float) -> float:
    if dof <= 0.0:
        raise ValueError("degrees of freedom must be positive")
    if t == 0.0:
        return 0.5
    tail = 0.5 * regularized_incomplete_beta(dof / 2.0, 0.5, dof / (dof + t * t))
    return 1.0 - tail if t > 0 else tail


def student_t_quantile(p: float, dof: float) -> float:
    """Inverse CDF by bisection on :func:`student_t_cdf`."""
    if not 0.0 < p < 1.0:
        raise ValueError("quantile probability must be in (0, 1)")
    if p == 0.5:
        return 0.0
    if p < 0.5:
        return -student_t_quantile(1.0 - p, dof)
    lo, hi = 0.0, 1.0
    while student_t_cdf(hi, dof) < p:
        hi *= 2.0
        if hi > 1e12:
            raise ArithmeticError("t quantile bracket failed")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if student_t_cdf(mid, dof) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# metrics


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """Ranks starting at 1, ties getting the average rank."""
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x), dtype=np.float64)
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney statistic; ties between
    a positive and a negative score count 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("auc expects matching 1-D scores and labels")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs both classes present")
    ranks = _average_ranks(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def topk_accuracy(logits, labels, k: int = 1) -> float:
    """Fraction of rows whose label is among the k top-scored classes.
    Equal scores are ranked by ascending class index."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError("topk_accuracy expects (N, K) logits and (N,) labels")
    if k < 1:
        raise ValueError("k must be >= 1")
    k = min(k, logits.shape[1])
    # stable argsort of -logits keeps lower class indices first among ties
    top = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(top == labels[:, None], axis=1)))


def accuracy(preds, labels) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError("accuracy expects matching shapes")
    if preds.size == 0:
        raise ValueError("accuracy of an empty set")
    return float(np.mean(preds == labels))


# ---------------------------------------------------------------------------
# intervals and tests


def confidence_interval(values, level: float = 0.95, method: str = "t") -> tuple[float, float]:
    """Two-sided interval for the mean of ``values``.

    method "t": mean +/- t_{n-1, (1+level)/2} * s / sqrt(n).
    method "percentile": empirical quantiles of the values themselves.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or len(values) < 2:
        raise ValueError("confidence_interval needs at least two values")
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0, 1)")
    if method == "percentile":
        alpha = (1.0 - level) / 2.0
        return (
            float(np.quantile(values, alpha)),
            float(np.quantile(values, 1.0 - alpha)),
        )
    if method != "t":
        raise ValueError(f"unknown CI method '{method}'")
    n = len(values)
    m = float(values.mean())
    s = float(values.std(ddof=1))
    half = student_t_quantile((1.0 + level) / 2.0, n - 1) * s / math.sqrt(n)
    return (m - half, m + half)


@dataclass(frozen=True)
class WelchResult:
    t: float
    dof: float
    p_value: float


def welch_ttest(a, b) -> WelchResult:
    """Two-sided Welch t-test (no equal-variance assumption), with the
    Welch-Satterthwaite degrees of freedom.

    Conventions: both samples zero-variance with equal means gives t=0, p=1;
    zero variance with unequal means gives an infinite t and p=0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or len(a) < 2 or len(b) < 2:
        raise ValueError("welch_ttest needs two 1-D samples of size >= 2")
    na, nb = len(a), len(b)
    va, vb = float(a.var(ddof=1)), float(b.var(ddof=1))
    diff = float(a.mean() - b.mean())
    se2 = va / na + vb / nb
    if se2 == 0.0:
        if diff == 0.0:
            return WelchResult(t=0.0, dof=float(na + nb - 2), p_value=1.0)
        return WelchResult(t=math.copysign(math.inf, diff), dof=float(na + nb - 2), p_value=0.0)
    t = diff / math.sqrt(se2)
    dof = se2 * se2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    p = regularized_incomplete_beta(dof / 2.0, 0.5, dof / (dof + t * t))
    return WelchResult(t=t, dof=dof, p_value=min(1.0, p))


def matching_fraction(curve, target_value: float) -> float | None:
    """Smallest fraction at which the piecewise-linear interpolation of the
    curve reaches ``target_value``.

    ``curve`` is a sequence of (fraction, mean_value) pairs with strictly
    increasing fractions.  Returns the first fraction (interpolated) where the
    value is >= target, or None when the curve never gets there.
    """
    pts = [(float(f), float(v)) for f, v in curve]
    if len(pts) < 1:
        raise ValueError("matching_fraction needs a non-empty curve")
    fracs = [f for f, _ in pts]
    if any(f2 <= f1 for f1, f2 in zip(fracs, fracs[1:])):
        raise ValueError("curve fractions must be strictly increasing")
    if pts[0][1] >= target_value:
        return pts[0][0]
    for (f1, v1), (f2, v2) in zip(pts, pts[1:]):
        if v2 >= target_value:  # first upward crossing; v1 < target here
            return f1 + (f2 - f1) * (target_value - v1) / (v2 - v1)
    return None


@dataclass(frozen=True)
class SubgroupResult:
    value: float
    count: int
    reliable: bool


def subgroup_metrics(
    preds,
    labels,
    groups,
    metric: str = "accuracy",
    min_count: int = 10,
) -> dict[str, SubgroupResult]:
    """Per-group metric values.  ``metric`` is "accuracy" (preds = predicted
    classes) or "auc" (preds = scores, binary labels).  Groups smaller than
    ``min_count`` are computed but flagged unreliable."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    groups = np.asarray(groups)
    if not (len(preds) == len(labels) == len(groups)):
        raise ValueError("preds, labels, groups must have equal lengths")
    if metric not in ("accuracy", "auc"):
        raise ValueError(f"unknown subgroup metric '{metric}'")
    out: dict[str, SubgroupResult] = {}
    for g in sorted(set(groups.tolist())):
        mask = groups == g
        n = int(mask.sum())
        if metric == "accuracy":
            value = accuracy(preds[mask], labels[mask])
        else:
            value = auc(preds[mask], labels[mask])
        out[str(g)] = SubgroupResult(value=value, count=n, reliable=n >= min_count)
    return out


# ---------------------------------------------------------------------------
# aggregates


@dataclass
class MetricSeries:
    """A named metric with one value per repeat."""

    name: str
    values: list[float] = field(default_factory=list)

    def mean(self) -> float:
        if not self.values:
            raise ValueError(f"metric series '{self.name}' is empty")
        return float(np.mean(self.values))

    def ci(self, level: float = 0.95, method: str = "t") -> tuple[float, float]:
        return confidence_interval(self.values, level=level, method=method)

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class EfficiencyCurve:
    """Metric-vs-label-fraction curve: one MetricSeries per fraction."""

    metric_name: str
    points: dict[float, MetricSeries] = field(default_factory=dict)

    def add(self, fraction: float, value: float) -> None:
        series = self.points.setdefault(fraction, MetricSeries(self.metric_name))
        series.values.append(value)

    def fractions(self) -> list[float]:
        return sorted(self.points)

    def mean_curve(self) -> list[tuple[float, float]]:
        return [(f, self.points[f].mean()) for f in self.fractions()]

    def band(self, level: float = 0.95) -> list[tuple[float, float, float]]:
        """(fraction, lo, hi) per point; single-repeat points collapse."""
        out = []
        for f in self.fractions():
            vals = self.points[f].values
            if len(vals) >= 2:
                lo, hi = confidence_interval(vals, level=level)
            else:
                lo = hi = float(vals[0])
            out.append((f, lo, hi))
        return out

    def matching_fraction(
        self, target_value: float, which: str = "mean", level: float = 0.95
    ) -> float | None:
        """Matching fraction against the mean curve, or against the CI band
        edges ("lo" pessimistic, "hi" optimistic) for uncertainty bounds."""
        if which == "mean":
            curve = self.mean_curve()
        else:
            idx = 1 if which == "lo" else 2
            curve = [(f, b[idx]) for f, b in zip(self.fractions(), self.band(level))]
        return matching_fraction(curve, target_value)


def log_space(lo: float, hi: float, n: int) -> list[float]:
    """n log-spaced samples from lo to hi inclusive (grid helper)."""
    if lo <= 0.0 or hi <= 0.0 or hi < lo:
        raise ValueError("log_space needs 0 < lo <= hi")
    if n < 1:
        raise ValueError("log_space needs n >= 1")
    if n == 1:
        return [lo]
    return [float(v) for v in np.exp(np.linspace(math.log(lo), math.log(hi), n))]
