"""Paired comparisons of evidence variance and training diagnostics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


def _betacf(a: float, b: float, x: float, tol: float = 1e-10, max_iter: int = 10_000) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_regularized(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not (a > 0 and b > 0):
        raise ValueError("a and b must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf2(t: float, df: float) -> float:
    """Two-sided tail probability P(|T| >= |t|) for Student's t."""
    if math.isinf(t):
        return 0.0
    return betainc_regularized(0.5 * df, 0.5, df / (df + t * t))


def student_t_cdf(t: float, df: float) -> float:
    half = 0.5 * student_t_sf2(t, df)
    return 1.0 - half if t > 0 else half


@dataclass
class PairedSample:
    labels: list
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.a.shape != self.b.shape or self.a.ndim != 1 or self.a.size < 2:
            raise ValueError("paired samples need two equal-length vectors of length >= 2")
        if not (np.all(np.isfinite(self.a)) and np.all(np.isfinite(self.b))):
            raise ValueError("paired samples must be finite")
        if len(self.labels) != self.a.size:
            raise ValueError("one label per pair")


@dataclass
class TTestResult:
    t: float
    df: int
    p: float
    degenerate: str | None = None  # "zero-variance" or "undefined"
    mean_difference: float = 0.0


def paired_t_test(s: PairedSample) -> TTestResult:
    """Two-sided paired t-test on ``a - b``."""
    d = s.a - s.b
    n = d.size
    df = n - 1
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(math.nan, df, math.nan, "undefined", mean)
        return TTestResult(math.copysign(math.inf, mean), df, 0.0, "zero-variance", mean)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(t, df, student_t_sf2(t, df), None, mean)


# ---- training curves ---------------------------------------------------------


def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    """Trailing mean over up to ``window`` points (shorter at the start)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return v
    c = np.concatenate([[0.0], np.cumsum(v)])
    hi = np.arange(1, v.size + 1)
    lo = np.maximum(0, hi - window)
    return (c[hi] - c[lo]) / (hi - lo)


def training_curve(metrics: Sequence[dict], window: int | None = 10):
    """(iterations, rejection rates) from a metric log, optionally smoothed."""
    rows = [m for m in metrics if m.get("rejection_rate") not in (None, "")]
    its = np.array([int(m["iteration"]) for m in rows], dtype=np.int64)
    rates = np.array([float(m["rejection_rate"]) for m in rows])
    if window and window > 1:
        rates = moving_average(rates, window)
    return its, rates


def write_curve_csv(path, iterations, rates) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "rejection_rate"])
        for it, r in zip(iterations, rates):
            w.writerow([int(it), repr(float(r))])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---- study summaries --------------------------------------------------------


@dataclass
class StudySummary:
    n_datasets: int
    mean_var: dict[str, float]
    win_fraction: float
    tie: bool
    variance_test: TTestResult | None
    log_variance_test: TTestResult | None
    failed_sweeps: dict[str, int]

    def text(self, a: str = "p", b: str = "q") -> str:
        lines = [
            f"datasets: {self.n_datasets}",
            *(f"mean variance [{k}]: {v:.6g}" for k, v in self.mean_var.items()),
            f"fraction of datasets with var_{b} < var_{a}: {self.win_fraction:.4f}" + (" (ties present)" if self.tie else ""),
            *(f"failed sweeps [{k}]: {v}" for k, v in self.failed_sweeps.items()),
        ]
        for name, res in (("variance", self.variance_test), ("log-variance", self.log_variance_test)):
            if res is None:
                lines.append(f"paired t-test on {name}: not enough datasets")
            else:
                flag = f" [{res.degenerate}]" if res.degenerate else ""
                lines.append(f"paired t-test on {name}: t={res.t:.4f} df={res.df} p={res.p:.3g}{flag}")
        return "\n".join(lines)


def summarize_study(table, a: str = "p", b: str = "q") -> StudySummary:
    """Aggregate an evidence-variance table comparing proposal ``b`` against ``a``.

    Win fraction counts datasets where ``b`` has the lower variance; ties
    count one half.
    """
    va = table.column("var", a)
    vb = table.column("var", b)
    keep = np.isfinite(va) & np.isfinite(vb)
    va, vb = va[keep], vb[keep]
    n = int(va.size)
    wins = float(np.sum(vb < va)) + 0.5 * float(np.sum(vb == va))
    tie = bool(np.any(vb == va))
    vt = lt = None
    if n >= 2:
        ids = [r.dataset for r, k in zip(table.rows, keep) if k]
        vt = paired_t_test(PairedSample(ids, va, vb))
        if np.all(va > 0) and np.all(vb > 0):
            lt = paired_t_test(PairedSample(ids, np.log(va), np.log(vb)))
    failed = {lab: int(table.column("n_failed", lab).sum()) for lab in (a, b)}
    return StudySummary(
        n,
        {a: float(va.mean()) if n else math.nan, b: float(vb.mean()) if n else math.nan},
        wins / n if n else math.nan,
        tie,
        vt,
        lt,
        failed,
    )
