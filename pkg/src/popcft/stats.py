"""Per-title metric normalisation and Student t-tests."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betainc


@dataclass
class MetricTable:
    metric_name: str
    rows: dict[str, dict[str, float]]  # title -> condition -> value

    def conditions(self) -> list[str]:
        conds = None
        for title, row in self.rows.items():
            if conds is None:
                conds = list(row)
            elif set(row) != set(conds):
                raise ValueError(f"title {title!r} lacks conditions {sorted(set(conds) ^ set(row))}")
        return conds or []

    def column(self, condition: str) -> list[float]:
        return [self.rows[t][condition] for t in self.rows]

    def normalized(self) -> "MetricTable":
        conds = self.conditions()
        out = {}
        for title, row in self.rows.items():
            vals = normalize_per_title([row[c] for c in conds])
            out[title] = dict(zip(conds, vals))
        return MetricTable(self.metric_name, out)


@dataclass(frozen=True)
class TestResult:
    t_statistic: float
    p_value: float
    df: float
    variant: str
    degenerate: bool = False


def normalize_per_title(values) -> list[float]:
    """Divide each value by the row sum so one title's conditions sum to 1."""
    vals = [float(v) for v in values]
    if any(v < 0 for v in vals):
        raise ValueError("metric values must be non-negative")
    total = sum(vals)
    if total <= 0:
        raise ValueError("cannot normalise an all-zero row")
    return [v / total for v in vals]


def t_sf_two_sided(t: float, df: float) -> float:
    """Two-sided tail probability of Student's t: ``I_{df/(df+t^2)}(df/2, 1/2)``."""
    if math.isinf(t):
        return 0.0
    return float(min(1.0, max(0.0, betainc(df / 2.0, 0.5, df / (df + t * t)))))


def t_test(a, b, variant: str = "paired") -> TestResult:
    """Two-sided Student t-test of ``a`` against ``b``.

    ``paired`` tests the mean of ``a - b``; ``two_sample`` uses the pooled
    (equal-variance) standard error with ``len(a) + len(b) - 2`` degrees of
    freedom. Zero variance yields a result flagged ``degenerate`` with NaN
    statistic and p-value.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if variant == "paired":
        if len(a) != len(b) or len(a) < 2:
            raise ValueError("paired test needs equal-length samples of size >= 2")
        d = a - b
        n = len(d)
        df = n - 1
        mean = d.mean()
        var = d.var(ddof=1)
        if var == 0:
            return TestResult(math.nan, math.nan, df, variant, degenerate=True)
        t = mean / math.sqrt(var / n)
    elif variant == "two_sample":
        na, nb = len(a), len(b)
        if na < 2 or nb < 2:
            raise ValueError("two-sample test needs at least 2 values per group")
        df = na + nb - 2
        pooled = ((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / df
        if pooled == 0:
            return TestResult(math.nan, math.nan, df, variant, degenerate=True)
        t = (a.mean() - b.mean()) / math.sqrt(pooled * (1.0 / na + 1.0 / nb))
    else:
        raise ValueError(f"unknown t-test variant {variant!r}")
    return TestResult(float(t), t_sf_two_sided(float(t), df), float(df), variant)


def significance_report(table: MetricTable, comparisons: list[tuple[str, str]], normalize: bool = True) -> str:
    """Text table of ``metric | comparison | variant | t | p`` for each pair of conditions."""
    t = table.normalized() if normalize else table
    lines = [f"{'Metric':<8} {'T-test':<40} {'variant':<11} {'t':>9} {'P-value':>9}"]
    for c1, c2 in comparisons:
        for variant in ("paired", "two_sample"):
            r = t_test(t.column(c1), t.column(c2), variant)
            tstat = "degen." if r.degenerate else f"{r.t_statistic:9.4f}"
            p = "degen." if r.degenerate else f"{r.p_value:9.4f}"
            lines.append(f"{table.metric_name:<8} {c1 + ' vs ' + c2:<40} {variant:<11} {tstat:>9} {p:>9}")
    return "\n".join(lines) + "\n"
