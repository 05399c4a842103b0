"""Length-adherence metrics: CPR, CPR@k, precise/flexible match, aggregation
and per-target distribution summaries."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .errors import InvalidInputError

DEFAULT_KS = (0.05, 0.1)
METRIC_ORDER = ("cpr", "cpr@0.05", "cpr@0.1", "pm", "fm")


def _exact(k) -> Fraction:
    # decimal reading of k, so 0.1 means exactly one tenth
    return Fraction(str(k))


def cpr(target: int, realized: int) -> int:
    return int(realized == target)


def cpr_at(target: int, realized: int, k: float) -> int:
    """1 iff ``|realized - target| <= k * target`` (inclusive)."""
    if k <= 0:
        raise InvalidInputError(f"k must be > 0, got {k}")
    return int(abs(Fraction(realized) - Fraction(target)) <= _exact(k) * Fraction(target))


def pm(target: int, realized: int) -> int:
    return int(abs(realized - target) <= 10)


def fm(target: int, realized: int) -> int:
    """Tolerance keyed on the target: 10 below 80, 20 from 80 up."""
    return int(abs(realized - target) <= (10 if target < 80 else 20))


@dataclass
class LengthJudgment:
    target: int
    realized: int
    cpr: int
    cpr_at: dict
    pm: int
    fm: int

    def indicators(self) -> dict:
        out = {"cpr": self.cpr}
        out.update({f"cpr@{k}": v for k, v in self.cpr_at.items()})
        out["pm"] = self.pm
        out["fm"] = self.fm
        return out

    def to_dict(self) -> dict:
        d = {"target": self.target, "realized": self.realized}
        d.update(self.indicators())
        return d


def judge(target: int, realized: int, ks: Sequence[float] = DEFAULT_KS) -> LengthJudgment:
    if target < 0 or realized < 0:
        raise InvalidInputError("lengths must be non-negative")
    return LengthJudgment(
        target, realized, cpr(target, realized), {k: cpr_at(target, realized, k) for k in ks},
        pm(target, realized), fm(target, realized),
    )


@dataclass
class MetricReport:
    n: int
    values: dict  # metric name -> percentage
    judgments: list = field(default_factory=list, repr=False)

    def __getitem__(self, key):
        return self.values[key]


def aggregate(judgments: Sequence[LengthJudgment]) -> MetricReport:
    """Percentages: 100 x mean of each indicator."""
    if not judgments:
        raise InvalidInputError("aggregate needs at least one judgment")
    names = list(judgments[0].indicators())
    sums = dict.fromkeys(names, 0)
    for j in judgments:
        for k, v in j.indicators().items():
            sums[k] += v
    n = len(judgments)
    return MetricReport(n, {k: 100.0 * sums[k] / n for k in names}, list(judgments))


@dataclass
class BucketSummary:
    target: float
    count: int
    mean: float
    median: float
    q1: float
    q3: float
    min: float
    max: float

    @property
    def iqr(self) -> float:
        return self.q3 - self.q1


def bucket_stats(groups: Mapping[float, Iterable[float]]) -> list[BucketSummary]:
    """Per-target box statistics; quartiles interpolate linearly between
    order statistics (numpy's default "linear" method, inclusive)."""
    out = []
    for target in sorted(groups):
        vals = np.asarray(list(groups[target]), dtype=np.float64)
        if vals.size == 0:
            raise InvalidInputError(f"target {target} has no results")
        q1, med, q3 = np.percentile(vals, [25, 50, 75], method="linear")
        out.append(BucketSummary(target, int(vals.size), float(vals.mean()), float(med), float(q1), float(q3),
                                 float(vals.min()), float(vals.max())))
    return out


def group_by_target(judgments: Iterable[LengthJudgment]) -> dict:
    groups: dict = {}
    for j in judgments:
        groups.setdefault(j.target, []).append(j.realized)
    return groups


def spearman(targets: Sequence[float], values: Sequence[float]) -> float:
    if len(targets) < 2 or np.ptp(targets) == 0 or np.ptp(values) == 0:
        return float("nan")  # undefined for constant input
    rho = stats.spearmanr(targets, values).statistic
    return float(rho)


def calibration(summaries: Sequence[BucketSummary]) -> float:
    """Spearman correlation between target and mean realized length."""
    return spearman([s.target for s in summaries], [s.mean for s in summaries])


# -- CSV emission -----------------------------------------------------------

def _header(seed, config_hash) -> str:
    return f"# seed={seed} config_hash={config_hash}\n" if seed is not None else ""


def metrics_csv(rows: Iterable[tuple], seed=None, config_hash=None) -> str:
    """``rows`` of (method, split, metric, value)."""
    buf = io.StringIO()
    buf.write(_header(seed, config_hash))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "split", "metric", "value"])
    for method, split, metric, value in rows:
        w.writerow([method, split, metric, f"{value:.2f}"])
    return buf.getvalue()


def report_rows(method: str, split: str, report: MetricReport) -> list[tuple]:
    return [(method, split, name, report.values[name]) for name in METRIC_ORDER if name in report.values]


def bucket_csv(summaries: Sequence[BucketSummary], seed=None, config_hash=None, extra: Mapping | None = None) -> str:
    buf = io.StringIO()
    buf.write(_header(seed, config_hash))
    for k, v in (extra or {}).items():
        buf.write(f"# {k}={v}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["target", "count", "mean", "q1", "median", "q3", "min", "max"])
    for s in summaries:
        w.writerow([_num(s.target), s.count] + [f"{x:.4f}" for x in (s.mean, s.q1, s.median, s.q3, s.min, s.max)])
    return buf.getvalue()


def _num(x):
    return int(x) if float(x).is_integer() else x
