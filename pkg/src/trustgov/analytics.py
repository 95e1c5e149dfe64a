"""MAE-reduction statistics, Wilcoxon signed-rank tests and queueing projection."""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

EXACT_MAX_N = 12

# Agent-side execution times (ms) reported for 3, 6 and 9 agents; the
# default contention factor is their least-squares slope through the origin.
REFERENCE_AGENTS = (3, 6, 9)
REFERENCE_ET_MS = (58.0, 64.0, 71.0)
DEFAULT_MEASURED = (17.2, 0.058, 0.021)  # T req/s, ET s, D s at 3 agents


# --------------------------------------------------------------------------
# Wilcoxon signed-rank


@dataclass(frozen=True)
class PairedSample:
    before: tuple
    after: tuple

    def __init__(self, before: Sequence[float], after: Sequence[float]) -> None:
        if len(before) != len(after):
            raise ValueError(f"paired sample lengths differ: {len(before)} vs {len(after)}")
        if len(before) < 1:
            raise ValueError("paired sample needs at least one pair")
        object.__setattr__(self, "before", tuple(float(x) for x in before))
        object.__setattr__(self, "after", tuple(float(x) for x in after))

    def differences(self) -> list[float]:
        return [b - a for b, a in zip(self.before, self.after)]


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    p_value: float
    n_effective: int
    method: str  # exact | normal | degenerate


def average_ranks(values: Sequence[float]) -> list[float]:
    """1-based ranks; tied values share the mean of the ranks they span."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = (i + j + 2) / 2.0
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def _signed_ranks(diffs: Sequence[float]) -> tuple[list[float], list[bool]]:
    nz = [d for d in diffs if d != 0]
    return average_ranks([abs(d) for d in nz]), [d > 0 for d in nz]


def exact_p_value(doubled_ranks: Sequence[int], w_doubled: int) -> float:
    """P(min(T+, T-) <= w) under the null, counting all 2^n sign patterns.

    Ranks are passed doubled so average ranks of ties stay integral.
    """
    total = sum(doubled_ranks)
    counts = [0] * (total + 1)
    counts[0] = 1
    for r in doubled_ranks:
        for s in range(total, r - 1, -1):
            counts[s] += counts[s - r]
    hits = sum(c for s, c in enumerate(counts) if min(s, total - s) <= w_doubled)
    return hits / 2 ** len(doubled_ranks)


def normal_p_value(ranks: Sequence[float], w: float) -> float:
    n = len(ranks)
    mean = n * (n + 1) / 4.0
    tie_term = 0.0
    groups: dict[float, int] = defaultdict(int)
    for r in ranks:
        groups[r] += 1
    for t in groups.values():
        tie_term += (t ** 3 - t) / 48.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term
    if var <= 0:
        return 1.0
    z = min(0.0, w - mean + 0.5) / math.sqrt(var)
    return min(1.0, math.erfc(-z / math.sqrt(2.0)))


def wilcoxon_signed_rank(sample: PairedSample, method: str = "auto") -> WilcoxonResult:
    """Two-sided signed-rank test with zero differences dropped."""
    if method not in ("auto", "exact", "normal"):
        raise ValueError(f"unknown method {method!r}")
    ranks, positive = _signed_ranks(sample.differences())
    n = len(ranks)
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0, "degenerate")
    t_plus = sum(r for r, p in zip(ranks, positive) if p)
    t_minus = sum(r for r, p in zip(ranks, positive) if not p)
    w = min(t_plus, t_minus)
    if method == "exact" or (method == "auto" and n <= EXACT_MAX_N):
        p = exact_p_value([int(round(2 * r)) for r in ranks], int(round(2 * w)))
        return WilcoxonResult(w, p, n, "exact")
    return WilcoxonResult(w, normal_p_value(ranks, w), n, "normal")


# --------------------------------------------------------------------------
# MAE reduction


@dataclass
class ReductionRow:
    group: str  # agent id or "pooled"
    model: str
    n: int
    mean_first: float
    mean_final: float
    reduction: float | None  # None when the first-iteration mean is zero
    wilcoxon: WilcoxonResult


@dataclass
class ComparisonRow:
    group: str
    iteration: int
    baseline_model: str
    baseline_mae: float
    oracle_mae: float


@dataclass
class MaeReduction:
    rows: list = field(default_factory=list)
    comparisons: list = field(default_factory=list)

    def get(self, group: str, model: str) -> ReductionRow:
        for r in self.rows:
            if r.group == group and r.model == model:
                return r
        raise KeyError((group, model))

    def average_reduction(self, group: str = "pooled") -> float | None:
        vals = [r.reduction for r in self.rows if r.group == group and r.reduction is not None]
        return sum(vals) / len(vals) if vals else None


def _mean(xs: Sequence[float]) -> float:
    return math.fsum(xs) / len(xs)


def mae_reduction(reports: Sequence, baseline_model: str = "gpt") -> MaeReduction:
    """Reduction from the first to the last iteration, per agent and pooled.

    ``reports`` are IterationReport-like objects exposing ``iteration`` and
    ``mae`` (agent -> model -> per-request list).
    """
    if len(reports) < 2:
        raise ValueError("mae_reduction needs at least two iterations")
    first, final = reports[0], reports[-1]
    out = MaeReduction()
    agents = sorted(first.mae)
    models = sorted({m for a in agents for m in first.mae[a]})
    groups = [(a, [a]) for a in agents] + [("pooled", agents)]
    for group, members in groups:
        for model in models:
            before = [x for a in members for x in first.mae[a].get(model, [])]
            after = [x for a in members for x in final.mae[a].get(model, [])]
            if not before:
                continue
            m0, m1 = _mean(before), _mean(after)
            red = None if m0 == 0 else (m0 - m1) / m0
            out.rows.append(ReductionRow(group, model, len(before), m0, m1, red,
                                         wilcoxon_signed_rank(PairedSample(before, after))))
        for rep in reports:
            base, oracle = [], []
            for a in members:
                per_model = rep.mae[a]
                if baseline_model in per_model:
                    base.extend(per_model[baseline_model])
                n_req = len(next(iter(per_model.values())))
                oracle.extend(min(per_model[m][k] for m in per_model) for k in range(n_req))
            if base:
                out.comparisons.append(ComparisonRow(group, rep.iteration, baseline_model,
                                                     _mean(base), _mean(oracle)))
    return out


@dataclass
class _CsvReport:
    iteration: int
    mae: dict


def reports_from_csv(path: str | Path) -> list:
    """Rebuild per-iteration MAE lists from a convergence CSV."""
    data: dict = defaultdict(lambda: defaultdict(lambda: defaultdict(list)))
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"iteration", "request", "agent", "model", "mae"} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            key = (int(row["request"]), float(row["mae"]))
            data[int(row["iteration"])][row["agent"]][row["model"]].append(key)
    reports = []
    for it in sorted(data):
        mae = {a: {m: [v for _, v in sorted(vals)] for m, vals in models.items()}
               for a, models in data[it].items()}
        reports.append(_CsvReport(it, mae))
    return reports


def reduction_csv(result: MaeReduction) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group", "model", "n", "mean_mae_first", "mean_mae_final", "reduction",
                "wilcoxon_w", "p_value", "n_effective", "method"])
    for r in result.rows:
        w.writerow([r.group, r.model, r.n, r.mean_first, r.mean_final,
                    "undefined" if r.reduction is None else r.reduction,
                    r.wilcoxon.statistic, r.wilcoxon.p_value, r.wilcoxon.n_effective,
                    r.wilcoxon.method])
    return buf.getvalue()


def comparison_csv(result: MaeReduction) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group", "iteration", "baseline_model", "baseline_mae", "oracle_mae"])
    for c in result.comparisons:
        w.writerow([c.group, c.iteration, c.baseline_model, c.baseline_mae, c.oracle_mae])
    return buf.getvalue()


# --------------------------------------------------------------------------
# Queueing


@dataclass(frozen=True)
class QueueModel:
    arrival_rate: float
    service_rate: float
    servers: int = 1

    def __post_init__(self) -> None:
        if self.arrival_rate <= 0 or self.service_rate <= 0:
            raise ValueError("arrival and service rates must be positive")
        if int(self.servers) != self.servers or self.servers < 1:
            raise ValueError("servers must be an integer >= 1")

    @property
    def offered_load(self) -> float:
        return self.arrival_rate / self.service_rate

    @property
    def utilization(self) -> float:
        return self.offered_load / self.servers

    @property
    def stable(self) -> bool:
        return self.utilization < 1.0

    def wait_probability(self) -> float:
        return erlang_c(self.servers, self.offered_load)

    def mean_wait(self) -> float:
        if not self.stable:
            return math.inf
        return self.wait_probability() / (self.servers * self.service_rate - self.arrival_rate)

    def mean_system_time(self) -> float:
        if not self.stable:
            return math.inf
        return self.mean_wait() + 1.0 / self.service_rate


def erlang_c(c: int, a: float) -> float:
    """Probability an arrival waits in M/M/c with offered load ``a`` erlangs."""
    if a >= c:
        return 1.0
    b = 1.0
    for k in range(1, c + 1):
        b = a * b / (k + a * b)
    rho = a / c
    return b / (1.0 - rho * (1.0 - b))


def default_contention() -> float:
    c0 = REFERENCE_AGENTS[0]
    xs = [n / c0 - 1.0 for n in REFERENCE_AGENTS]
    ys = [et / REFERENCE_ET_MS[0] - 1.0 for et in REFERENCE_ET_MS]
    return sum(x * y for x, y in zip(xs, ys)) / sum(x * x for x in xs)


@dataclass(frozen=True)
class Measured:
    throughput: float
    et: float
    d: float
    agents: int = 3


@dataclass(frozen=True)
class Projection:
    agents: int
    throughput: float | None
    et: float
    d: float | None
    utilization: float
    saturated: bool


def calibrate_service_rate(arrival: float, system_time: float, servers: int = 1) -> float:
    """Service rate whose M/M/c mean system time at ``arrival`` equals ``system_time``."""
    if arrival <= 0 or system_time <= 0:
        raise ValueError("arrival rate and system time must be positive")
    if servers == 1:
        return arrival + 1.0 / system_time
    lo = arrival / servers * (1 + 1e-12)
    hi = max(2.0 / system_time, lo * 2)
    while QueueModel(arrival, hi, servers).mean_system_time() > system_time:
        hi *= 2
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if QueueModel(arrival, mid, servers).mean_system_time() > system_time:
            lo = mid
        else:
            hi = mid
    return hi


def mmc_project(measured: Measured, targets: Iterable[int], contention: float | None = None,
                servers: int = 1) -> list[Projection]:
    """Project (T, ET, D) to other agent counts.

    Governance is a queue fed at the measured rate scaled by agents/agents0,
    with its service rate calibrated so the measured D is the system time at
    the measured point. Agent-side ET grows linearly in the agent ratio with
    slope ``contention``. Throughput keeps the measured request concurrency
    T0 * (ET0 + D0) fixed, so T = T0 * (ET0 + D0) / (ET + D).
    """
    if measured.throughput <= 0 or measured.et <= 0 or measured.d <= 0 or measured.agents < 1:
        raise ValueError("measured point must have positive T, ET, D and agents")
    kappa = default_contention() if contention is None else contention
    if kappa < 0:
        raise ValueError("contention factor must be >= 0")
    mu = calibrate_service_rate(measured.throughput, measured.d, servers)
    base = QueueModel(measured.throughput, mu, servers)
    if not base.stable:
        raise ValueError("measured point is not stable")
    concurrency = measured.throughput * (measured.et + measured.d)
    out = []
    for n in targets:
        if n < 1:
            raise ValueError("agent counts must be >= 1")
        ratio = n / measured.agents
        et = measured.et * (1.0 + kappa * (ratio - 1.0))
        q = QueueModel(measured.throughput * ratio, mu, servers)
        if not q.stable:
            out.append(Projection(n, None, et, None, q.utilization, True))
            continue
        d = q.mean_system_time()
        out.append(Projection(n, concurrency / (et + d), et, d, q.utilization, False))
    return out


def read_measured(path: str | Path, requests: int | None = None) -> Measured:
    """Measured point from a performance CSV (first row, or the given size)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no rows")
    needed = {"requests", "agents", "throughput_rps", "et_ms", "d_ms"}
    if not needed <= set(rows[0]):
        raise ValueError(f"{path}: expected columns {sorted(needed)}")
    if requests is not None:
        rows = [r for r in rows if int(r["requests"]) == requests]
        if not rows:
            raise ValueError(f"{path}: no row for {requests} requests")
    r = rows[0]
    return Measured(float(r["throughput_rps"]), float(r["et_ms"]) / 1e3, float(r["d_ms"]) / 1e3,
                    int(r["agents"]))


def projection_csv(rows: Sequence[Projection]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["agents", "throughput_rps", "et_ms", "d_ms", "utilization", "saturated"])
    for p in rows:
        w.writerow([p.agents, "" if p.throughput is None else f"{p.throughput:.4f}",
                    f"{p.et * 1e3:.4f}", "" if p.d is None else f"{p.d * 1e3:.4f}",
                    f"{p.utilization:.6f}", int(p.saturated)])
    return buf.getvalue()


# --------------------------------------------------------------------------
# Markdown


def _fmt(x: float | None, nd: int = 5) -> str:
    return "undefined" if x is None else f"{x:.{nd}f}"


def markdown_report(reduction: MaeReduction | None = None,
                    projection: Sequence[Projection] | None = None) -> str:
    parts = []
    if reduction is not None:
        parts.append("## MAE reduction and Wilcoxon signed-rank tests\n")
        parts.append("| group | model | n | mean MAE first | mean MAE final | reduction | W | p | method |")
        parts.append("|---|---|---|---|---|---|---|---|---|")
        for r in reduction.rows:
            red = "undefined" if r.reduction is None else f"{100 * r.reduction:.1f}%"
            parts.append(
                f"| {r.group} | {r.model} | {r.n} | {_fmt(r.mean_first)} | {_fmt(r.mean_final)} | "
                f"{red} | {r.wilcoxon.statistic:g} | {r.wilcoxon.p_value:.4g} | {r.wilcoxon.method} |"
            )
        parts.append("\n## Single-model baseline vs per-request oracle\n")
        parts.append("| group | iteration | baseline model | baseline MAE | oracle MAE |")
        parts.append("|---|---|---|---|---|")
        for c in reduction.comparisons:
            parts.append(f"| {c.group} | {c.iteration} | {c.baseline_model} | "
                         f"{_fmt(c.baseline_mae)} | {_fmt(c.oracle_mae)} |")
    if projection is not None:
        parts.append("\n## Scalability projection\n")
        parts.append("| agents | T (req/s) | ET (ms) | D (ms) | utilization |")
        parts.append("|---|---|---|---|---|")
        for p in projection:
            t = "saturated" if p.throughput is None else f"{p.throughput:.2f}"
            d = "saturated" if p.d is None else f"{p.d * 1e3:.1f}"
            parts.append(f"| {p.agents} | {t} | {p.et * 1e3:.1f} | {d} | {p.utilization:.3f} |")
    return "\n".join(parts).lstrip("\n") + "\n"

