"""Scenario generation and experiment orchestration on a simulated clock.

Convergence runs replay the same request sequence once per iteration and
feed the governance node's mean (dR, dT) per model back into the stub
reasoners between iterations. Performance runs push synthetic workloads
through the same pipeline with wall-clock stage timers.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from . import policy
from .agents import Agent, StubReasoner, read_observations
from .domains import DEFAULT_PROFILES, Regime
from .governance import GOVERNANCE_STAGES, GovernanceDecisionRecord, GovernanceNode, mean_feedback
from .ledger import AnchorMode, Chain, KeyedDigestSigner
from .policy import PolicyMatrix
from .timing import StageTimer

DEFAULT_SECRET = b"trustgov-desk-scale-secret"
AGENT_STAGES = ("fetch", "compute", "agent_chain_log")

CSV_COLUMNS = [
    "iteration", "request", "round", "timestamp", "agent", "domain", "model", "r", "t",
    "r_ref", "t_ref", "mae", "admitted", "verdict", "reason", "selected", "fallback",
    "resolved", "joint_actuation", "city_wide_escalation", "human_confirmation_required",
    "escalation_action",
]


@dataclass
class ReasonerSpec:
    model_id: str
    bias_r: float = 0.0
    bias_t: float = 0.0
    noise: float = 0.0
    confidence: float = 1.0


@dataclass
class AgentSpec:
    agent_id: str
    domain: str
    series: dict = field(default_factory=dict)
    observations: str | None = None
    reasoners: list = field(default_factory=list)


@dataclass
class Scenario:
    name: str = "default"
    seed: int = 7
    iterations: int = 3
    requests: int = 20
    request_interval_s: float = 60.0
    agents: list = field(default_factory=list)
    baseline_model: str = "gpt"
    agent_anchor: AnchorMode = field(default_factory=lambda: AnchorMode.batched(16, 1.0))
    base_dir: Path | None = None

    def __post_init__(self) -> None:
        if self.iterations < 1 or self.requests < 1:
            raise ValueError("iterations and requests must be >= 1")
        ids = [a.agent_id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ValueError("agent ids must be unique")

    @classmethod
    def from_dict(cls, cfg: Mapping, base_dir: Path | None = None) -> "Scenario":
        agents = []
        for a in cfg.get("agents", []):
            agents.append(AgentSpec(
                agent_id=str(a["id"]),
                domain=str(a["domain"]),
                series=dict(a.get("series") or {}),
                observations=a.get("observations"),
                reasoners=[ReasonerSpec(**r) for r in a.get("reasoners", [])],
            ))
        anchor_cfg = cfg.get("agent_anchor") or {}
        anchor = AnchorMode(
            anchor_cfg.get("mode", "batched"),
            int(anchor_cfg.get("batch_size", 16)),
            float(anchor_cfg.get("max_delay", 1.0)),
        )
        return cls(
            name=str(cfg.get("name", "scenario")),
            seed=int(cfg.get("seed", 7)),
            iterations=int(cfg.get("iterations", 3)),
            requests=int(cfg.get("requests", 20)),
            request_interval_s=float(cfg.get("request_interval_s", 60.0)),
            agents=agents,
            baseline_model=str(cfg.get("baseline_model", "gpt")),
            agent_anchor=anchor,
            base_dir=base_dir,
        )

    def with_overrides(self, **kw: Any) -> "Scenario":
        sc = copy.deepcopy(self)
        for k, v in kw.items():
            if v is None:
                continue
            if k == "noise":
                for a in sc.agents:
                    for r in a.reasoners:
                        r.noise = float(v)
            else:
                setattr(sc, k, v)
        sc.__post_init__()
        return sc


def load_scenario(name_or_path: str) -> Scenario:
    """A packaged scenario name (``default``, ``convergence``...) or a YAML path."""
    path = Path(name_or_path)
    if path.suffix in (".yaml", ".yml") and path.exists():
        with open(path, encoding="utf-8") as fh:
            return Scenario.from_dict(yaml.safe_load(fh) or {}, base_dir=path.parent)
    try:
        text = resources.files("trustgov.scenarios").joinpath(f"{name_or_path}.yaml").read_text("utf-8")
    except FileNotFoundError:
        raise FileNotFoundError(f"no scenario file or packaged scenario named {name_or_path!r}") from None
    return Scenario.from_dict(yaml.safe_load(text) or {})


def packaged_scenarios() -> list[str]:
    return sorted(
        p.name[:-5] for p in resources.files("trustgov.scenarios").iterdir() if p.name.endswith(".yaml")
    )


def _sub_rng(seed: int, *labels: str) -> random.Random:
    h = hashlib.sha256(repr((seed,) + labels).encode()).digest()
    return random.Random(int.from_bytes(h[:8], "big"))


def _context(series: Mapping, phase: str = "") -> dict:
    ctx = series.get(f"context{phase}") or series.get("context") or {}
    return {k: float(v) for k, v in ctx.items()}


_WEATHER_RANGES = {
    Regime.NORMAL: {"precipitation_mm": (0.0, 4.0), "temperature_c": (22.0, 32.0),
                    "temp_anomaly_c": (-2.0, 2.0), "uv_index": (3.0, 7.0)},
    Regime.RAIN: {"precipitation_mm": (5.0, 20.0), "temperature_c": (20.0, 28.0),
                  "temp_anomaly_c": (-2.0, 1.0), "uv_index": (2.0, 5.0)},
    Regime.HEAVY_RAIN: {"precipitation_mm": (40.0, 80.0), "temperature_c": (20.0, 26.0),
                        "temp_anomaly_c": (-3.0, 0.0), "uv_index": (1.0, 3.0)},
    Regime.HEATWAVE: {"precipitation_mm": (0.0, 1.0), "temperature_c": (41.0, 46.0),
                      "temp_anomaly_c": (5.0, 8.0), "uv_index": (8.5, 11.0)},
}


def weather_series(n: int, rng: random.Random, series: Mapping) -> list[dict]:
    """Weather rows following a regime schedule of [regime, count] pairs."""
    schedule = series.get("schedule") or [["Normal", n]]
    regimes: list[Regime] = []
    for label, count in schedule:
        regimes.extend([Regime(label)] * int(count))
    regimes = (regimes + [regimes[-1]] * n)[:n]
    ctx = _context(series)
    rows = []
    for reg in regimes:
        row = {col: round(rng.uniform(lo, hi), 3) for col, (lo, hi) in _WEATHER_RANGES[reg].items()}
        rows.append({**row, **ctx})
    return rows


def traffic_series(n: int, rng: random.Random, series: Mapping) -> list[dict]:
    """Vehicle counts per 100 m; congested inside the plateau window."""
    start, end = series.get("plateau", [0, n])
    lo, hi = series.get("plateau_counts", [18, 26])
    base_lo, base_hi = series.get("base_counts", [6, 14])
    ctx = _context(series)
    rows = []
    for k in range(n):
        if start <= k < end:
            count = rng.randint(int(lo), int(hi))
        else:
            count = rng.randint(int(base_lo), int(base_hi))
        rows.append({"vehicles_per_100m": float(count), **ctx})
    return rows


def fire_series(n: int, rng: random.Random, series: Mapping) -> list[dict]:
    """Hazard detections until ``transition_at``, clear afterwards."""
    switch = int(series.get("transition_at", n // 2))
    hazard_ctx = _context(series, "_hazard")
    clear_ctx = _context(series, "_clear")
    rows = []
    for k in range(n):
        if k < switch:
            rows.append({"detections": float(rng.randint(1, 4)), **hazard_ctx})
        else:
            rows.append({"detections": 0.0, **clear_ctx})
    return rows


_GENERATORS = {"weather": weather_series, "traffic": traffic_series, "fire": fire_series}


def observations_for(spec: AgentSpec, scenario: Scenario) -> list[dict]:
    profile = DEFAULT_PROFILES[spec.domain]
    if spec.observations:
        path = Path(spec.observations)
        if not path.is_absolute() and scenario.base_dir is not None:
            path = scenario.base_dir / path
        rows = read_observations(path, profile)
        if len(rows) < scenario.requests:
            raise ValueError(f"{path}: {len(rows)} rows, scenario needs {scenario.requests}")
        return rows[: scenario.requests]
    gen = _GENERATORS[spec.series.get("kind", spec.domain)]
    return gen(scenario.requests, _sub_rng(scenario.seed, "obs", spec.agent_id), spec.series)


@dataclass
class IterationReport:
    iteration: int
    mae: dict  # agent -> model -> [per-request MAE]
    selected_counts: dict  # agent -> model -> count
    fallback_activations: dict  # agent -> count
    unresolved: dict  # agent -> count
    escalation_events: list
    references: dict = field(default_factory=dict)  # agent -> [(r_ref, t_ref)]

    def mean_mae(self, agent: str, model: str) -> float:
        vals = self.mae[agent][model]
        return sum(vals) / len(vals)


@dataclass
class ConvergenceRun:
    scenario: Scenario
    reports: list
    rows: list
    node: GovernanceNode
    agents: dict
    signer: KeyedDigestSigner

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow(row)
        return buf.getvalue()


def _build(scenario: Scenario, matrix: PolicyMatrix, secret: bytes, chain_dir: Path | None,
           sora_anchor: AnchorMode, timer: StageTimer | None = None):
    signer = KeyedDigestSigner(master_secret=secret)
    signer.register("sora")
    sora_chain = Chain("sora", signer, sora_anchor,
                       path=chain_dir / "sora.chain" if chain_dir else None)
    registry = {a.agent_id: a.domain for a in scenario.agents}
    node = GovernanceNode(signer, sora_chain, registry, matrix=matrix, timer=timer)
    policy_hash = hashlib.sha256(json.dumps(matrix.to_config(), sort_keys=True).encode()).hexdigest()[:16]
    agents = {}
    for spec in scenario.agents:
        signer.register(spec.agent_id)
        reasoners = [
            StubReasoner(r.model_id, r.bias_r, r.bias_t, r.noise, r.confidence,
                         rng=_sub_rng(scenario.seed, "noise", spec.agent_id, r.model_id))
            for r in spec.reasoners
        ]
        chain = Chain(f"agent-{spec.agent_id}", signer, scenario.agent_anchor,
                      path=chain_dir / f"agent-{spec.agent_id}.chain" if chain_dir else None)
        agents[spec.agent_id] = Agent(spec.agent_id, DEFAULT_PROFILES[spec.domain], reasoners,
                                      signer, chain, policy_hash=policy_hash)
    return signer, node, agents


def run_convergence(
    scenario: Scenario,
    matrix: PolicyMatrix = policy.DEFAULT_MATRIX,
    chain_dir: str | Path | None = None,
    secret: bytes = DEFAULT_SECRET,
    sora_anchor: AnchorMode = AnchorMode.synchronous(),
) -> ConvergenceRun:
    chain_dir = Path(chain_dir) if chain_dir is not None else None
    signer, node, agents = _build(scenario, matrix, secret, chain_dir, sora_anchor)
    observations = {s.agent_id: observations_for(s, scenario) for s in scenario.agents}
    order = sorted(agents)
    reports: list[IterationReport] = []
    rows: list[dict] = []
    span = scenario.requests * scenario.request_interval_s
    for it in range(scenario.iterations):
        node.reset_reference_state()
        for a in agents.values():
            a.reset_history()
        mae = {aid: {r.model_id: [] for r in agents[aid].reasoners} for aid in order}
        selected = {aid: {r.model_id: 0 for r in agents[aid].reasoners} for aid in order}
        fallbacks = {aid: 0 for aid in order}
        unresolved = {aid: 0 for aid in order}
        refs: dict = {aid: [] for aid in order}
        esc_events = []
        iter_records: list[GovernanceDecisionRecord] = []
        t_start = it * (span + scenario.request_interval_s)
        for k in range(scenario.requests):
            now = t_start + k * scenario.request_interval_s
            for a in agents.values():
                a.chain.tick(now)
            packets = {aid: agents[aid].observe_and_report(observations[aid][k], now) for aid in order}
            records = node.process_round([packets[aid] for aid in order])
            iter_records.extend(records)
            for rec in records:
                agents[rec.agent_id].absorb_decision(rec, packets[rec.agent_id])
                if rec.kind != "decision":
                    continue
                aid = rec.agent_id
                refs[aid].append(tuple(rec.reference))
                fallbacks[aid] += int(rec.used_fallback)
                unresolved[aid] += int(not rec.resolved)
                if rec.selected_model is not None:
                    selected[aid][rec.selected_model] += 1
                for c in rec.candidates:
                    mae[aid][c["model_id"]].append(c["mae"])
                    rows.append({
                        "iteration": it, "request": k, "round": rec.round_id, "timestamp": now,
                        "agent": aid, "domain": rec.domain, "model": c["model_id"],
                        "r": c["r"], "t": c["t"], "r_ref": rec.reference[0], "t_ref": rec.reference[1],
                        "mae": c["mae"], "admitted": int(c["admitted"]), "verdict": rec.verdict,
                        "reason": rec.reason, "selected": int(c["model_id"] == rec.selected_model),
                        "fallback": int(rec.used_fallback), "resolved": int(rec.resolved),
                        "joint_actuation": int(rec.joint_actuation),
                        "city_wide_escalation": int(rec.city_wide_escalation),
                        "human_confirmation_required": int(rec.human_confirmation_required),
                        "escalation_action": rec.escalation_action,
                    })
            acts = {r.escalation_action for r in records if r.kind == "decision"}
            for act in sorted(acts - {"none"}):
                esc_events.append({"round": node.round_id - 1, "timestamp": now, "action": act})
        reports.append(IterationReport(it, mae, selected, fallbacks, unresolved, esc_events, refs))
        if it < scenario.iterations - 1:
            deltas = mean_feedback(iter_records)
            for (aid, model), d in sorted(deltas.items()):
                agents[aid].apply_feedback({model: d}, matrix.feedback_factor)
    for a in agents.values():
        a.chain.flush()
    node.chain.flush()
    return ConvergenceRun(scenario, reports, rows, node, agents, signer)


@dataclass
class PerfResult:
    requests: int
    agents: int
    span_s: float
    throughput: float
    et_s: float
    d_s: float
    et_stage_means: dict
    d_stage_means: dict
    per_request_et: list
    per_request_d: list

    def as_row(self) -> dict:
        return {
            "requests": self.requests,
            "agents": self.agents,
            "throughput_rps": self.throughput,
            "et_ms": self.et_s * 1e3,
            "d_ms": self.d_s * 1e3,
            "span_s": self.span_s,
        }


def _perf_scenario(agent_count: int, requests: int, seed: int) -> Scenario:
    domains = ["weather", "traffic", "fire"]
    bias = [(0.0, 0.0, 0.0), (0.02, -0.03, 0.01), (-0.04, 0.06, 0.01)]
    agents = []
    for i in range(agent_count):
        dom = domains[i % 3]
        agents.append(AgentSpec(
            agent_id=f"{dom}-{i}",
            domain=dom,
            series={"context": {"sensor_health": 1.2}} if dom != "fire"
            else {"transition_at": 0, "context_clear": {"sensor_health": 1.35}},
            reasoners=[ReasonerSpec(m, br, bt, nz) for m, (br, bt, nz) in zip(("gpt", "grok", "deepseek"), bias)],
        ))
    rounds = -(-requests // agent_count)
    return Scenario(name="perf", seed=seed, iterations=1, requests=rounds, agents=agents)


def run_performance(
    sizes: Sequence[int],
    agent_count: int = 3,
    seed: int = 7,
    matrix: PolicyMatrix = policy.DEFAULT_MATRIX,
    concurrent: bool = False,
) -> list[PerfResult]:
    """Measure throughput, agent execution time and governance delay per workload size.

    With ``concurrent`` the agents of each round run on a thread pool; the
    governance pipeline stays serial either way.
    """
    results = []
    for n in sizes:
        if n < 1:
            raise ValueError("workload sizes must be >= 1")
        scenario = _perf_scenario(agent_count, n, seed)
        timer = StageTimer()
        signer, node, agents = _build(scenario, matrix, DEFAULT_SECRET, None,
                                      AnchorMode.synchronous(), timer)
        observations = {s.agent_id: observations_for(s, scenario) for s in scenario.agents}
        order = sorted(agents)
        sent = 0
        k = 0
        pool = ThreadPoolExecutor(max_workers=agent_count) if concurrent else None
        t_first = time.perf_counter()
        t_last = t_first
        try:
            while sent < n:
                batch = order[: min(agent_count, n - sent)]
                now = k * scenario.request_interval_s
                for aid in batch:
                    agents[aid].chain.tick(now)

                def report(aid: str):
                    return agents[aid].observe_and_report(observations[aid][k], now, timer=timer)

                if pool is not None:
                    packets = list(pool.map(report, batch))
                else:
                    packets = [report(aid) for aid in batch]
                records = node.process_round(packets)
                t_last = time.perf_counter()
                by_agent = {p.agent_id: p for p in packets}
                for rec in records:
                    agents[rec.agent_id].absorb_decision(rec, by_agent[rec.agent_id])
                sent += len(batch)
                k += 1
        finally:
            if pool is not None:
                pool.shutdown()
        for a in agents.values():
            a.chain.flush()
        et_list, d_list = [], []
        et_stage = {s: 0.0 for s in AGENT_STAGES}
        d_stage = {s: 0.0 for s in GOVERNANCE_STAGES}
        for key, stages in timer.samples.items():
            if isinstance(key[0], str):
                et_list.append(sum(stages.get(s, 0.0) for s in AGENT_STAGES))
                for s in AGENT_STAGES:
                    et_stage[s] += stages.get(s, 0.0)
            else:
                d_list.append(sum(stages.get(s, 0.0) for s in GOVERNANCE_STAGES))
                for s in GOVERNANCE_STAGES:
                    d_stage[s] += stages.get(s, 0.0)
        span = t_last - t_first
        results.append(PerfResult(
            requests=n,
            agents=agent_count,
            span_s=span,
            throughput=n / span,
            et_s=sum(et_list) / len(et_list),
            d_s=sum(d_list) / len(d_list),
            et_stage_means={s: v / len(et_list) for s, v in et_stage.items()},
            d_stage_means={s: v / len(d_list) for s, v in d_stage.items()},
            per_request_et=et_list,
            per_request_d=d_list,
        ))
    return results


def summary_markdown(run: ConvergenceRun) -> str:
    sc = run.scenario
    lines = [f"# Convergence run: {sc.name}", "",
             f"seed {sc.seed}, {len(sc.agents)} agents, {sc.requests} requests, "
             f"{sc.iterations} iterations", ""]
    models = sorted({r.model_id for a in sc.agents for r in a.reasoners})
    lines.append("| iteration | agent | " + " | ".join(f"{m} MAE" for m in models)
                 + " | selected | fallback | unresolved |")
    lines.append("|---" * (len(models) + 5) + "|")
    for rep in run.reports:
        for aid in sorted(rep.mae):
            cells = []
            for m in models:
                cells.append(f"{rep.mean_mae(aid, m):.5f}" if m in rep.mae[aid] else "")
            sel = ", ".join(f"{m}:{c}" for m, c in sorted(rep.selected_counts[aid].items()) if c)
            lines.append(f"| {rep.iteration} | {aid} | " + " | ".join(cells)
                         + f" | {sel or '-'} | {rep.fallback_activations[aid]} | {rep.unresolved[aid]} |")
    events = [(rep.iteration, e) for rep in run.reports for e in rep.escalation_events]
    lines += ["", "## Escalation events", ""]
    if not events:
        lines.append("none")
    for it, e in events:
        lines.append(f"- iteration {it}, round {e['round']}, t={e['timestamp']:g} s: {e['action']}")
    return "\n".join(lines) + "\n"


def write_convergence_outputs(run: ConvergenceRun, out_dir: str | Path) -> dict:
    """CSV, markdown summary, metrics dump and pending confirmations."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "csv": out / "convergence.csv",
        "summary": out / "summary.md",
        "metrics": out / "metrics.json",
        "pending": out / "pending_escalations.json",
    }
    paths["csv"].write_text(run.csv_text(), encoding="utf-8")
    paths["summary"].write_text(summary_markdown(run), encoding="utf-8")
    dump = run.node.metrics_dump()
    dump["agent_chain_heights"] = {aid: a.chain.height for aid, a in sorted(run.agents.items())}
    paths["metrics"].write_text(json.dumps(dump, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    paths["pending"].write_text(json.dumps(run.node.pending_confirmations, indent=2) + "\n",
                                encoding="utf-8")
    return paths


def perf_csv(results: Sequence[PerfResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["requests", "agents", "throughput_rps", "et_ms", "d_ms", "span_s"]
                    + [f"et_{s}_ms" for s in AGENT_STAGES] + [f"d_{s}_ms" for s in GOVERNANCE_STAGES])
    for r in results:
        row = r.as_row()
        writer.writerow([row["requests"], row["agents"], row["throughput_rps"], row["et_ms"],
                         row["d_ms"], row["span_s"]]
                        + [r.et_stage_means[s] * 1e3 for s in AGENT_STAGES]
                        + [r.d_stage_means[s] * 1e3 for s in GOVERNANCE_STAGES])
    return buf.getvalue()


def perf_markdown(results: Sequence[PerfResult]) -> str:
    lines = ["| requests | agents | T (req/s) | ET (ms) | D (ms) |", "|---|---|---|---|---|"]
    for r in results:
        lines.append(f"| {r.requests} | {r.agents} | {r.throughput:.1f} | {r.et_s * 1e3:.3f} | "
                     f"{r.d_s * 1e3:.3f} |")
    return "\n".join(lines) + "\n"
