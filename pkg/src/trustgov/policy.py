"""Stateless evaluation of the governance policy matrix.

Covers the admission gate, selection with tie-break and the fire-only
fallback, error-directed feedback, the approve/restrict/deny rule, the
per-domain triggers and the cross-agent joint actuation rule.
"""

from __future__ import annotations

import operator
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import yaml

# Absorbs representation error in computed differences (0.37 - 0.30 is
# 0.07000000000000001) without moving any printed boundary.
BOUNDARY_EPS = 1e-9

_OPS: dict[str, Callable[[float, float], bool]] = {
    ">": operator.gt,
    ">=": operator.ge,
    "<": operator.lt,
    "<=": operator.le,
}


class ConfigError(ValueError):
    """Policy matrix misconfiguration or unknown domain."""


class NoSelection(Exception):
    """No candidate passed the gate and the domain has no fallback."""


class Verdict(str, Enum):
    APPROVE = "approve"
    RESTRICT = "restrict"
    DENY = "deny"


class Reason(str, Enum):
    TRUST_BELOW_THETA = "trust-below-theta"
    LOW_TRUST_RESTRICT = "low-trust-restrict"
    HIGH_RISK_RESTRICT = "high-risk-restrict"
    CROSS_DOMAIN_VIOLATION = "cross-domain-violation"
    ADMITTED = "admitted"


@dataclass(frozen=True)
class Decision:
    verdict: Verdict
    reason: Reason


@dataclass(frozen=True)
class CandidateReport:
    model_id: str
    r: float
    t: float
    confidence: float = 1.0

    def __post_init__(self) -> None:
        for name in ("r", "t", "confidence"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")

    def as_dict(self) -> dict:
        return {"model_id": self.model_id, "r": self.r, "t": self.t, "confidence": self.confidence}


@dataclass(frozen=True)
class DomainTrigger:
    risk: float
    risk_op: str
    trust: float
    trust_op: str

    def __post_init__(self) -> None:
        if self.risk_op not in _OPS or self.trust_op not in _OPS:
            raise ConfigError(f"unsupported operator in trigger {self}")

    def evaluate(self, r: float, t: float) -> bool:
        return _OPS[self.risk_op](r, self.risk) and _OPS[self.trust_op](t, self.trust)


def _default_triggers() -> dict[str, DomainTrigger]:
    return {
        "weather": DomainTrigger(0.60, ">", 0.65, "<"),
        "traffic": DomainTrigger(0.95, ">=", 0.65, "<"),
        "fire": DomainTrigger(0.95, ">=", 0.65, ">"),
    }


_TRIGGER_IDS = {"W1": "weather", "T1": "traffic", "F1": "fire"}


@dataclass(frozen=True)
class PolicyMatrix:
    eps_r: float = 0.07
    eps_t: float = 0.05
    tau_t: Mapping[str, float] = field(
        default_factory=lambda: {"weather": 0.60, "traffic": 0.55, "fire": 0.65}
    )
    tie_tolerance: float = 0.01
    fallback_domains: frozenset = frozenset({"fire"})
    feedback_factor: float = 0.5
    theta_t: float = 0.5
    theta_r: float = 0.8
    restrict_trust: float = 0.7
    joint_risk_trigger: float = 0.80
    min_agents: int = 2
    eco_risk_trigger: float = 0.70
    eco_trust_floor: float = 0.60
    hysteresis: float = 0.05
    cooldown_s: float = 900.0
    triggers: Mapping[str, DomainTrigger] = field(default_factory=_default_triggers)

    def __post_init__(self) -> None:
        unit = [
            "eps_r", "eps_t", "tie_tolerance", "feedback_factor", "theta_t", "theta_r",
            "restrict_trust", "joint_risk_trigger", "eco_risk_trigger", "eco_trust_floor",
            "hysteresis",
        ]
        for name in unit:
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        for dom, tau in self.tau_t.items():
            if not 0.0 <= tau <= 1.0:
                raise ConfigError(f"tau_t[{dom}] must be in [0, 1], got {tau}")
        if self.cooldown_s <= 0:
            raise ConfigError("cooldown must be > 0")
        if self.min_agents < 1:
            raise ConfigError("min_agents must be >= 1")

    def tau(self, domain: str) -> float:
        try:
            return self.tau_t[domain]
        except KeyError:
            raise ConfigError(f"no trust baseline registered for domain {domain!r}") from None

    def trigger(self, domain: str) -> DomainTrigger:
        try:
            return self.triggers[domain]
        except KeyError:
            raise ConfigError(f"no trigger registered for domain {domain!r}") from None

    def to_config(self) -> dict:
        """Policy-id keyed mapping, the same shape `load_matrix` reads."""
        trig = {}
        for pid, dom in _TRIGGER_IDS.items():
            if dom in self.triggers:
                t = self.triggers[dom]
                trig[pid] = {"domain": dom, "risk": t.risk, "risk_op": t.risk_op,
                             "trust": t.trust, "trust_op": t.trust_op}
        for dom, t in self.triggers.items():
            if dom not in _TRIGGER_IDS.values():
                trig[f"X-{dom}"] = {"domain": dom, "risk": t.risk, "risk_op": t.risk_op,
                                    "trust": t.trust, "trust_op": t.trust_op}
        return {
            **trig,
            "S1": {"eps_r": self.eps_r, "eps_t": self.eps_t, "tau_t": dict(self.tau_t)},
            "S2": {"tie_tolerance": self.tie_tolerance,
                   "fallback_domains": sorted(self.fallback_domains)},
            "S3": {"feedback_factor": self.feedback_factor},
            "S4": {"joint_risk_trigger": self.joint_risk_trigger, "min_agents": self.min_agents},
            "S5": {"eco_risk_trigger": self.eco_risk_trigger,
                   "eco_trust_floor": self.eco_trust_floor},
            "S6": {"hysteresis": self.hysteresis, "cooldown_s": self.cooldown_s},
            "decision": {"theta_t": self.theta_t, "theta_r": self.theta_r,
                         "restrict_trust": self.restrict_trust},
        }


def matrix_from_config(cfg: Mapping) -> PolicyMatrix:
    kw: dict = {}
    flat = {
        "S1": ("eps_r", "eps_t", "tau_t"),
        "S2": ("tie_tolerance", "fallback_domains"),
        "S3": ("feedback_factor",),
        "S4": ("joint_risk_trigger", "min_agents"),
        "S5": ("eco_risk_trigger", "eco_trust_floor"),
        "S6": ("hysteresis", "cooldown_s"),
        "decision": ("theta_t", "theta_r", "restrict_trust"),
    }
    known = set(flat)
    for section, keys in flat.items():
        body = cfg.get(section) or {}
        unknown = set(body) - set(keys)
        if unknown:
            raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")
        kw.update({k: body[k] for k in keys if k in body})
    if "fallback_domains" in kw:
        kw["fallback_domains"] = frozenset(kw["fallback_domains"])
    if "tau_t" in kw:
        kw["tau_t"] = {str(k): float(v) for k, v in kw["tau_t"].items()}
    triggers = _default_triggers()
    for pid, body in cfg.items():
        if pid in known:
            continue
        if not isinstance(body, Mapping) or "domain" not in body:
            if pid in _TRIGGER_IDS and isinstance(body, Mapping):
                body = {**body, "domain": _TRIGGER_IDS[pid]}
            else:
                raise ConfigError(f"unrecognised policy entry {pid!r}")
        triggers[body["domain"]] = DomainTrigger(
            float(body["risk"]), body.get("risk_op", ">"),
            float(body["trust"]), body.get("trust_op", "<"),
        )
    kw["triggers"] = triggers
    try:
        return PolicyMatrix(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_matrix(path: str | Path) -> PolicyMatrix:
    with open(path, encoding="utf-8") as fh:
        cfg = yaml.safe_load(fh) or {}
    return matrix_from_config(cfg)


def dump_matrix(matrix: PolicyMatrix, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(matrix.to_config(), fh, sort_keys=False)


DEFAULT_MATRIX = PolicyMatrix()

Reference = tuple  # (r_ref, t_ref)


def mae(candidate: CandidateReport, reference: Reference) -> float:
    r_ref, t_ref = reference
    return 0.5 * (abs(candidate.r - r_ref) + abs(candidate.t - t_ref))


def admit(
    candidate: CandidateReport,
    reference: Reference,
    domain: str,
    matrix: PolicyMatrix = DEFAULT_MATRIX,
) -> bool:
    tau = matrix.tau(domain)
    r_ref, t_ref = reference
    return (
        abs(candidate.r - r_ref) <= matrix.eps_r + BOUNDARY_EPS
        and abs(candidate.t - t_ref) <= matrix.eps_t + BOUNDARY_EPS
        and candidate.t >= tau
    )


def select(
    candidates: Sequence[CandidateReport],
    reference: Reference,
    domain: str,
    matrix: PolicyMatrix = DEFAULT_MATRIX,
) -> tuple[str, bool]:
    """Pick the authoritative candidate; returns (model_id, used_fallback).

    Raises NoSelection when nothing is admitted outside a fallback domain.
    """
    if not candidates:
        raise ValueError("no candidates to select from")
    tau = matrix.tau(domain)
    r_ref = reference[0]
    admitted = [c for c in candidates if admit(c, reference, domain, matrix)]
    if admitted:
        top = max(c.t for c in admitted)
        tied = [c for c in admitted if top - c.t <= matrix.tie_tolerance + BOUNDARY_EPS]
        best = min(tied, key=lambda c: (abs(c.r - r_ref), c.model_id))
        return best.model_id, False
    if domain not in matrix.fallback_domains:
        raise NoSelection(f"no admissible candidate for domain {domain!r}")
    above = [c for c in candidates if c.t >= tau]
    if above:
        best = min(above, key=lambda c: (c.t - tau, c.model_id))
    else:
        best = min(candidates, key=lambda c: (abs(c.t - tau), c.model_id))
    return best.model_id, True


def feedback_deltas(candidate: CandidateReport, reference: Reference) -> tuple[float, float]:
    r_ref, t_ref = reference
    return r_ref - candidate.r, t_ref - candidate.t


def feedback(
    candidate: CandidateReport,
    reference: Reference,
    matrix: PolicyMatrix = DEFAULT_MATRIX,
) -> CandidateReport:
    dr, dt = feedback_deltas(candidate, reference)
    k = matrix.feedback_factor
    return replace(
        candidate,
        r=min(1.0, max(0.0, candidate.r + k * dr)),
        t=min(1.0, max(0.0, candidate.t + k * dt)),
    )


def decide(
    r: float,
    t: float,
    matrix: PolicyMatrix = DEFAULT_MATRIX,
    cross_domain_ok: bool = True,
) -> Decision:
    if not cross_domain_ok:
        return Decision(Verdict.DENY, Reason.CROSS_DOMAIN_VIOLATION)
    if t < matrix.theta_t:
        return Decision(Verdict.DENY, Reason.TRUST_BELOW_THETA)
    if t < matrix.restrict_trust:
        return Decision(Verdict.RESTRICT, Reason.LOW_TRUST_RESTRICT)
    if r > matrix.theta_r:
        return Decision(Verdict.RESTRICT, Reason.HIGH_RISK_RESTRICT)
    return Decision(Verdict.APPROVE, Reason.ADMITTED)


def domain_trigger(domain: str, r: float, t: float, matrix: PolicyMatrix = DEFAULT_MATRIX) -> bool:
    return matrix.trigger(domain).evaluate(r, t)


def joint_actuation(agents: Iterable, matrix: PolicyMatrix = DEFAULT_MATRIX) -> bool:
    high = sum(1 for a in agents if a.r_overall > matrix.joint_risk_trigger)
    return high >= matrix.min_agents


@dataclass(frozen=True)
class Action:
    name: str
    domain: str
    partners: tuple = ()


CrossDomainRule = Callable[[Action, Mapping, PolicyMatrix], "tuple[bool, str]"]


def reroute_needs_weather(action: Action, states: Mapping, matrix: PolicyMatrix) -> tuple[bool, str]:
    """Traffic rerouting is allowed only under a validated, non-alerting weather report."""
    if action.name != "reroute":
        return True, ""
    weather = states.get("weather")
    if weather is None:
        return False, "no admitted weather report this round"
    if domain_trigger("weather", weather.r_overall, weather.t_overall, matrix):
        return False, "weather advisory trigger active"
    return True, ""


DEFAULT_RULES: tuple = (reroute_needs_weather,)


def check_cross_domain(
    action: Action,
    agent_states: Mapping,
    matrix: PolicyMatrix = DEFAULT_MATRIX,
    rules: Sequence[CrossDomainRule] = DEFAULT_RULES,
) -> tuple[bool, str]:
    """(ok, violation reason). Actions without partner domains always pass."""
    if not action.partners:
        return True, ""
    for partner in action.partners:
        if partner not in agent_states:
            return False, f"missing state for partner domain {partner!r}"
    for rule in rules:
        ok, why = rule(action, agent_states, matrix)
        if not ok:
            return False, why
    return True, ""


def cross_domain_ok(
    action: Action,
    agent_states: Mapping,
    matrix: PolicyMatrix = DEFAULT_MATRIX,
    rules: Sequence[CrossDomainRule] = DEFAULT_RULES,
) -> bool:
    return check_cross_domain(action, agent_states, matrix, rules)[0]
