"""Risk and trust calculus shared by agents and the governance node.

Everything here is a pure function of its arguments. Per-agent history
(the previous round's HRT value) is owned by the caller.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Hashable, Sequence

MODIFIER_CAP = 1.5
T_REPT_INITIAL = 0.5
R_SERVICE_INITIAL = 0.5


@dataclass(frozen=True)
class Indicator:
    """One continuous signal: observed value, baseline and tolerance."""

    value: float
    baseline: float
    tolerance: float

    def __post_init__(self) -> None:
        if self.tolerance < 0:
            raise ValueError(f"tolerance must be >= 0, got {self.tolerance}")


@dataclass(frozen=True)
class CapacityObservation:
    load: float
    capacity_threshold: float

    def __post_init__(self) -> None:
        if self.load < 0:
            raise ValueError("load must be >= 0")
        if self.capacity_threshold <= 0:
            raise ValueError("capacity_threshold must be > 0")


@dataclass(frozen=True)
class HazardObservation:
    event_count: int

    def __post_init__(self) -> None:
        if self.event_count < 0:
            raise ValueError("event_count must be >= 0")


@dataclass(frozen=True)
class HrtParams:
    alpha: float = 0.5
    beta: float = 0.5
    delta: float = 0.85

    def __post_init__(self) -> None:
        for name in ("alpha", "beta", "delta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")


@dataclass(frozen=True)
class CandidateOutcome:
    confidence: float
    label: Hashable
    is_best: bool

    def __post_init__(self) -> None:
        _check_unit("confidence", self.confidence)


@dataclass(frozen=True)
class ContextModifier:
    value: float
    weight: float = 1.0

    def __post_init__(self) -> None:
        if not (0 < self.value <= MODIFIER_CAP):
            raise ValueError(f"modifier value must be in (0, {MODIFIER_CAP}], got {self.value}")
        if self.weight < 0:
            raise ValueError(f"modifier weight must be >= 0, got {self.weight}")


@dataclass(frozen=True)
class AgentRiskTrust:
    agent_id: str
    timestamp: float
    r_env: float
    r_service: float
    r_overall: float
    t_hrt: float
    t_ctx: float
    t_overall: float
    lam: float

    def as_dict(self) -> dict:
        return {
            "agent_id": self.agent_id,
            "timestamp": self.timestamp,
            "r_env": self.r_env,
            "r_service": self.r_service,
            "r_overall": self.r_overall,
            "t_hrt": self.t_hrt,
            "t_ctx": self.t_ctx,
            "t_overall": self.t_overall,
            "lambda": self.lam,
        }


@dataclass(frozen=True)
class EcosystemSnapshot:
    t_ecosystem: float
    r_ecosystem: float
    active_agent_ids: frozenset = field(default_factory=frozenset)


def _check_unit(name: str, value: float) -> None:
    if not (0.0 <= value <= 1.0):
        raise ValueError(f"{name} must be in [0, 1], got {value}")


def env_risk(
    continuous: Sequence[Indicator] | None = None,
    capacity: CapacityObservation | None = None,
    hazard: HazardObservation | None = None,
) -> float:
    """Environmental risk for exactly one observation modality.

    Continuous signals score the fraction of indicators strictly outside
    their tolerance band; capacity and hazard observations are indicators.
    """
    supplied = [m is not None for m in (continuous, capacity, hazard)]
    if sum(supplied) != 1:
        raise ValueError("exactly one modality must be supplied")
    if continuous is not None:
        if len(continuous) == 0:
            raise ValueError("continuous indicator list is empty")
        out = sum(1 for k in continuous if abs(k.value - k.baseline) > k.tolerance)
        return out / len(continuous)
    if capacity is not None:
        return 1.0 if capacity.load > capacity.capacity_threshold else 0.0
    assert hazard is not None
    return 1.0 if hazard.event_count >= 1 else 0.0


def reputation_trust(candidates: Sequence[CandidateOutcome]) -> float:
    """Confidence-weighted share of candidates that agree with the best one.

    A list with no confidence mass yields the initialisation value 0.5.
    """
    mass = sum(c.confidence for c in candidates)
    if mass == 0:
        return T_REPT_INITIAL
    agree = sum(c.confidence for c in candidates if c.is_best)
    return min(1.0, agree / mass)


def hrt_update(
    prev_t_hrt: float,
    success: int,
    t_rept: float,
    params: HrtParams = HrtParams(),
    is_initial: bool = False,
) -> float:
    if is_initial:
        return params.alpha
    _check_unit("prev_t_hrt", prev_t_hrt)
    _check_unit("t_rept", t_rept)
    if success not in (0, 1):
        raise ValueError(f"success must be 0 or 1, got {success}")
    d = params.delta
    value = d * prev_t_hrt + (1.0 - d) * (params.alpha * success + params.beta * t_rept)
    return min(1.0, max(0.0, value))


def service_risk(prev_t_hrt: float, is_initial: bool = False) -> float:
    if is_initial:
        return R_SERVICE_INITIAL
    _check_unit("prev_t_hrt", prev_t_hrt)
    return 1.0 - prev_t_hrt


def overall_risk(lam: float, r_env: float, r_service: float) -> float:
    _check_unit("lambda", lam)
    _check_unit("r_env", r_env)
    _check_unit("r_service", r_service)
    return lam * r_env + (1.0 - lam) * r_service


def contextual_trust(t_base: float, modifiers: Sequence[ContextModifier] = ()) -> float:
    """Baseline trust scaled by weighted multiplicative modifiers, capped at 1."""
    if not (0.0 < t_base <= 1.0):
        raise ValueError(f"t_base must be in (0, 1], got {t_base}")
    product = 1.0
    for m in modifiers:
        product *= m.value ** m.weight
    return min(t_base * product, 1.0)


def trust_weights(r_overall: float) -> tuple[float, float]:
    """(w_HRT, w_C) for a given overall risk; the pair always sums to 1."""
    _check_unit("r_overall", r_overall)
    w_hrt = 0.5 - 0.2 * r_overall
    return w_hrt, 1.0 - w_hrt


def overall_trust(t_hrt: float, t_ctx: float, r_overall: float) -> float:
    _check_unit("t_hrt", t_hrt)
    _check_unit("t_ctx", t_ctx)
    w_hrt, w_c = trust_weights(r_overall)
    return min(1.0, max(0.0, w_hrt * t_hrt + w_c * t_ctx))


def ecosystem_metrics(agents: Sequence[AgentRiskTrust]) -> EcosystemSnapshot:
    if not agents:
        raise ValueError("no active agents; ecosystem metrics undefined")
    t_eco = math.fsum(a.t_overall for a in agents) / len(agents)
    r_eco = max(a.r_overall for a in agents)
    return EcosystemSnapshot(
        t_ecosystem=t_eco,
        r_ecosystem=r_eco,
        active_agent_ids=frozenset(a.agent_id for a in agents),
    )
