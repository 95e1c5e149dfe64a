"""Agent-side pipeline: observe, assess locally, query reasoners, sign, anchor."""

from __future__ import annotations

import csv
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from . import metrics
from .domains import DEFAULT_PROFILES, DomainProfile, Regime, TrustState, assess, classify_regime
from .governance import GovernanceDecisionRecord, GovernancePacket, observation_digest
from .ledger import Chain, LedgerError, Signer
from .timing import maybe_stage
from .policy import CandidateReport

__all__ = [
    "Agent",
    "AgentMessage",
    "SigningError",
    "StubReasoner",
    "apply_feedback",
    "classify_regime",
    "Regime",
    "read_observations",
]


class SigningError(RuntimeError):
    pass


@dataclass
class StubReasoner:
    """Stand-in for a candidate model: true metrics plus bias, noise and learned offset."""

    model_id: str
    bias_r: float = 0.0
    bias_t: float = 0.0
    noise: float = 0.0
    confidence: float = 1.0
    adj_r: float = 0.0
    adj_t: float = 0.0
    rng: random.Random = field(default_factory=lambda: random.Random(0), repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.noise < 0:
            raise ValueError("noise amplitude must be >= 0")

    @property
    def offset(self) -> tuple[float, float]:
        return self.bias_r + self.adj_r, self.bias_t + self.adj_t

    def emit(self, r_true: float, t_true: float) -> CandidateReport:
        nr = self.rng.uniform(-self.noise, self.noise) if self.noise else 0.0
        nt = self.rng.uniform(-self.noise, self.noise) if self.noise else 0.0
        off_r, off_t = self.offset
        return CandidateReport(
            self.model_id,
            _clip(r_true + off_r + nr),
            _clip(t_true + off_t + nt),
            self.confidence,
        )


def apply_feedback(reasoner: StubReasoner, delta_r: float, delta_t: float, factor: float = 0.5) -> StubReasoner:
    """Move the reasoner's standing offset a fraction of the way toward the reference."""
    reasoner.adj_r += factor * delta_r
    reasoner.adj_t += factor * delta_t
    return reasoner


def _clip(x: float) -> float:
    return min(1.0, max(0.0, x))


@dataclass(frozen=True)
class AgentMessage:
    aid: str
    payload: dict
    timestamp: float
    meta: dict

    def to_dict(self) -> dict:
        return {"aid": self.aid, "payload": self.payload, "timestamp": self.timestamp, "meta": self.meta}


class Agent:
    """One domain agent. Owns its HRT history, reasoners and chain handle."""

    def __init__(
        self,
        agent_id: str,
        profile: DomainProfile,
        reasoners: Sequence[StubReasoner],
        signer: Signer,
        chain: Chain,
        policy_hash: str = "",
        hrt_params: metrics.HrtParams = metrics.HrtParams(),
    ) -> None:
        if not reasoners:
            raise ValueError("an agent needs at least one reasoner")
        self.agent_id = agent_id
        self.profile = profile
        self.reasoners = list(reasoners)
        self.signer = signer
        self.chain = chain
        self.policy_hash = policy_hash
        self.hrt_params = hrt_params
        self.state = TrustState()
        self.last_metrics: metrics.AgentRiskTrust | None = None
        self._last_ts: float | None = None

    def reset_history(self) -> None:
        self.state = TrustState()

    def reasoner(self, model_id: str) -> StubReasoner:
        for r in self.reasoners:
            if r.model_id == model_id:
                return r
        raise KeyError(model_id)

    def message(self, observation: dict, timestamp: float) -> AgentMessage:
        return AgentMessage(
            aid=self.agent_id,
            payload=dict(observation),
            timestamp=timestamp,
            meta={"domain": self.profile.name, "schema": 1, "policy_hash": self.policy_hash},
        )

    def propose_action(self, art: metrics.AgentRiskTrust) -> tuple[str, tuple]:
        if art.r_env > 0:
            partners = (self.profile.partner,) if self.profile.partner else ()
            return self.profile.action, partners
        return "monitor", ()

    def observe_and_report(self, observation: dict, timestamp: float, timer=None) -> GovernancePacket:
        if self._last_ts is not None and timestamp <= self._last_ts:
            raise ValueError("agent timestamps must strictly increase")
        key = (self.agent_id, timestamp)
        with maybe_stage(timer, key, "fetch"):
            msg = self.message(observation, timestamp)
            if not self.profile.schema_ok(msg.payload):
                raise ValueError(f"observation does not match the {self.profile.name} schema")
        with maybe_stage(timer, key, "compute"):
            art, t_hrt = assess(self.profile, msg.payload, self.state, self.agent_id, timestamp,
                                self.hrt_params)
            candidates = tuple(r.emit(art.r_overall, art.t_overall) for r in self.reasoners)
            action, partners = self.propose_action(art)
            packet = GovernancePacket(
                agent_id=self.agent_id,
                domain=self.profile.name,
                timestamp=timestamp,
                observation=msg.payload,
                observation_digest=observation_digest(msg.payload),
                candidates=candidates,
                action=action,
                partners=partners,
            )
            try:
                packet = packet.signed_by(self.signer)
            except LedgerError as exc:
                raise SigningError(str(exc)) from exc
        with maybe_stage(timer, key, "agent_chain_log"):
            self.chain.append(
                {"message": msg.to_dict(), "metrics": art.as_dict(), "packet": packet.to_dict()},
                self.agent_id,
                timestamp,
            )
        self.state.t_hrt = t_hrt
        self.last_metrics = art
        self._last_ts = timestamp
        return packet

    def absorb_decision(self, record: GovernanceDecisionRecord, packet: GovernancePacket) -> None:
        """Carry this round's outcome into the next HRT update."""
        if record.kind != "decision":
            self.state.record_outcome(None, packet.candidates)
            return
        self.state.record_outcome(record.selected_model, packet.candidates)

    def apply_feedback(self, deltas: dict, factor: float = 0.5) -> None:
        for model_id, (dr, dt) in deltas.items():
            apply_feedback(self.reasoner(model_id), dr, dt, factor)


def read_observations(path: str | Path, profile: DomainProfile | None = None) -> list[dict]:
    """Per-domain observation CSV with a header row; numeric cells become floats."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: missing header row")
        for row in reader:
            obs = {}
            for k, v in row.items():
                if v is None or v == "":
                    continue
                try:
                    obs[k] = float(v)
                except ValueError:
                    obs[k] = v
            if profile is not None and not profile.schema_ok(obs):
                raise ValueError(f"{path}: row {reader.line_num} does not match {profile.name} schema")
            rows.append(obs)
    return rows


def profile_for(domain: str) -> DomainProfile:
    return DEFAULT_PROFILES[domain]


def regimes(observations: Iterable[dict]) -> list[Regime]:
    return [classify_regime(o) for o in observations]
