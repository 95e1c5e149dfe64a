"""The governance node: ingress checks, the per-round pipeline and escalation.

A round is one synchronised batch holding at most one packet per registered
agent. For every packet the node recomputes a reference (R, T) from the raw
observation, gates and selects among the candidates, issues error-directed
feedback and decides. It then evaluates the cross-agent and ecosystem rules
and anchors one record per packet on its chain.
"""

from __future__ import annotations

import json
import queue
import socketserver
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Mapping, NamedTuple, Sequence

from . import metrics, policy
from .domains import DEFAULT_PROFILES, DomainProfile, TrustState, assess
from .ledger import Chain, Signer, canonical_json, digest
from .timing import StageTimer, maybe_stage
from .policy import CandidateReport, PolicyMatrix

GOVERNANCE_STAGES = ("validate", "mae_select", "feedback", "final_decision", "sora_chain_log")


def observation_digest(observation: Mapping) -> str:
    return digest(canonical_json(dict(sorted(observation.items())))).hex()


@dataclass(frozen=True)
class GovernancePacket:
    agent_id: str
    domain: str
    timestamp: float
    observation: dict
    observation_digest: str
    candidates: tuple
    action: str = "monitor"
    partners: tuple = ()
    signature: str = ""

    def signed_fields(self) -> dict:
        return {
            "agent_id": self.agent_id,
            "domain": self.domain,
            "timestamp": self.timestamp,
            "observation": dict(sorted(self.observation.items())),
            "observation_digest": self.observation_digest,
            "candidates": [c.as_dict() for c in self.candidates],
            "action": self.action,
            "partners": list(self.partners),
        }

    def signing_bytes(self) -> bytes:
        return canonical_json(self.signed_fields())

    def signed_by(self, signer: Signer) -> "GovernancePacket":
        return replace(self, signature=signer.sign(self.agent_id, self.signing_bytes()).hex())

    def to_dict(self) -> dict:
        return {**self.signed_fields(), "signature": self.signature}

    def to_line(self) -> str:
        return json.dumps({"kind": "packet", **self.to_dict()}, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: Mapping) -> "GovernancePacket":
        return cls(
            agent_id=str(d["agent_id"]),
            domain=str(d["domain"]),
            timestamp=float(d["timestamp"]),
            observation=dict(d["observation"]),
            observation_digest=str(d["observation_digest"]),
            candidates=tuple(
                CandidateReport(str(c["model_id"]), float(c["r"]), float(c["t"]),
                                float(c.get("confidence", 1.0)))
                for c in d["candidates"]
            ),
            action=str(d.get("action", "monitor")),
            partners=tuple(d.get("partners", ())),
            signature=str(d.get("signature", "")),
        )


@dataclass
class GovernanceDecisionRecord:
    round_id: int
    kind: str  # decision | rejection | acknowledgement
    agent_id: str
    domain: str
    timestamp: float
    observation_digest: str = ""
    action: str = ""
    partner: str | None = None
    reference: tuple | None = None
    candidates: list = field(default_factory=list)
    selected_model: str | None = None
    used_fallback: bool = False
    resolved: bool = False
    verdict: str | None = None
    reason: str | None = None
    violation: str = ""
    feedback: dict = field(default_factory=dict)
    joint_actuation: bool = False
    city_wide_escalation: bool = False
    human_confirmation_required: bool = False
    escalation_action: str = "none"
    ecosystem: tuple | None = None

    def to_dict(self) -> dict:
        return {
            "round_id": self.round_id,
            "kind": self.kind,
            "agent_id": self.agent_id,
            "domain": self.domain,
            "timestamp": self.timestamp,
            "observation_digest": self.observation_digest,
            "action": self.action,
            "partner": self.partner,
            "reference": list(self.reference) if self.reference is not None else None,
            "candidates": self.candidates,
            "selected_model": self.selected_model,
            "used_fallback": self.used_fallback,
            "resolved": self.resolved,
            "verdict": self.verdict,
            "reason": self.reason,
            "violation": self.violation,
            "feedback": {k: list(v) for k, v in self.feedback.items()},
            "joint_actuation": self.joint_actuation,
            "city_wide_escalation": self.city_wide_escalation,
            "human_confirmation_required": self.human_confirmation_required,
            "escalation_action": self.escalation_action,
            "ecosystem": list(self.ecosystem) if self.ecosystem is not None else None,
        }

    def digest(self) -> bytes:
        return digest(canonical_json(self.to_dict()))

    def to_line(self) -> str:
        return json.dumps({"kind_": "decision", **self.to_dict()}, separators=(",", ":"))


@dataclass(frozen=True)
class EscalationState:
    active: bool = False
    last_transition_time: float | None = None
    trigger_metric_at_activation: float | None = None


def escalation_step(
    state: EscalationState,
    r_eco: float,
    t_eco: float,
    now: float,
    matrix: PolicyMatrix = policy.DEFAULT_MATRIX,
) -> tuple[EscalationState, str]:
    """Advance the city-wide escalation controller by one observation.

    Activation happens above the ecosystem risk trigger; deactivation only
    below trigger minus the hysteresis band. Any transition inside the
    cooldown window is suppressed and leaves the state untouched.
    """
    last = state.last_transition_time
    if last is not None and now < last:
        raise ValueError("clock went backwards")
    cooling = last is not None and now - last < matrix.cooldown_s
    if not state.active:
        if r_eco > matrix.eco_risk_trigger and not cooling:
            action = "escalate" if t_eco >= matrix.eco_trust_floor else "escalate-needs-human"
            return EscalationState(True, now, r_eco), action
        return state, "none"
    if r_eco < matrix.eco_risk_trigger - matrix.hysteresis and not cooling:
        return EscalationState(False, now, None), "deactivate"
    return state, "none"


class DomainState(NamedTuple):
    r_overall: float
    t_overall: float


class GovernanceNode:
    def __init__(
        self,
        signer: Signer,
        chain: Chain,
        registry: Mapping[str, str],
        matrix: PolicyMatrix = policy.DEFAULT_MATRIX,
        profiles: Mapping[str, DomainProfile] = DEFAULT_PROFILES,
        author_id: str = "sora",
        hrt_params: metrics.HrtParams = metrics.HrtParams(),
        cross_domain_rules: Sequence = policy.DEFAULT_RULES,
        timer: StageTimer | None = None,
    ) -> None:
        self.signer = signer
        self.chain = chain
        self.registry = dict(registry)
        self.matrix = matrix
        self.profiles = dict(profiles)
        self.author_id = author_id
        self.hrt_params = hrt_params
        self.rules = tuple(cross_domain_rules)
        self.timer = timer
        self.escalation = EscalationState()
        self.round_id = 0
        self.gov_decisions: list[GovernanceDecisionRecord] = []
        self.snapshots: list[metrics.EcosystemSnapshot] = []
        self.pending_confirmations: list[dict] = []
        self.counts: dict = defaultdict(int)
        self._trust: dict[str, TrustState] = {}
        self._last_ts: dict[str, float] = {}

    def reset_reference_state(self) -> None:
        """Forget per-agent HRT history (start of a replayed request sequence)."""
        self._trust.clear()

    def trust_state(self, agent_id: str) -> TrustState:
        return self._trust.setdefault(agent_id, TrustState())

    def verify_packet(self, packet: GovernancePacket) -> tuple[bool, str]:
        domain = self.registry.get(packet.agent_id)
        if domain is None:
            return False, "unregistered agent"
        if domain != packet.domain:
            return False, "agent not authorised for domain"
        if not self.signer.verify(packet.agent_id, packet.signing_bytes(),
                                  bytes.fromhex(packet.signature) if _is_hex(packet.signature) else b""):
            return False, "bad signature"
        if observation_digest(packet.observation) != packet.observation_digest:
            return False, "observation digest mismatch"
        if not packet.candidates:
            return False, "no candidates"
        profile = self.profiles.get(packet.domain)
        if profile is None or not profile.schema_ok(packet.observation):
            return False, "observation schema"
        if packet.domain not in self.matrix.tau_t:
            return False, "no trust baseline for domain"
        last = self._last_ts.get(packet.agent_id)
        if last is not None and packet.timestamp < last:
            return False, "timestamp regressed"
        return True, ""

    def compute_reference(self, observation: Mapping, domain: str, agent_id: str,
                          timestamp: float = 0.0, commit: bool = False) -> metrics.AgentRiskTrust:
        profile = self.profiles[domain]
        state = self.trust_state(agent_id)
        art, t_hrt = assess(profile, dict(observation), state, agent_id, timestamp, self.hrt_params)
        if commit:
            state.t_hrt = t_hrt
        return art

    def process_round(self, packets: Sequence[GovernancePacket]) -> list[GovernanceDecisionRecord]:
        rid = self.round_id
        self.round_id += 1
        self.counts["rounds"] += 1
        timer = self.timer
        records: list[GovernanceDecisionRecord] = []
        valid: list[GovernancePacket] = []
        seen: set = set()
        for p in packets:
            with maybe_stage(timer, (rid, p.agent_id), "validate"):
                ok, why = self.verify_packet(p)
                if ok and p.agent_id in seen:
                    ok, why = False, "duplicate packet in round"
            self.counts["packets"] += 1
            if not ok:
                self.counts["rejected"] += 1
                records.append(GovernanceDecisionRecord(
                    round_id=rid, kind="rejection", agent_id=p.agent_id, domain=p.domain,
                    timestamp=p.timestamp, observation_digest=p.observation_digest,
                    action=p.action, reason=why,
                ))
                continue
            seen.add(p.agent_id)
            valid.append(p)
        valid.sort(key=lambda p: p.agent_id)

        refs: dict[str, metrics.AgentRiskTrust] = {}
        selections: dict[str, tuple] = {}
        admitted_states: dict[str, DomainState] = {}
        pending: dict[str, GovernanceDecisionRecord] = {}
        for p in valid:
            key = (rid, p.agent_id)
            with maybe_stage(timer, key, "mae_select"):
                ref = self.compute_reference(p.observation, p.domain, p.agent_id, p.timestamp, commit=True)
                reference = (ref.r_overall, ref.t_overall)
                cand_rows = [
                    {**c.as_dict(), "mae": policy.mae(c, reference),
                     "admitted": policy.admit(c, reference, p.domain, self.matrix)}
                    for c in p.candidates
                ]
                try:
                    selected, fallback = policy.select(p.candidates, reference, p.domain, self.matrix)
                except policy.NoSelection:
                    selected, fallback = None, False
            with maybe_stage(timer, key, "feedback"):
                fb = {}
                for c in p.candidates:
                    if c.model_id == selected and not fallback:
                        continue
                    fb[c.model_id] = policy.feedback_deltas(c, reference)
            refs[p.agent_id] = ref
            selections[p.agent_id] = (selected, fallback)
            if selected is not None and not fallback:
                sel = next(c for c in p.candidates if c.model_id == selected)
                admitted_states[p.domain] = DomainState(sel.r, sel.t)
            self.counts["fallbacks"] += int(fallback)
            self.counts["unresolved"] += int(selected is None)
            pending[p.agent_id] = GovernanceDecisionRecord(
                round_id=rid, kind="decision", agent_id=p.agent_id, domain=p.domain,
                timestamp=p.timestamp, observation_digest=p.observation_digest,
                action=p.action, partner=p.partners[0] if p.partners else None,
                reference=reference, candidates=cand_rows, selected_model=selected,
                used_fallback=fallback, resolved=selected is not None, feedback=fb,
            )

        for p in valid:
            key = (rid, p.agent_id)
            with maybe_stage(timer, key, "final_decision"):
                rec = pending[p.agent_id]
                selected, _ = selections[p.agent_id]
                if selected is not None:
                    sel = next(c for c in p.candidates if c.model_id == selected)
                    r_dec, t_dec = sel.r, sel.t
                else:
                    r_dec, t_dec = rec.reference
                act = policy.Action(p.action, p.domain, tuple(p.partners))
                ok, why = policy.check_cross_domain(act, admitted_states, self.matrix, self.rules)
                decision = policy.decide(r_dec, t_dec, self.matrix, cross_domain_ok=ok)
                rec.verdict = decision.verdict.value
                rec.reason = decision.reason.value
                rec.violation = why
                self.trust_state(p.agent_id).record_outcome(selected, p.candidates)
                self._last_ts[p.agent_id] = p.timestamp

        if valid:
            t0 = time.perf_counter()
            snap = metrics.ecosystem_metrics([refs[p.agent_id] for p in valid])
            joint = policy.joint_actuation(refs.values(), self.matrix)
            now = max(p.timestamp for p in valid)
            self.escalation, esc_action = escalation_step(
                self.escalation, snap.r_ecosystem, snap.t_ecosystem, now, self.matrix
            )
            needs_human = self.escalation.active and snap.t_ecosystem < self.matrix.eco_trust_floor
            self.snapshots.append(snap)
            self.counts["joint_actuations"] += int(joint)
            if esc_action != "none":
                self.counts[f"escalation_{esc_action}"] += 1
            for p in valid:
                rec = pending[p.agent_id]
                rec.joint_actuation = joint
                rec.city_wide_escalation = self.escalation.active
                rec.human_confirmation_required = needs_human
                rec.escalation_action = esc_action
                rec.ecosystem = (snap.t_ecosystem, snap.r_ecosystem)
                records.append(rec)
            if esc_action == "escalate-needs-human":
                self.pending_confirmations.append({
                    "round_id": rid,
                    "timestamp": now,
                    "r_ecosystem": snap.r_ecosystem,
                    "t_ecosystem": snap.t_ecosystem,
                    "token": digest(canonical_json([rid, now, snap.r_ecosystem]))[:4].hex(),
                })
            if timer is not None:
                share = (time.perf_counter() - t0) / len(valid)
                for p in valid:
                    timer.add((rid, p.agent_id), "final_decision", share)

        for rec in records:
            with maybe_stage(timer, (rid, rec.agent_id), "sora_chain_log"):
                self.chain.append(rec.to_dict(), self.author_id, rec.timestamp)
            self.gov_decisions.append(rec)
        return records

    def acknowledge(self, token: str, now: float) -> GovernanceDecisionRecord | None:
        for i, item in enumerate(self.pending_confirmations):
            if item["token"] == token:
                del self.pending_confirmations[i]
                rec = acknowledgement_record(item, now)
                self.chain.append(rec.to_dict(), self.author_id, now)
                self.gov_decisions.append(rec)
                return rec
        return None

    def metrics_dump(self) -> dict:
        out = {"counts": dict(sorted(self.counts.items())), "chain_height": self.chain.height}
        if self.timer is not None:
            out["stage_seconds"] = {k: v for k, v in sorted(self.timer.totals().items())}
        return out


def acknowledgement_record(pending: Mapping, now: float) -> GovernanceDecisionRecord:
    """Record of a human confirming an escalation that was awaiting it."""
    return GovernanceDecisionRecord(
        round_id=pending["round_id"], kind="acknowledgement", agent_id="human-operator",
        domain="ecosystem", timestamp=now, action="confirm-escalation",
        verdict="approve", reason="human-confirmed",
    )


def _is_hex(s: str) -> bool:
    try:
        bytes.fromhex(s)
    except ValueError:
        return False
    return True


END_ROUND = {"kind": "end_round"}


def serve_lines(node: GovernanceNode, lines: Iterable[str]) -> Iterator[str]:
    """Run the node over a line-delimited JSON stream.

    Input lines are ``{"kind": "packet", ...}`` or ``{"kind": "end_round"}``;
    end of input closes any open round. Output is one JSON object per
    decision record. Malformed lines yield an ``{"kind_": "error"}`` line.
    """
    batch: list[GovernancePacket] = []
    for line in lines:
        line = line.strip()
        if not line:
            continue
        try:
            msg = json.loads(line)
            kind = msg.get("kind")
            if kind == "packet":
                batch.append(GovernancePacket.from_dict(msg))
                continue
            if kind != "end_round":
                raise ValueError(f"unknown message kind {kind!r}")
        except (ValueError, KeyError, TypeError) as exc:
            yield json.dumps({"kind_": "error", "error": str(exc)})
            continue
        for rec in node.process_round(batch):
            yield rec.to_line()
        batch = []
    if batch:
        for rec in node.process_round(batch):
            yield rec.to_line()


def run_queue(node: GovernanceNode, inbox: "queue.Queue", outbox: "queue.Queue") -> None:
    """Consume packets and END_ROUND markers from ``inbox`` until ``None``."""
    batch: list[GovernancePacket] = []
    while True:
        item = inbox.get()
        if item is None or item == END_ROUND:
            if batch:
                for rec in node.process_round(batch):
                    outbox.put(rec)
                batch = []
            if item is None:
                outbox.put(None)
                return
            continue
        batch.append(item)


class _StreamHandler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        server = self.server
        lines = (raw.decode("utf-8") for raw in self.rfile)
        with server.node_lock:  # type: ignore[attr-defined]
            for out in serve_lines(server.node, lines):  # type: ignore[attr-defined]
                self.wfile.write(out.encode("utf-8") + b"\n")
                self.wfile.flush()


class GovernanceSocketServer(socketserver.ThreadingMixIn, socketserver.UnixStreamServer):
    """Local Unix-socket endpoint speaking the line-delimited packet format.

    Connections are accepted concurrently, but the pipeline itself is held
    by one connection at a time.
    """

    daemon_threads = True

    def __init__(self, path: str, node: GovernanceNode) -> None:
        self.node = node
        self.node_lock = threading.Lock()
        super().__init__(path, _StreamHandler)


def mean_feedback(records: Iterable[GovernanceDecisionRecord]) -> dict:
    """Average (dR, dT) per (agent, model) over a set of decision records."""
    sums: dict = defaultdict(lambda: [0.0, 0.0, 0])
    for rec in records:
        for model, (dr, dt) in rec.feedback.items():
            acc = sums[(rec.agent_id, model)]
            acc[0] += dr
            acc[1] += dt
            acc[2] += 1
    return {k: (v[0] / v[2], v[1] / v[2]) for k, v in sums.items()}

