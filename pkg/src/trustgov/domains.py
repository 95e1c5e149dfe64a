"""Domain profiles: how a raw observation maps onto the metric inputs.

Observations are flat dicts (one CSV row). Column names per domain:

    weather: precipitation_mm, temperature_c, temp_anomaly_c, uv_index
    traffic: vehicles_per_100m
    fire:    detections

Any domain may also carry the context columns sensor_health, integrity and
freshness; each present column becomes a multiplicative trust modifier.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from . import metrics

CONTEXT_COLUMNS = ("sensor_health", "integrity", "freshness")


class Regime(str, Enum):
    NORMAL = "Normal"
    RAIN = "Rain"
    HEAVY_RAIN = "HeavyRain"
    HEATWAVE = "Heatwave"


@dataclass(frozen=True)
class WeatherBands:
    heavy_rain_mm: float = 40.0
    rain_low_mm: float = 5.0
    rain_high_mm: float = 20.0
    heat_temp_c: float = 40.0
    heat_anomaly_c: float = 5.0
    heat_uv: float = 8.0
    precedence: tuple = (Regime.HEAVY_RAIN, Regime.HEATWAVE, Regime.RAIN)


def classify_regime(obs: dict, bands: WeatherBands = WeatherBands()) -> Regime:
    precip = float(obs["precipitation_mm"])
    if precip < 0:
        raise ValueError(f"negative precipitation: {precip}")
    temp = float(obs["temperature_c"])
    anomaly = float(obs.get("temp_anomaly_c", 0.0))
    uv = float(obs.get("uv_index", 0.0))
    hits = {
        Regime.HEAVY_RAIN: precip >= bands.heavy_rain_mm,
        Regime.HEATWAVE: temp >= bands.heat_temp_c
        or (anomaly >= bands.heat_anomaly_c and uv >= bands.heat_uv),
        Regime.RAIN: bands.rain_low_mm <= precip <= bands.rain_high_mm,
    }
    for regime in bands.precedence:
        if hits[regime]:
            return regime
    return Regime.NORMAL


@dataclass(frozen=True)
class IndicatorSpec:
    column: str
    baseline: float
    tolerance: float


@dataclass(frozen=True)
class DomainProfile:
    name: str
    lam: float
    modality: str  # continuous | capacity | hazard
    indicators: tuple = ()
    capacity_column: str = "vehicles_per_100m"
    capacity_threshold: float = 15.0
    hazard_column: str = "detections"
    t_base: float = 0.7
    modifier_weights: dict = field(default_factory=lambda: {c: 1.0 for c in CONTEXT_COLUMNS})
    action: str = "monitor"
    partner: str | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")
        if self.modality not in ("continuous", "capacity", "hazard"):
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.modality == "continuous" and not self.indicators:
            raise ValueError("continuous profile needs indicators")
        if self.capacity_threshold <= 0:
            raise ValueError("capacity_threshold must be positive")

    def env_risk(self, obs: dict) -> float:
        if self.modality == "continuous":
            signals = [
                metrics.Indicator(float(obs[i.column]), i.baseline, i.tolerance)
                for i in self.indicators
            ]
            return metrics.env_risk(continuous=signals)
        if self.modality == "capacity":
            return metrics.env_risk(
                capacity=metrics.CapacityObservation(
                    float(obs[self.capacity_column]), self.capacity_threshold
                )
            )
        return metrics.env_risk(hazard=metrics.HazardObservation(int(obs[self.hazard_column])))

    def modifiers(self, obs: dict) -> list[metrics.ContextModifier]:
        out = []
        for col in CONTEXT_COLUMNS:
            if obs.get(col) not in (None, ""):
                out.append(metrics.ContextModifier(float(obs[col]), self.modifier_weights.get(col, 1.0)))
        return out

    def schema_ok(self, obs: dict) -> bool:
        required = {
            "continuous": [i.column for i in self.indicators],
            "capacity": [self.capacity_column],
            "hazard": [self.hazard_column],
        }[self.modality]
        try:
            for col in required:
                float(obs[col])
            self.env_risk(obs)
            self.modifiers(obs)
        except (KeyError, TypeError, ValueError):
            return False
        return True


WEATHER = DomainProfile(
    name="weather",
    lam=0.6,
    modality="continuous",
    indicators=(
        IndicatorSpec("precipitation_mm", 0.0, 20.0),
        IndicatorSpec("temperature_c", 25.0, 15.0),
        IndicatorSpec("temp_anomaly_c", 0.0, 5.0),
        IndicatorSpec("uv_index", 5.0, 3.0),
    ),
    action="advisory",
)
TRAFFIC = DomainProfile(
    name="traffic",
    lam=0.7,
    modality="capacity",
    capacity_threshold=15.0,
    action="reroute",
    partner="weather",
)
FIRE = DomainProfile(name="fire", lam=0.8, modality="hazard", action="dispatch")

DEFAULT_PROFILES = {p.name: p for p in (WEATHER, TRAFFIC, FIRE)}


@dataclass
class TrustState:
    """Per-agent history needed to advance HRT from one round to the next.

    ``t_hrt`` is None until the first assessment. ``success`` and ``t_rept``
    hold the outcome of the most recent governance round for this agent.
    """

    t_hrt: float | None = None
    success: int = 0
    t_rept: float = metrics.T_REPT_INITIAL

    def record_outcome(self, selected_model: str | None, candidates) -> None:
        self.success = 1 if selected_model is not None else 0
        self.t_rept = metrics.reputation_trust(
            [metrics.CandidateOutcome(c.confidence, c.model_id, c.model_id == selected_model)
             for c in candidates]
        )


def assess(
    profile: DomainProfile,
    obs: dict,
    state: TrustState,
    agent_id: str,
    timestamp: float,
    params: metrics.HrtParams = metrics.HrtParams(),
) -> tuple[metrics.AgentRiskTrust, float]:
    """Full metric vector for one observation, plus the T_HRT to carry forward.

    The caller decides whether to commit the returned T_HRT into ``state``.
    """
    initial = state.t_hrt is None
    prev = params.alpha if initial else state.t_hrt
    r_service = metrics.service_risk(prev, is_initial=initial)
    t_hrt = metrics.hrt_update(prev, state.success, state.t_rept, params, is_initial=initial)
    r_env = profile.env_risk(obs)
    r = metrics.overall_risk(profile.lam, r_env, r_service)
    t_ctx = metrics.contextual_trust(profile.t_base, profile.modifiers(obs))
    t = metrics.overall_trust(t_hrt, t_ctx, r)
    art = metrics.AgentRiskTrust(
        agent_id=agent_id, timestamp=timestamp, r_env=r_env, r_service=r_service,
        r_overall=r, t_hrt=t_hrt, t_ctx=t_ctx, t_overall=t, lam=profile.lam,
    )
    return art, t_hrt
