import pytest

from trustgov.agents import Agent, StubReasoner
from trustgov.domains import DEFAULT_PROFILES
from trustgov.governance import GovernanceNode
from trustgov.ledger import AnchorMode, Chain, KeyedDigestSigner

SECRET = b"unit-test-secret"

WEATHER_OBS = {"precipitation_mm": 2.0, "temperature_c": 27.0, "temp_anomaly_c": 0.5,
               "uv_index": 5.0, "sensor_health": 1.1}
TRAFFIC_OBS = {"vehicles_per_100m": 20.0, "sensor_health": 1.15}
FIRE_OBS = {"detections": 0.0, "sensor_health": 1.3}


class World:
    """Signer, governance node and one agent per domain, all in memory."""

    def __init__(self, biases=None, noise=0.0, agent_mode=AnchorMode.batched(16, 1.0)):
        self.signer = KeyedDigestSigner(master_secret=SECRET)
        self.signer.register("sora")
        registry = {"weather-1": "weather", "traffic-1": "traffic", "fire-1": "fire"}
        self.node = GovernanceNode(self.signer, Chain("sora", self.signer), registry)
        self.agents = {}
        biases = biases or {}
        for aid, dom in registry.items():
            self.signer.register(aid)
            reasoners = [StubReasoner(m, *biases.get((aid, m), (0.0, 0.0)), noise=noise)
                         for m in ("gpt", "grok", "deepseek")]
            self.agents[aid] = Agent(aid, DEFAULT_PROFILES[dom], reasoners, self.signer,
                                     Chain(f"agent-{aid}", self.signer, agent_mode))

    def packets(self, ts, obs=None):
        obs = obs or {"weather-1": WEATHER_OBS, "traffic-1": TRAFFIC_OBS, "fire-1": FIRE_OBS}
        return [self.agents[a].observe_and_report(o, ts) for a, o in sorted(obs.items())]


@pytest.fixture
def world():
    return World()


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
