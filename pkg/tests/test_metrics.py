import math

import pytest
from hypothesis import given, settings, strategies as st

import oracles
from trustgov import metrics as m

unit = st.floats(0.0, 1.0, allow_nan=False)


def art(t, r, aid="a"):
    return m.AgentRiskTrust(aid, 0.0, 0.0, 0.0, r, 0.5, 0.5, t, 0.5)


class TestEnvRisk:
    def test_fraction_outside_band(self):
        ind = [m.Indicator(5, 5, 1), m.Indicator(9, 5, 1)]
        assert m.env_risk(continuous=ind) == 0.5

    def test_band_edge_is_inside(self):
        assert m.env_risk(continuous=[m.Indicator(6, 5, 1)]) == 0.0

    def test_capacity_is_strict(self):
        assert m.env_risk(capacity=m.CapacityObservation(10, 10)) == 0.0
        assert m.env_risk(capacity=m.CapacityObservation(10.5, 10)) == 1.0

    def test_hazard(self):
        assert m.env_risk(hazard=m.HazardObservation(0)) == 0.0
        assert m.env_risk(hazard=m.HazardObservation(3)) == 1.0

    def test_exactly_one_modality(self):
        with pytest.raises(ValueError):
            m.env_risk()
        with pytest.raises(ValueError):
            m.env_risk(capacity=m.CapacityObservation(1, 2), hazard=m.HazardObservation(1))

    def test_empty_and_invalid(self):
        with pytest.raises(ValueError):
            m.env_risk(continuous=[])
        with pytest.raises(ValueError):
            m.Indicator(1.0, 0.0, -1.0)
        with pytest.raises(ValueError):
            m.HazardObservation(-1)

    @given(st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100), st.floats(0, 50)),
                    min_size=1, max_size=8))
    def test_matches_oracle(self, triples):
        got = m.env_risk(continuous=[m.Indicator(*t) for t in triples])
        assert got == oracles.env_risk_continuous(triples)
        assert 0.0 <= got <= 1.0


class TestReputation:
    def test_examples(self):
        C = m.CandidateOutcome
        assert m.reputation_trust([C(0.5, "a", True), C(0.5, "b", False)]) == 0.5
        assert m.reputation_trust([C(0.9, "a", True), C(0.1, "b", False)]) == pytest.approx(0.9)
        assert m.reputation_trust([]) == 0.5

    def test_zero_mass(self):
        assert m.reputation_trust([m.CandidateOutcome(0.0, "a", True)]) == 0.5

    def test_rejects_bad_confidence(self):
        with pytest.raises(ValueError):
            m.CandidateOutcome(1.5, "a", True)

    @given(st.lists(st.tuples(unit, st.booleans()), max_size=6))
    def test_matches_oracle(self, pairs):
        got = m.reputation_trust([m.CandidateOutcome(c, str(i), b) for i, (c, b) in enumerate(pairs)])
        assert got == pytest.approx(oracles.reputation(pairs), abs=1e-12)
        assert 0.0 <= got <= 1.0


class TestHrt:
    def test_examples(self):
        assert m.hrt_update(0.9, 1, 0.9, is_initial=True) == 0.5
        assert m.hrt_update(0.5, 1, 0.5) == pytest.approx(0.5375)
        assert m.hrt_update(1.0, 1, 1.0) == 1.0

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            m.hrt_update(0.5, 2, 0.5)
        with pytest.raises(ValueError):
            m.hrt_update(1.2, 1, 0.5)
        with pytest.raises(ValueError):
            m.HrtParams(alpha=1.2)
        with pytest.raises(ValueError):
            m.HrtParams(delta=-0.1)

    @given(unit, st.sampled_from([0, 1]), unit, st.integers(1, 60))
    def test_geometric_convergence_closed_form(self, t0, s, rept, k):
        t = t0
        for _ in range(k):
            t = m.hrt_update(t, s, rept)
        assert t == pytest.approx(oracles.hrt_closed_form(t0, s, rept, k), abs=1e-12)


class TestServiceAndOverallRisk:
    def test_service_examples(self):
        assert m.service_risk(0.3, is_initial=True) == 0.5
        assert m.service_risk(1.0) == 0.0
        assert m.service_risk(0.5375) == pytest.approx(0.4625)

    def test_overall_examples(self):
        assert m.overall_risk(0.6, 1.0, 0.5) == pytest.approx(0.8)
        assert m.overall_risk(1.0, 0.3, 0.9) == pytest.approx(0.3)
        assert m.overall_risk(0.8, 1.0, 0.0) == pytest.approx(0.8)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            m.overall_risk(1.1, 0.5, 0.5)


class TestContextualTrust:
    def test_examples(self):
        M = m.ContextModifier
        assert m.contextual_trust(0.7) == 0.7
        assert m.contextual_trust(0.7, [M(0.5, 1)]) == pytest.approx(0.35)
        assert m.contextual_trust(0.7, [M(1.5, 2)]) == 1.0

    def test_modifier_cap(self):
        with pytest.raises(ValueError):
            m.contextual_trust(0.7, [m.ContextModifier(1.6, 1.0)])
        with pytest.raises(ValueError):
            m.ContextModifier(0.0)

    @given(st.floats(0.01, 1.0),
           st.lists(st.tuples(st.floats(0.05, 1.5), st.floats(0.0, 3.0)), max_size=4))
    def test_matches_oracle(self, t_base, mods):
        got = m.contextual_trust(t_base, [m.ContextModifier(v, w) for v, w in mods])
        assert got == pytest.approx(oracles.contextual(t_base, mods), rel=1e-12, abs=1e-12)
        assert 0.0 < got <= 1.0


class TestOverallTrust:
    def test_examples(self):
        assert m.trust_weights(0.0) == (0.5, 0.5)
        assert m.overall_trust(0.6, 0.8, 0.0) == pytest.approx(0.7)
        w = m.trust_weights(1.0)
        assert w[0] == pytest.approx(0.3) and w[1] == pytest.approx(0.7)
        assert m.overall_trust(0.0, 1.0, 1.0) == pytest.approx(0.7)

    @given(unit)
    def test_equal_components(self, r):
        assert m.overall_trust(0.65, 0.65, r) == pytest.approx(0.65, abs=1e-12)

    @given(unit)
    def test_weights_sum_to_one(self, r):
        a, b = m.trust_weights(r)
        assert a + b == pytest.approx(1.0, abs=1e-15)
        assert 0.3 - 1e-12 <= a <= 0.5


class TestEcosystem:
    def test_examples(self):
        s = m.ecosystem_metrics([art(0.6, 0.3)])
        assert (s.t_ecosystem, s.r_ecosystem) == (0.6, 0.3)
        s = m.ecosystem_metrics([art(0.6, 0.3, "a"), art(0.8, 0.9, "b")])
        assert s.t_ecosystem == pytest.approx(0.7) and s.r_ecosystem == 0.9
        assert s.active_agent_ids == {"a", "b"}
        s = m.ecosystem_metrics([art(0.5, 0.5, "a"), art(0.5, 0.5, "b")])
        assert (s.t_ecosystem, s.r_ecosystem) == (0.5, 0.5)

    def test_empty_is_error(self):
        with pytest.raises(ValueError):
            m.ecosystem_metrics([])

    @given(st.lists(st.tuples(unit, unit), min_size=1, max_size=10))
    def test_matches_oracle(self, pairs):
        s = m.ecosystem_metrics([art(t, r, str(i)) for i, (t, r) in enumerate(pairs)])
        t, r = oracles.ecosystem(pairs)
        assert s.t_ecosystem == pytest.approx(t, abs=1e-12)
        assert s.r_ecosystem == r


def test_as_dict_uses_lambda_key():
    d = art(0.5, 0.5).as_dict()
    assert d["lambda"] == 0.5 and "lam" not in d
