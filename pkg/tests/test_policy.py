import itertools

import pytest
import yaml
from hypothesis import given, strategies as st

from trustgov import policy as p
from trustgov.metrics import AgentRiskTrust

C = p.CandidateReport
M = p.DEFAULT_MATRIX
unit = st.floats(0.0, 1.0, allow_nan=False)


def agent(r, t=0.7, aid="a"):
    return AgentRiskTrust(aid, 0.0, 0.0, 0.0, r, 0.5, 0.5, t, 0.5)


def test_mae_examples():
    assert p.mae(C("a", 0.3, 0.7), (0.3, 0.7)) == 0
    assert p.mae(C("a", 0.2, 0.6), (0.3, 0.7)) == pytest.approx(0.1)
    assert p.mae(C("a", 1.0, 0.0), (0.0, 1.0)) == 1.0


class TestAdmit:
    def test_inclusive_bounds(self):
        assert p.admit(C("a", 0.37, 0.70), (0.30, 0.65), "fire")
        assert p.admit(C("a", 0.23, 0.65), (0.30, 0.70), "fire")

    def test_just_outside(self):
        assert not p.admit(C("a", 0.3701, 0.70), (0.30, 0.70), "fire")
        assert not p.admit(C("a", 0.30, 0.7501), (0.30, 0.70), "fire")

    def test_domain_floor(self):
        assert not p.admit(C("a", 0.3, 0.59), (0.3, 0.59), "weather")
        assert p.admit(C("a", 0.3, 0.60), (0.3, 0.60), "weather")

    def test_unknown_domain(self):
        with pytest.raises(p.ConfigError):
            p.admit(C("a", 0.3, 0.7), (0.3, 0.7), "water")

    @given(unit, unit, unit, unit, st.sampled_from(["weather", "traffic", "fire"]))
    def test_matches_predicate(self, r, t, rr, tr, dom):
        expected = abs(r - rr) <= 0.07 + 1e-9 and abs(t - tr) <= 0.05 + 1e-9 and t >= M.tau(dom)
        assert p.admit(C("a", r, t), (rr, tr), dom) == expected


class TestSelect:
    def test_unique_max(self):
        cands = [C("a", 0.3, 0.70), C("b", 0.3, 0.80), C("c", 0.3, 0.75)]
        ref = (0.3, 0.75)
        assert p.select(cands, ref, "weather") == ("b", False)

    def test_tie_band_prefers_small_delta_r(self):
        cands = [C("a", 0.32, 0.700), C("b", 0.31, 0.705)]
        assert p.select(cands, (0.30, 0.70), "weather") == ("b", False)
        cands = [C("a", 0.31, 0.700), C("b", 0.32, 0.705)]
        assert p.select(cands, (0.30, 0.70), "weather") == ("a", False)

    def test_exact_tie_by_model_id(self):
        cands = [C("z", 0.31, 0.70), C("m", 0.31, 0.70)]
        assert p.select(cands, (0.30, 0.70), "weather") == ("m", False)
        assert p.select(list(reversed(cands)), (0.30, 0.70), "weather") == ("m", False)

    def test_fire_fallback_nearest_above(self):
        cands = [C("a", 0.3, 0.60), C("b", 0.3, 0.66), C("c", 0.3, 0.70)]
        assert p.select(cands, (0.9, 0.1), "fire") == ("b", True)

    def test_fire_fallback_nearest_overall(self):
        cands = [C("a", 0.3, 0.40), C("b", 0.3, 0.62), C("c", 0.3, 0.50)]
        assert p.select(cands, (0.9, 0.1), "fire") == ("b", True)

    def test_no_fallback_elsewhere(self):
        cands = [C("a", 0.9, 0.1)]
        for dom in ("weather", "traffic"):
            with pytest.raises(p.NoSelection):
                p.select(cands, (0.1, 0.9), dom)

    def test_empty(self):
        with pytest.raises(ValueError):
            p.select([], (0.1, 0.9), "fire")

    @given(st.lists(st.tuples(unit, unit), min_size=1, max_size=5), unit, unit,
           st.sampled_from(["weather", "traffic", "fire"]))
    def test_gate_soundness_and_determinism(self, pairs, rr, tr, dom):
        cands = [C(f"m{i}", r, t) for i, (r, t) in enumerate(pairs)]
        try:
            chosen, fb = p.select(cands, (rr, tr), dom)
        except p.NoSelection:
            assert dom != "fire"
            assert not any(p.admit(c, (rr, tr), dom) for c in cands)
            return
        assert p.select(cands, (rr, tr), dom) == (chosen, fb)
        c = next(c for c in cands if c.model_id == chosen)
        if fb:
            assert dom == "fire"
            assert not any(p.admit(x, (rr, tr), dom) for x in cands)
        else:
            assert p.admit(c, (rr, tr), dom)


class TestFeedback:
    def test_examples(self):
        out = p.feedback(C("a", 0.2, 0.6), (0.3, 0.7))
        assert (out.r, out.t) == (pytest.approx(0.25), pytest.approx(0.65))
        same = C("a", 0.3, 0.7)
        assert p.feedback(same, (0.3, 0.7)) == same
        assert p.feedback(C("a", 0.0, 0.95), (0.0, 1.0)).t == pytest.approx(0.975)

    @given(unit, unit, unit, unit)
    def test_contraction(self, r, t, rr, tr):
        c = C("a", r, t)
        after = p.mae(p.feedback(c, (rr, tr)), (rr, tr))
        assert after == pytest.approx(0.5 * p.mae(c, (rr, tr)), abs=1e-12)


class TestDecide:
    def test_examples(self):
        assert p.decide(0.2, 0.45).verdict == p.Verdict.DENY
        d = p.decide(0.2, 0.69)
        assert (d.verdict, d.reason) == (p.Verdict.RESTRICT, p.Reason.LOW_TRUST_RESTRICT)
        assert p.decide(0.3, 0.9).verdict == p.Verdict.APPROVE
        assert p.decide(0.81, 0.9).reason == p.Reason.HIGH_RISK_RESTRICT
        d = p.decide(0.1, 0.99, cross_domain_ok=False)
        assert (d.verdict, d.reason) == (p.Verdict.DENY, p.Reason.CROSS_DOMAIN_VIOLATION)

    @given(unit, unit, st.floats(0, 0.3))
    def test_monotone(self, r, t, bump):
        order = {p.Verdict.DENY: 0, p.Verdict.RESTRICT: 1, p.Verdict.APPROVE: 2}
        base = order[p.decide(r, t).verdict]
        assert order[p.decide(r, min(1.0, t + bump)).verdict] >= base
        assert order[p.decide(min(1.0, r + bump), t).verdict] <= base

    def test_reason_matches_verdict(self):
        pairs = {
            p.Reason.TRUST_BELOW_THETA: p.Verdict.DENY,
            p.Reason.CROSS_DOMAIN_VIOLATION: p.Verdict.DENY,
            p.Reason.LOW_TRUST_RESTRICT: p.Verdict.RESTRICT,
            p.Reason.HIGH_RISK_RESTRICT: p.Verdict.RESTRICT,
            p.Reason.ADMITTED: p.Verdict.APPROVE,
        }
        for r, t in itertools.product([i / 20 for i in range(21)], repeat=2):
            d = p.decide(r, t)
            assert pairs[d.reason] == d.verdict


class TestTriggers:
    def test_examples(self):
        assert p.domain_trigger("weather", 0.61, 0.64)
        assert not p.domain_trigger("traffic", 0.95, 0.65)
        assert p.domain_trigger("fire", 0.95, 0.66)

    def test_unknown_domain(self):
        with pytest.raises(p.ConfigError):
            p.domain_trigger("water", 0.9, 0.1)

    @given(unit, unit)
    def test_match_printed_predicates(self, r, t):
        assert p.domain_trigger("weather", r, t) == (r > 0.60 and t < 0.65)
        assert p.domain_trigger("traffic", r, t) == (r >= 0.95 and t < 0.65)
        assert p.domain_trigger("fire", r, t) == (r >= 0.95 and t > 0.65)


class TestJointActuation:
    def test_examples(self):
        assert p.joint_actuation([agent(0.85), agent(0.82), agent(0.1)])
        assert not p.joint_actuation([agent(0.85), agent(0.80)])
        assert not p.joint_actuation([agent(0.99)])

    @given(st.lists(unit, max_size=6))
    def test_count_rule(self, risks):
        assert p.joint_actuation([agent(r) for r in risks]) == (sum(r > 0.8 for r in risks) >= 2)


class TestCrossDomain:
    def test_reroute_with_quiet_weather(self):
        act = p.Action("reroute", "traffic", ("weather",))
        assert p.cross_domain_ok(act, {"weather": agent(0.2, 0.8)})

    def test_reroute_with_w1_active(self):
        act = p.Action("reroute", "traffic", ("weather",))
        ok, why = p.check_cross_domain(act, {"weather": agent(0.7, 0.6)})
        assert not ok and "trigger" in why

    def test_missing_partner(self):
        act = p.Action("reroute", "traffic", ("weather",))
        ok, why = p.check_cross_domain(act, {})
        assert not ok and "weather" in why

    def test_no_partner(self):
        assert p.cross_domain_ok(p.Action("advisory", "weather"), {})

    def test_custom_rule(self):
        def never(action, states, matrix):
            return False, "blocked"
        act = p.Action("dispatch", "fire", ("traffic",))
        assert p.check_cross_domain(act, {"traffic": agent(0.1)}, rules=[never]) == (False, "blocked")


class TestMatrixConfig:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "policy.yaml"
        p.dump_matrix(M, path)
        assert p.load_matrix(path) == M

    def test_keys_are_policy_ids(self):
        assert {"W1", "T1", "F1", "S1", "S2", "S3", "S4", "S5", "S6"} <= set(M.to_config())

    def test_partial_override(self, tmp_path):
        path = tmp_path / "policy.yaml"
        path.write_text(yaml.safe_dump({"S1": {"eps_r": 0.1}, "S6": {"cooldown_s": 60}}))
        m = p.load_matrix(path)
        assert m.eps_r == 0.1 and m.cooldown_s == 60 and m.eps_t == 0.05

    def test_invalid_values(self):
        with pytest.raises(p.ConfigError):
            p.PolicyMatrix(eps_r=1.5)
        with pytest.raises(p.ConfigError):
            p.PolicyMatrix(cooldown_s=0)
        with pytest.raises(p.ConfigError):
            p.DomainTrigger(0.5, "=>", 0.5, "<")

    def test_shipped_default_file(self):
        from pathlib import Path
        shipped = Path(__file__).resolve().parents[1] / "configs" / "policy.yaml"
        assert p.load_matrix(shipped) == M
