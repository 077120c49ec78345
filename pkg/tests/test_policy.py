import itertools
from pathlib import Path

import networkx as nx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ztfabric.config import parse_config
from ztfabric.identity import AgentIdentity
from ztfabric.policy import (
    DEFAULT_ESCALATION,
    AnomalyKind,
    Decision,
    EscalationTable,
    PolicyRule,
    SanctionState,
    Thresholds,
    baseline_profile,
    blast_radius,
    detect_anomalies,
    evaluate,
    matching_rule,
    record_violation,
)
from ztfabric.scenario import build_world

SCENARIOS = Path(__file__).resolve().parents[1] / "src" / "ztfabric" / "scenarios"


def agent(agent_id, segment="s1", role="specialist"):
    return AgentIdentity(agent_id, bytes(32), bytes(32), segment, role)


def sanctioned(agent_id, n):
    state = SanctionState(agent_id)
    for i in range(n):
        state = record_violation(state, "x", i)
    return state


def rule(src, dst, *kinds):
    return PolicyRule(src, dst, frozenset(kinds or ("data",)))


def allow_graph(rules, sanctions, roster):
    """Reference edge set, built straight from the allow semantics."""
    g = nx.DiGraph()
    g.add_nodes_from(a.agent_id for a in roster)
    kinds = set().union(*(r.message_kinds for r in rules)) if rules else set()
    for s, d in itertools.permutations(roster, 2):
        tier = sanctions[s.agent_id].tier if s.agent_id in sanctions else "none"
        if tier == "quarantined" or (tier == "restricted" and d.role != "auditor"):
            continue
        for r in rules:
            if r.message_kinds & kinds and r.src_selector in (s.agent_id, s.segment_id) and r.dst_selector in (
                d.agent_id,
                d.segment_id,
            ):
                g.add_edge(s.agent_id, d.agent_id)
                break
    return g


def oracle_reach(rules, sanctions, roster, start):
    return {start} | nx.descendants(allow_graph(rules, sanctions, roster), start)


# -- evaluate ------------------------------------------------------------------


def test_default_deny():
    assert evaluate([], {}, agent("a"), agent("b"), "data") is Decision.NO_RULE


def test_segment_rule_allows():
    d = evaluate([rule("s1", "s1")], {}, agent("a"), agent("b"), "data")
    assert d is Decision.ALLOW and d


def test_kind_must_match():
    assert evaluate([rule("s1", "s1")], {}, agent("a"), agent("b"), "control") is Decision.NO_RULE


def test_quarantine_beats_matching_rule():
    sanctions = {"a": sanctioned("a", 5)}
    assert evaluate([rule("a", "b")], sanctions, agent("a"), agent("b"), "data") is Decision.QUARANTINED


def test_restricted_only_reaches_auditors():
    sanctions = {"a": sanctioned("a", 3)}
    rules = [rule("s1", "s1")]
    assert evaluate(rules, sanctions, agent("a"), agent("b"), "data") is Decision.RESTRICTED
    aud = agent("aud", role="auditor")
    assert evaluate(rules, sanctions, agent("a"), aud, "data") is Decision.ALLOW
    # the auditor channel still needs a rule
    assert evaluate([], sanctions, agent("a"), aud, "data") is Decision.NO_RULE


def test_throttled_still_allowed():
    assert evaluate([rule("a", "b")], {"a": sanctioned("a", 1)}, agent("a"), agent("b"), "data")


def test_agent_rule_is_more_specific_than_segment_rule():
    seg, own = rule("s1", "s1"), rule("a", "b")
    assert matching_rule([seg, own], agent("a"), agent("b"), "data") is own
    twin = rule("s1", "s1")
    assert matching_rule([seg, twin], agent("a"), agent("b"), "data") is seg


# -- sanctions -----------------------------------------------------------------


@pytest.mark.parametrize(
    "count,tier",
    [(0, "none"), (1, "throttled"), (2, "throttled"), (3, "restricted"), (4, "restricted"), (5, "quarantined"), (9, "quarantined")],
)
def test_tier_table(count, tier):
    assert sanctioned("a", count).tier == tier


@given(st.lists(st.sampled_from(["spoof", "rate", "contradiction"]), max_size=8), st.randoms())
def test_tier_depends_only_on_count(kinds, rnd):
    def replay(seq):
        state = SanctionState("a")
        for t, k in enumerate(seq):
            state = record_violation(state, k, t)
        return state.tier

    shuffled = list(kinds)
    rnd.shuffle(shuffled)
    assert replay(kinds) == replay(shuffled) == DEFAULT_ESCALATION.tier_for(len(kinds))


def test_custom_escalation_table():
    table = EscalationTable(2, 2, 4)
    s = SanctionState("a")
    tiers = []
    for i in range(4):
        s = record_violation(s, "x", i, table)
        tiers.append(s.tier)
    assert tiers == ["none", "restricted", "restricted", "quarantined"]
    with pytest.raises(ValueError):
        EscalationTable(3, 2, 5)


# -- blast radius ----------------------------------------------------------------


def test_isolated_agent():
    roster = [agent("a"), agent("b")]
    assert blast_radius([rule("b", "a")], {}, "a", roster) == {"a"}


def test_chain_closure_stops_at_missing_rule():
    roster = [agent(x) for x in "abcd"]
    rules = [rule("a", "b"), rule("b", "c")]
    assert blast_radius(rules, {}, "a", roster) == {"a", "b", "c"}


def test_quarantined_start_reaches_only_itself():
    roster = [agent(x) for x in "abc"]
    assert blast_radius([rule("s1", "s1")], {"a": sanctioned("a", 5)}, "a", roster) == {"a"}


def test_unknown_start():
    with pytest.raises(KeyError):
        blast_radius([], {}, "zz", [agent("a")])


def _load_fixture():
    out = {}
    for line in (SCENARIOS / "mesh.blast").read_text().splitlines():
        if line and not line.startswith("#"):
            k, _, v = line.partition(":")
            out[k] = set(v.split())
    return out


def test_mesh_scenario_matches_fixture_and_oracle():
    world = build_world(parse_config((SCENARIOS / "mesh.scenario").read_text()))
    fixture = _load_fixture()
    assert set(fixture) == set(world.members)
    for start, expected in fixture.items():
        got = blast_radius(world.rules, world.sanctions, start, world.roster)
        assert got == expected
        assert got == oracle_reach(world.rules, world.sanctions, world.roster, start)


@st.composite
def topologies(draw, max_agents=12):
    n = draw(st.integers(1, max_agents))
    segs = ["s0", "s1", "s2"]
    roster = [
        agent(f"a{i}", draw(st.sampled_from(segs)), draw(st.sampled_from(["specialist", "auditor"])))
        for i in range(n)
    ]
    names = [a.agent_id for a in roster] + segs
    rules = draw(
        st.lists(
            st.builds(
                lambda s, d, k: PolicyRule(s, d, frozenset(k)),
                st.sampled_from(names),
                st.sampled_from(names),
                st.sets(st.sampled_from(["data", "task"]), min_size=1),
            ),
            max_size=3 * n,
        )
    )
    sanctions = {a.agent_id: sanctioned(a.agent_id, draw(st.integers(0, 5))) for a in roster}
    start = draw(st.sampled_from(roster)).agent_id
    return rules, sanctions, roster, start


@settings(max_examples=200, deadline=None)
@given(topologies())
def test_blast_radius_matches_bfs_oracle(case):
    rules, sanctions, roster, start = case
    assert blast_radius(rules, sanctions, start, roster) == oracle_reach(rules, sanctions, roster, start)


@settings(max_examples=100, deadline=None)
@given(topologies(), st.sampled_from(["data", "task", "fact"]))
def test_allow_needs_a_rule_and_no_quarantine(case, kind):
    rules, sanctions, roster, _ = case
    for s, d in itertools.product(roster, repeat=2):
        if evaluate(rules, sanctions, s, d, kind):
            assert matching_rule(rules, s, d, kind) is not None
            assert sanctions[s.agent_id].tier != "quarantined"


# -- behavior baselines ----------------------------------------------------------


def test_empty_baseline():
    p = baseline_profile([], "a", (0, 100))
    assert p.destination_set == frozenset() and p.mean_rate == 0 and p.kind_histogram == {}


def test_baseline_arithmetic():
    events = [(i * 10, "a", "b" if i % 2 else "c", "data" if i < 6 else "control") for i in range(10)]
    events.append((5, "other", "z", "data"))
    p = baseline_profile(events, "a", (0, 100))
    assert p.mean_rate == 10.0
    assert p.destination_set == {"b", "c"}
    assert p.kind_histogram == {"control": 0.4, "data": 0.6}


def test_empty_window_rejected():
    with pytest.raises(ValueError):
        baseline_profile([], "a", (5, 5))


def test_same_shape_no_anomalies():
    base = [(i * 10, "a", "b", "data") for i in range(10)]
    later = [(t + 100, s, d, k) for t, s, d, k in base]
    profile = baseline_profile(base, "a", (0, 100))
    assert detect_anomalies(profile, later, (100, 200)) == []


def test_new_destination():
    base = [(i * 10, "a", "b", "data") for i in range(10)]
    later = [(t + 100, s, d, k) for t, s, d, k in base[:-1]] + [(195, "a", "evil", "data")]
    found = detect_anomalies(baseline_profile(base, "a", (0, 100)), later, (100, 200))
    assert [f.kind for f in found] == [AnomalyKind.NEW_DESTINATION]


def test_rate_spike():
    base = [(10, "a", "b", "data"), (60, "a", "b", "data")]  # 2.0 per 100 ticks
    later = [(100 + 10 * i, "a", "b", "data") for i in range(7)]  # 7.0
    profile = baseline_profile(base, "a", (0, 100))
    assert profile.mean_rate == 2.0
    found = detect_anomalies(profile, later, (100, 200), Thresholds(rate_factor=3.0))
    assert [f.kind for f in found] == [AnomalyKind.RATE_SPIKE]
    # 6.0 is not strictly above 3 x 2.0
    assert detect_anomalies(profile, later[:6], (100, 200)) == []


def test_content_shift():
    base = [(i, "a", "b", "data") for i in range(10)]
    later = [(100 + i, "a", "b", "control") for i in range(10)]
    found = detect_anomalies(baseline_profile(base, "a", (0, 100)), later, (100, 200))
    assert [f.kind for f in found] == [AnomalyKind.CONTENT_SHIFT]
