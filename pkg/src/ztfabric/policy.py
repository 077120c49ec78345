"""Default-deny micro-segmentation, sanctions and behavioral baselines."""

from __future__ import annotations

import enum
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

from .identity import AgentIdentity

Event = tuple  # (tick, src, dst, kind)


@dataclass(frozen=True)
class PolicyRule:
    src_selector: str
    dst_selector: str
    message_kinds: frozenset
    effect: str = "allow"

    def __post_init__(self):
        if not self.src_selector or not self.dst_selector:
            raise ValueError("rule selectors must be non-empty")
        if not self.message_kinds:
            raise ValueError("rule must name at least one message kind")
        if self.effect != "allow":
            raise ValueError("only allow rules exist; deny is implicit")
        object.__setattr__(self, "message_kinds", frozenset(self.message_kinds))


class Decision(str, enum.Enum):
    ALLOW = "Allow"
    NO_RULE = "NoRule"
    QUARANTINED = "Quarantined"
    RESTRICTED = "Restricted"

    def __bool__(self) -> bool:
        return self is Decision.ALLOW


TIERS = ("none", "throttled", "restricted", "quarantined")


@dataclass(frozen=True)
class EscalationTable:
    throttled: int = 1
    restricted: int = 3
    quarantined: int = 5

    def __post_init__(self):
        if not 1 <= self.throttled <= self.restricted <= self.quarantined:
            raise ValueError("escalation thresholds must satisfy 1 <= t <= r <= q")

    def tier_for(self, count: int) -> str:
        if count >= self.quarantined:
            return "quarantined"
        if count >= self.restricted:
            return "restricted"
        if count >= self.throttled:
            return "throttled"
        return "none"


DEFAULT_ESCALATION = EscalationTable()


@dataclass(frozen=True)
class SanctionState:
    agent_id: str
    violations: tuple = ()
    tier: str = "none"


def record_violation(
    state: SanctionState, kind: str, now: int, table: EscalationTable = DEFAULT_ESCALATION
) -> SanctionState:
    violations = state.violations + ((now, kind),)
    tier = max(state.tier, table.tier_for(len(violations)), key=TIERS.index)
    return SanctionState(state.agent_id, violations, tier)


def _tier(sanctions: Mapping[str, SanctionState], agent_id: str) -> str:
    state = sanctions.get(agent_id)
    return state.tier if state else "none"


def _selector_rank(selector: str, agent: AgentIdentity) -> Optional[int]:
    # lower rank wins: agent-level match beats segment-level match
    if selector == agent.agent_id:
        return 0
    if selector == agent.segment_id:
        return 1
    return None


def matching_rule(
    rules: Sequence[PolicyRule], src: AgentIdentity, dst: AgentIdentity, kind: str
) -> Optional[PolicyRule]:
    """Most specific matching rule; declaration order breaks ties."""
    best, best_rank = None, None
    for rule in rules:
        if kind not in rule.message_kinds:
            continue
        rs = _selector_rank(rule.src_selector, src)
        rd = _selector_rank(rule.dst_selector, dst)
        if rs is None or rd is None:
            continue
        rank = rs + rd
        if best_rank is None or rank < best_rank:
            best, best_rank = rule, rank
    return best


def evaluate(
    rules: Sequence[PolicyRule],
    sanctions: Mapping[str, SanctionState],
    src: AgentIdentity,
    dst: AgentIdentity,
    kind: str,
) -> Decision:
    tier = _tier(sanctions, src.agent_id)
    if tier == "quarantined":
        return Decision.QUARANTINED
    if tier == "restricted" and dst.role != "auditor":
        return Decision.RESTRICTED
    if matching_rule(rules, src, dst, kind) is None:
        return Decision.NO_RULE
    return Decision.ALLOW


def blast_radius(
    rules: Sequence[PolicyRule],
    sanctions: Mapping[str, SanctionState],
    start: str,
    roster: Iterable[AgentIdentity],
) -> set:
    """Agents reachable from ``start`` over edges allowed for at least one kind."""
    by_id = {a.agent_id: a for a in roster}
    if start not in by_id:
        raise KeyError(f"unknown agent {start!r}")
    kinds = sorted(set().union(*(r.message_kinds for r in rules))) if rules else []

    reached = {start}
    queue = deque([start])
    while queue:
        src = by_id[queue.popleft()]
        for dst in by_id.values():
            if dst.agent_id in reached:
                continue
            if any(evaluate(rules, sanctions, src, dst, k) for k in kinds):
                reached.add(dst.agent_id)
                queue.append(dst.agent_id)
    return reached


# -- behavioral baselines -------------------------------------------------


@dataclass(frozen=True)
class BehaviorProfile:
    agent_id: str
    destination_set: frozenset = frozenset()
    mean_rate: float = 0.0
    kind_histogram: Mapping[str, float] = field(default_factory=dict)


class AnomalyKind(str, enum.Enum):
    NEW_DESTINATION = "new_destination"
    RATE_SPIKE = "rate_spike"
    CONTENT_SHIFT = "content_shift"


@dataclass(frozen=True)
class Anomaly:
    agent_id: str
    kind: AnomalyKind
    detail: str


@dataclass(frozen=True)
class Thresholds:
    rate_factor: float = 3.0
    histogram_distance: float = 0.5

    def __post_init__(self):
        if self.rate_factor <= 0 or self.histogram_distance <= 0:
            raise ValueError("anomaly thresholds must be positive")


RATE_UNIT = 100  # rates are messages per 100 ticks


def baseline_profile(
    events: Iterable[Event], agent_id: str, window: tuple[int, int]
) -> BehaviorProfile:
    """Profile of ``agent_id``'s outbound traffic in the half-open tick window."""
    start, stop = window
    if stop <= start:
        raise ValueError(f"empty window {window}")
    mine = [e for e in events if e[1] == agent_id and start <= e[0] < stop]
    kinds = Counter(e[3] for e in mine)
    total = sum(kinds.values())
    hist = {k: n / total for k, n in sorted(kinds.items())} if total else {}
    return BehaviorProfile(
        agent_id,
        frozenset(e[2] for e in mine),
        len(mine) * RATE_UNIT / (stop - start),
        hist,
    )


def histogram_l1(p: Mapping[str, float], q: Mapping[str, float]) -> float:
    return sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in set(p) | set(q))


def detect_anomalies(
    profile: BehaviorProfile,
    new_events: Sequence[Event],
    window: tuple[int, int],
    thresholds: Thresholds = Thresholds(),
) -> list:
    observed = baseline_profile(new_events, profile.agent_id, window)
    found = []
    seen = set()
    start, stop = window
    for tick, src, dst, _ in sorted(new_events, key=lambda e: e[0]):
        if not start <= tick < stop or src != profile.agent_id:
            continue
        if dst in profile.destination_set or dst in seen:
            continue
        seen.add(dst)
        found.append(Anomaly(profile.agent_id, AnomalyKind.NEW_DESTINATION, f"dst={dst}"))
    if profile.mean_rate > 0 and observed.mean_rate > thresholds.rate_factor * profile.mean_rate:
        found.append(
            Anomaly(
                profile.agent_id,
                AnomalyKind.RATE_SPIKE,
                f"rate {observed.mean_rate:g} > {thresholds.rate_factor:g} x {profile.mean_rate:g}",
            )
        )
    if profile.kind_histogram and observed.kind_histogram:
        dist = histogram_l1(profile.kind_histogram, observed.kind_histogram)
        if dist > thresholds.histogram_distance:
            found.append(
                Anomaly(profile.agent_id, AnomalyKind.CONTENT_SHIFT, f"L1={dist:.4f}")
            )
    return found
