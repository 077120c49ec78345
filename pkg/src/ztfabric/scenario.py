"""Turn a parsed :class:`ScenarioConfig` into live identities, rules and sanctions."""

from __future__ import annotations

from dataclasses import dataclass

from .config import ScenarioConfig
from .identity import KeyPair, generate_identity, issue_document
from .policy import EscalationTable, PolicyRule, SanctionState, Thresholds, record_violation
from .sim import Member, RewriteChannel, Topology, derive_seed

# documents are checked at this tick; "expired" credentials end just before it
NOW = 1
VALID_UNTIL = 2**32


@dataclass(frozen=True)
class World:
    config: ScenarioConfig
    members: dict  # agent_id -> Member, declaration order
    trust_anchors: tuple
    rules: tuple
    sanctions: dict
    escalation: EscalationTable
    thresholds: Thresholds
    channel: RewriteChannel

    @property
    def roster(self) -> list:
        return [m.identity for m in self.members.values()]

    def topology(self, order=None) -> Topology:
        ids = list(order) if order else list(self.members)
        return Topology(tuple(self.members[i] for i in ids), self.trust_anchors, None, NOW)


def build_world(cfg: ScenarioConfig) -> World:
    ca_seed = cfg.authority_seed or derive_seed(cfg.seed, "authority", cfg.authority_id)
    ca = KeyPair.from_seed(ca_seed)
    escalation = EscalationTable(cfg.throttled, cfg.restricted, cfg.quarantined)
    members, sanctions = {}, {}
    for spec in cfg.agents:
        seed = spec.seed or derive_seed(cfg.seed, "agent", spec.agent_id)
        ident, keys = generate_identity(seed, spec.agent_id, spec.segment, spec.role)
        if spec.credential == "self-signed":
            doc = issue_document(keys, spec.agent_id, ident, 0, VALID_UNTIL)
        elif spec.credential == "expired":
            doc = issue_document(ca, cfg.authority_id, ident, 0, NOW - 1)
        else:
            doc = issue_document(ca, cfg.authority_id, ident, 0, VALID_UNTIL)
        members[spec.agent_id] = Member(ident, keys, doc)
        state = SanctionState(spec.agent_id)
        for _ in range(spec.violations):
            state = record_violation(state, "prior", 0, escalation)
        sanctions[spec.agent_id] = state
    rules = tuple(PolicyRule(r.src, r.dst, frozenset(r.kinds)) for r in cfg.rules)
    return World(
        cfg,
        members,
        ((cfg.authority_id, ca.public),),
        rules,
        sanctions,
        escalation,
        Thresholds(cfg.rate_factor, cfg.histogram_distance),
        RewriteChannel(cfg.a, cfg.b),
    )
