"""Provenance chains and the quorum-gated shared knowledge base."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Mapping, Optional, Sequence

from .canonical import canonical, sha256
from .identity import AgentIdentity, KeyPair, verify_signature

TRANSFORMS = frozenset({"created", "tool_output", "verbatim_forward", "rewrite"})


@dataclass(frozen=True)
class ProvenanceRecord:
    record_hash: bytes
    parent_hash: Optional[bytes]
    content_hash: bytes
    agent_id: str
    transform: str
    tick: int
    signature: bytes


def record_digest(
    parent_hash: Optional[bytes], content_hash: bytes, agent_id: str, transform: str, tick: int
) -> bytes:
    return sha256(canonical(parent_hash, content_hash, agent_id, transform, tick))


def append_provenance(
    parent: Optional[ProvenanceRecord],
    agent: AgentIdentity,
    keys: KeyPair,
    transform: str,
    content: bytes,
    tick: int,
) -> ProvenanceRecord:
    if transform not in TRANSFORMS:
        raise ValueError(f"unknown transform {transform!r}")
    parent_hash = parent.record_hash if parent is not None else None
    content_hash = sha256(content)
    digest = record_digest(parent_hash, content_hash, agent.agent_id, transform, tick)
    return ProvenanceRecord(
        digest, parent_hash, content_hash, agent.agent_id, transform, tick, keys.sign(digest)
    )


class BreakReason(str, enum.Enum):
    HASH_MISMATCH = "HashMismatch"
    BAD_SIGNATURE = "BadSignature"
    DANGLING_PARENT = "DanglingParent"
    UNKNOWN_AGENT = "UnknownAgent"


class BrokenChain(Exception):
    def __init__(self, index: int, reason: BreakReason):
        super().__init__(f"provenance broken at record {index}: {reason.value}")
        self.index = index
        self.reason = reason


def check_record(
    record: ProvenanceRecord,
    expected_parent: Optional[bytes],
    key_lookup: Mapping[str, bytes],
) -> Optional[BreakReason]:
    """Check one link; ``None`` means the record is sound."""
    public = key_lookup.get(record.agent_id)
    if public is None:
        return BreakReason.UNKNOWN_AGENT
    try:
        digest = record_digest(
            record.parent_hash, record.content_hash, record.agent_id, record.transform, record.tick
        )
    except (TypeError, ValueError, UnicodeEncodeError):
        return BreakReason.HASH_MISMATCH
    if digest != record.record_hash or record.transform not in TRANSFORMS:
        return BreakReason.HASH_MISMATCH
    if not verify_signature(public, record.record_hash, record.signature):
        return BreakReason.BAD_SIGNATURE
    if record.parent_hash != expected_parent:
        return BreakReason.DANGLING_PARENT
    return None


def verify_provenance(
    chain: Sequence[ProvenanceRecord], key_lookup: Mapping[str, bytes]
) -> str:
    """Verify a chain ordered origin to tip and return the origin agent id.

    Raises :class:`BrokenChain` at the first failing record.
    """
    if not chain:
        raise ValueError("empty provenance chain")
    expected_parent = None
    for i, record in enumerate(chain):
        reason = check_record(record, expected_parent, key_lookup)
        if reason is not None:
            raise BrokenChain(i, reason)
        expected_parent = record.record_hash
    return chain[0].agent_id


# -- facts and quorum ------------------------------------------------------


@dataclass(frozen=True)
class Fact:
    key: str
    value: str
    origin_record: bytes

    def __post_init__(self):
        if not self.key:
            raise ValueError("fact key must be non-empty")

    def signed_bytes(self) -> bytes:
        return canonical(self.key, self.value, self.origin_record)


class Status(str, enum.Enum):
    PENDING = "pending"
    ACCEPTED = "accepted"
    REJECTED = "rejected"
    FLAGGED = "flagged"


@dataclass(frozen=True)
class Endorsement:
    agent_id: str
    signature: bytes


@dataclass(frozen=True)
class Proposal:
    fact: Fact
    proposer: str
    endorsements: tuple = ()
    status: Status = Status.PENDING

    @property
    def endorsers(self) -> tuple:
        return tuple(e.agent_id for e in self.endorsements)


@dataclass(frozen=True)
class KnowledgeBase:
    accepted: Mapping[str, Fact] = field(default_factory=lambda: MappingProxyType({}))
    flagged: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "accepted", MappingProxyType(dict(self.accepted)))


def propose_fact(kb: KnowledgeBase, fact: Fact, proposer: str) -> Proposal:
    # contradiction with kb is judged at finalize, not here
    if not fact.key:
        raise ValueError("fact key must be non-empty")
    return Proposal(fact, proposer)


def endorse_fact(proposal: Proposal, agent: AgentIdentity, keys: KeyPair) -> Proposal:
    if proposal.status is not Status.PENDING:
        raise ValueError(f"cannot endorse a {proposal.status.value} proposal")
    if agent.agent_id in proposal.endorsers:
        return proposal
    sig = keys.sign(proposal.fact.signed_bytes())
    return replace(proposal, endorsements=proposal.endorsements + (Endorsement(agent.agent_id, sig),))


def valid_endorsers(proposal: Proposal, key_lookup: Mapping[str, bytes]) -> list:
    msg = proposal.fact.signed_bytes()
    out = []
    for e in proposal.endorsements:
        public = key_lookup.get(e.agent_id)
        if e.agent_id in out or public is None:
            continue
        if verify_signature(public, msg, e.signature):
            out.append(e.agent_id)
    return out


def finalize(
    kb: KnowledgeBase, proposal: Proposal, quorum: int, key_lookup: Mapping[str, bytes]
) -> tuple[KnowledgeBase, Status]:
    if quorum < 1:
        raise ValueError("quorum must be >= 1")
    if proposal.status is not Status.PENDING:
        return kb, proposal.status
    if len(valid_endorsers(proposal, key_lookup)) < quorum:
        return kb, Status.PENDING

    fact = proposal.fact
    current = kb.accepted.get(fact.key)
    if current is None:
        accepted = dict(kb.accepted)
        accepted[fact.key] = fact
        return KnowledgeBase(accepted, kb.flagged), Status.ACCEPTED
    if current.value == fact.value:
        return kb, Status.ACCEPTED
    flagged = replace(proposal, status=Status.FLAGGED)
    return KnowledgeBase(kb.accepted, kb.flagged + (flagged,)), Status.FLAGGED


def plausibility_audit(kb: KnowledgeBase, outputs: Sequence[Fact]) -> list:
    found = []
    for fact in outputs:
        current = kb.accepted.get(fact.key)
        if current is not None and current.value != fact.value:
            found.append((fact, "ContradictsAccepted"))
    return found
