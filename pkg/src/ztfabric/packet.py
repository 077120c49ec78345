"""Dual-cluster packets with a chained, per-hop-signed guard signal.

The protected cluster is sealed once by the originating agent and must reach
every later hop byte-for-byte. The rewritable cluster may be replaced at any
hop and is deliberately outside the guard.

Guard chain::

    g0 = H(packet_id || content_hash)
    gi = H(g(i-1) || be32(i) || agent_id || content_hash)

Each entry is signed by the agent that appended it.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Any, Callable, Mapping, Optional, Sequence

from .canonical import be32, canonical, sha256
from .identity import AgentIdentity, KeyPair, verify_signature


@dataclass(frozen=True)
class ProtectedCluster:
    payload: bytes
    content_hash: bytes
    origin_signature: bytes


@dataclass(frozen=True)
class GuardEntry:
    hop: int
    agent_id: str
    guard_value: bytes
    signature: bytes


@dataclass(frozen=True)
class DualClusterPacket:
    packet_id: bytes
    protected: ProtectedCluster
    rewritable: Any
    guard_chain: tuple

    @property
    def hop_count(self) -> int:
        return len(self.guard_chain) - 1


class ViolationReason(str, enum.Enum):
    TAMPERED_PROTECTED = "TamperedProtected"
    GUARD_MISMATCH = "GuardMismatch"
    BAD_SIGNATURE = "BadSignature"
    SKIPPED_HOP = "SkippedHop"


@dataclass(frozen=True)
class Violation:
    hop: int
    reason: ViolationReason


class GuardViolationError(Exception):
    def __init__(self, violation: Violation):
        super().__init__(f"guard violation at hop {violation.hop}: {violation.reason.value}")
        self.violation = violation


def initial_guard(packet_id: bytes, content_hash: bytes) -> bytes:
    return sha256(packet_id + content_hash)


def next_guard(prev: bytes, hop: int, agent_id: str, content_hash: bytes) -> bytes:
    return sha256(prev + be32(hop) + agent_id.encode("utf-8") + content_hash)


def seal(
    origin: AgentIdentity,
    keys: KeyPair,
    protected_payload: bytes,
    rewritable_payload: Any,
    packet_id: bytes,
) -> DualClusterPacket:
    if len(packet_id) != 16:
        raise ValueError(f"packet_id must be 16 bytes, got {len(packet_id)}")
    payload = bytes(protected_payload)
    content_hash = sha256(payload)
    protected = ProtectedCluster(payload, content_hash, keys.sign(content_hash))
    g0 = initial_guard(packet_id, content_hash)
    entry = GuardEntry(0, origin.agent_id, g0, keys.sign(g0))
    return DualClusterPacket(bytes(packet_id), protected, rewritable_payload, (entry,))


def verify_guard(
    packet: DualClusterPacket, key_lookup: Mapping[str, bytes]
) -> Optional[Violation]:
    """Return the first violation found, or ``None`` if the packet is sound."""
    prot = packet.protected
    if sha256(prot.payload) != prot.content_hash:
        return Violation(0, ViolationReason.TAMPERED_PROTECTED)
    chain = packet.guard_chain
    if not chain:
        return Violation(0, ViolationReason.SKIPPED_HOP)

    prev = None
    for i, entry in enumerate(chain):
        if entry.hop != i:
            return Violation(i, ViolationReason.SKIPPED_HOP)
        try:
            if i == 0:
                expected = initial_guard(packet.packet_id, prot.content_hash)
            else:
                expected = next_guard(prev, i, entry.agent_id, prot.content_hash)
        except UnicodeEncodeError:
            return Violation(i, ViolationReason.GUARD_MISMATCH)
        if expected != entry.guard_value:
            return Violation(i, ViolationReason.GUARD_MISMATCH)
        public = key_lookup.get(entry.agent_id)
        if public is None or not verify_signature(public, entry.guard_value, entry.signature):
            return Violation(i, ViolationReason.BAD_SIGNATURE)
        if i == 0 and not verify_signature(public, prot.content_hash, prot.origin_signature):
            return Violation(0, ViolationReason.BAD_SIGNATURE)
        prev = entry.guard_value
    return None


def forward(
    packet: DualClusterPacket,
    agent: AgentIdentity,
    keys: KeyPair,
    rewrite: Callable[[Any], Any],
    key_lookup: Mapping[str, bytes],
) -> DualClusterPacket:
    """Verify, rewrite the rewritable cluster, and append this agent's guard entry.

    Refuses (raises :class:`GuardViolationError`) if the incoming packet does
    not verify.
    """
    violation = verify_guard(packet, key_lookup)
    if violation is not None:
        raise GuardViolationError(violation)
    hop = len(packet.guard_chain)
    g = next_guard(packet.guard_chain[-1].guard_value, hop, agent.agent_id, packet.protected.content_hash)
    entry = GuardEntry(hop, agent.agent_id, g, keys.sign(g))
    return replace(
        packet,
        rewritable=rewrite(packet.rewritable),
        guard_chain=packet.guard_chain + (entry,),
    )


def extract_protected(packet: DualClusterPacket, key_lookup: Mapping[str, bytes]) -> bytes:
    violation = verify_guard(packet, key_lookup)
    if violation is not None:
        raise GuardViolationError(violation)
    return packet.protected.payload


# -- serialization ---------------------------------------------------------


def _encode_rewritable(value: Any) -> bytes:
    if isinstance(value, (bytes, bytearray)):
        return canonical("bytes", bytes(value))
    items: Sequence = value
    parts = [canonical("assertions", len(items))]
    for item in items:
        if hasattr(item, "key"):
            parts.append(canonical(item.key, item.value, item.kind))
        else:
            parts.append(canonical(*item))
    return b"".join(parts)


def encode_packet(packet: DualClusterPacket) -> bytes:
    prot = packet.protected
    parts = [
        canonical(packet.packet_id, prot.payload, prot.content_hash, prot.origin_signature),
        _encode_rewritable(packet.rewritable),
        canonical(len(packet.guard_chain)),
    ]
    for e in packet.guard_chain:
        parts.append(canonical(e.hop, e.agent_id, e.guard_value, e.signature))
    return b"".join(parts)


def hexdump(data: bytes, width: int = 16) -> str:
    lines = []
    for off in range(0, len(data), width):
        chunk = data[off : off + width]
        hexpart = " ".join(f"{b:02x}" for b in chunk)
        text = "".join(chr(b) if 32 <= b < 127 else "." for b in chunk)
        lines.append(f"{off:08x}  {hexpart:<{width * 3 - 1}}  |{text}|")
    return "\n".join(lines) + "\n"
