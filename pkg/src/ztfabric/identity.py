"""Agent identities, signed identity documents and mutual authentication.

Signatures are Ed25519 and hashes are SHA-256. Time is a simulated integer
tick; document validity windows are inclusive at both ends.
"""

from __future__ import annotations

import enum
import functools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Tuple

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .canonical import canonical, sha256

ROLES = frozenset({"orchestrator", "delegator", "specialist", "auditor", "adversary"})

TrustAnchors = Iterable[Tuple[str, bytes]]


@functools.lru_cache(maxsize=4096)
def _signing_key(secret: bytes) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(secret)


@functools.lru_cache(maxsize=4096)
def _verifying_key(public: bytes) -> Ed25519PublicKey:
    return Ed25519PublicKey.from_public_bytes(public)


def _public_from_secret(secret: bytes) -> bytes:
    return _signing_key(secret).public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)


@dataclass(frozen=True)
class KeyPair:
    secret: bytes = field(repr=False)
    public: bytes

    @classmethod
    def from_seed(cls, seed: bytes) -> "KeyPair":
        if len(seed) != 32:
            raise ValueError(f"seed must be 32 bytes, got {len(seed)}")
        return cls(bytes(seed), _public_from_secret(seed))

    def sign(self, message: bytes) -> bytes:
        return _signing_key(self.secret).sign(message)


def verify_signature(public_key: bytes, message: bytes, signature: bytes) -> bool:
    return _verify(bytes(public_key), bytes(message), bytes(signature))


# pure function of its inputs, so memoizing is sound; chains get re-verified per hop
@functools.lru_cache(maxsize=1 << 16)
def _verify(public_key: bytes, message: bytes, signature: bytes) -> bool:
    try:
        _verifying_key(public_key).verify(signature, message)
    except (InvalidSignature, ValueError, TypeError):
        return False
    return True


@dataclass(frozen=True)
class AgentIdentity:
    agent_id: str
    public_key: bytes
    fingerprint: bytes
    segment_id: str
    role: str


def generate_identity(
    seed: bytes, agent_id: str, segment_id: str, role: str
) -> tuple[AgentIdentity, KeyPair]:
    """Deterministically derive an identity and its key pair from a 32-byte seed."""
    if not agent_id:
        raise ValueError("agent_id must be non-empty")
    if role not in ROLES:
        raise ValueError(f"unknown role {role!r}")
    keys = KeyPair.from_seed(seed)
    ident = AgentIdentity(agent_id, keys.public, sha256(keys.public), segment_id, role)
    return ident, keys


class DocStatus(str, enum.Enum):
    VALID = "Valid"
    UNKNOWN_ISSUER = "UnknownIssuer"
    BAD_SIGNATURE = "BadSignature"
    EXPIRED = "Expired"
    NOT_YET_VALID = "NotYetValid"

    def __bool__(self) -> bool:
        return self is DocStatus.VALID


@dataclass(frozen=True)
class IdentityDocument:
    subject_id: str
    subject_public_key: bytes
    issuer_id: str
    not_before: int
    not_after: int
    signature: bytes

    def signed_bytes(self) -> bytes:
        return canonical(
            self.subject_id,
            self.subject_public_key,
            self.issuer_id,
            self.not_before,
            self.not_after,
        )


def issue_document(
    issuer: KeyPair,
    issuer_id: str,
    subject: AgentIdentity,
    not_before: int,
    not_after: int,
) -> IdentityDocument:
    if not_before > not_after:
        raise ValueError(f"inverted validity window [{not_before}, {not_after}]")
    body = canonical(subject.agent_id, subject.public_key, issuer_id, not_before, not_after)
    return IdentityDocument(
        subject.agent_id,
        subject.public_key,
        issuer_id,
        not_before,
        not_after,
        issuer.sign(body),
    )


def verify_document(doc: IdentityDocument, trust_anchors: TrustAnchors, now: int) -> DocStatus:
    anchors = dict(trust_anchors)
    issuer_key = anchors.get(doc.issuer_id)
    if issuer_key is None:
        return DocStatus.UNKNOWN_ISSUER
    if not verify_signature(issuer_key, doc.signed_bytes(), doc.signature):
        return DocStatus.BAD_SIGNATURE
    if now < doc.not_before:
        return DocStatus.NOT_YET_VALID
    if now > doc.not_after:
        return DocStatus.EXPIRED
    return DocStatus.VALID


# -- mutual authentication -------------------------------------------------


@dataclass(frozen=True)
class Party:
    """What one side brings to a handshake."""

    identity: AgentIdentity
    keys: KeyPair
    document: IdentityDocument


@dataclass(frozen=True)
class SessionToken:
    initiator_id: str
    responder_id: str
    initiator_nonce: bytes
    responder_nonce: bytes
    initiator_signature: bytes
    responder_signature: bytes


class AuthError(Exception):
    def __init__(self, side: str, reason: str):
        super().__init__(f"{side}: {reason}")
        self.side = side
        self.reason = reason


def challenge_bytes(peer_nonce: bytes, own_fingerprint: bytes) -> bytes:
    return peer_nonce + own_fingerprint


def mutual_authenticate(
    initiator: Party,
    responder: Party,
    nonce_source: Callable[[int], bytes],
    trust_anchors: TrustAnchors,
    now: int,
) -> SessionToken:
    """Two-way challenge/response handshake.

    Each side proves possession of the key named in its document by signing
    the peer's nonce concatenated with the fingerprint the document implies.
    Raises :class:`AuthError` naming the first failing side.
    """
    anchors = list(trust_anchors)
    for side, party in (("initiator", initiator), ("responder", responder)):
        status = verify_document(party.document, anchors, now)
        if not status:
            raise AuthError(side, status.value)

    n_init = nonce_source(32)
    n_resp = nonce_source(32)
    if len(n_init) != 32 or len(n_resp) != 32:
        raise AuthError("initiator", "BadNonce")

    # each side signs the nonce it received from its peer
    sig_init = initiator.keys.sign(
        challenge_bytes(n_resp, sha256(initiator.document.subject_public_key))
    )
    sig_resp = responder.keys.sign(
        challenge_bytes(n_init, sha256(responder.document.subject_public_key))
    )

    for side, party, peer_nonce, sig in (
        ("initiator", initiator, n_resp, sig_init),
        ("responder", responder, n_init, sig_resp),
    ):
        pub = party.document.subject_public_key
        if not verify_signature(pub, challenge_bytes(peer_nonce, sha256(pub)), sig):
            raise AuthError(side, DocStatus.BAD_SIGNATURE.value)

    # session ids come from the verified documents, never from self-claims
    return SessionToken(
        initiator.document.subject_id,
        responder.document.subject_id,
        n_init,
        n_resp,
        sig_init,
        sig_resp,
    )


def verify_session(token: SessionToken, initiator_key: bytes, responder_key: bytes) -> bool:
    return verify_signature(
        initiator_key,
        challenge_bytes(token.responder_nonce, sha256(initiator_key)),
        token.initiator_signature,
    ) and verify_signature(
        responder_key,
        challenge_bytes(token.initiator_nonce, sha256(responder_key)),
        token.responder_signature,
    )
