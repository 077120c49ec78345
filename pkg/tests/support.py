"""Small builders shared by the test modules."""

from ztfabric.identity import KeyPair, Party, generate_identity, issue_document

CA_ID = "ca"
CA = KeyPair.from_seed(bytes([0xCA]) * 32)
ANCHORS = ((CA_ID, CA.public),)


def seed_for(n: int) -> bytes:
    return n.to_bytes(4, "big") * 8


def make_party(agent_id, n, *, segment="s1", role="specialist", nb=0, na=1000, issuer=CA, issuer_id=CA_ID):
    ident, keys = generate_identity(seed_for(n), agent_id, segment, role)
    return Party(ident, keys, issue_document(issuer, issuer_id, ident, nb, na))
