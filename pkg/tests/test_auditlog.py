import hashlib
import json
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ztfabric.auditlog import (
    EMPTY_ROOT,
    MANIFEST_FIELDS,
    LogEntry,
    LogFormatError,
    ManifestMismatch,
    MerkleLog,
    RunManifest,
    cross_validate,
    emit_manifest,
    export_log,
    log_from_entries,
    merkle_root,
    parse_export,
    verify_consistency,
    verify_export,
    verify_inclusion,
)


# -- reference construction: the recursive definitions, written out directly --


def H(b):
    return hashlib.sha256(b).digest()


def ref_mth(leaves):
    n = len(leaves)
    if n == 0:
        return H(b"")
    if n == 1:
        return H(b"\x00" + leaves[0])
    k = 1
    while k * 2 < n:
        k *= 2
    return H(b"\x01" + ref_mth(leaves[:k]) + ref_mth(leaves[k:]))


def _k(n):
    k = 1
    while k * 2 < n:
        k *= 2
    return k


def ref_path(m, leaves):
    n = len(leaves)
    if n == 1:
        return []
    k = _k(n)
    if m < k:
        return ref_path(m, leaves[:k]) + [ref_mth(leaves[k:])]
    return ref_path(m - k, leaves[k:]) + [ref_mth(leaves[:k])]


def ref_subproof(m, leaves, b):
    n = len(leaves)
    if m == n:
        return [] if b else [ref_mth(leaves)]
    k = _k(n)
    if m <= k:
        return ref_subproof(m, leaves[:k], b) + [ref_mth(leaves[k:])]
    return ref_subproof(m - k, leaves[k:], False) + [ref_mth(leaves[:k])]


def entry(i, agent="a", kind="transmit", tick=None, geo=None):
    return LogEntry(None, i if tick is None else tick, agent, kind, H(str(i).encode()), geo)


def build(n, **kw):
    log = MerkleLog()
    for i in range(n):
        log.append(entry(i, **kw))
    return log


def encoded(log):
    return [e.encode() for e in log.entries]


# -- append and roots --------------------------------------------------------


def test_empty_root():
    assert MerkleLog().root() == EMPTY_ROOT == H(b"")


def test_append_assigns_seq_and_returns_root():
    log = MerkleLog()
    seq, root = log.append(entry(0))
    assert seq == 0 and root == log.root() == H(b"\x00" + log.entry(0).encode())


def test_same_entries_same_roots():
    assert build(9).root() == build(9).root()


def test_seven_leaf_root_matches_reference():
    log = build(7)
    assert log.root() == ref_mth(encoded(log))


@pytest.mark.parametrize("n", range(0, 34))
def test_roots_match_reference(n):
    log = build(n)
    leaves = encoded(log)
    assert log.root() == ref_mth(leaves) == merkle_root([H(b"\x00" + l) for l in leaves]) or n == 0
    for size in range(n + 1):
        assert log.root(size) == ref_mth(leaves[:size])


def test_no_mutation_api():
    log = build(3)
    assert not any(hasattr(log, name) for name in ("update", "delete", "remove", "truncate", "__setitem__"))
    with pytest.raises((AttributeError, TypeError)):
        log.entries[0] = entry(5)


# -- inclusion -------------------------------------------------------------------


def test_size_one_inclusion():
    log = build(1)
    proof = log.prove_inclusion(0, 1)
    assert proof.path == ()
    assert log.root() == H(b"\x00" + log.entry(0).encode())
    assert verify_inclusion(log.root(), log.entry(0), 0, 1, proof)


def test_every_inclusion_in_16_leaf_log():
    log = build(16)
    leaves = encoded(log)
    for size in range(1, 17):
        root = log.root(size)
        for seq in range(size):
            proof = log.prove_inclusion(seq, size)
            assert list(proof.path) == ref_path(seq, leaves[:size])
            assert verify_inclusion(root, log.entry(seq), seq, size, proof)


def test_flipped_proof_node_fails():
    log = build(11)
    proof = log.prove_inclusion(4, 11)
    bad = bytearray(proof.path[1])
    bad[3] ^= 0x10
    path = proof.path[:1] + (bytes(bad),) + proof.path[2:]
    assert not verify_inclusion(log.root(), log.entry(4), 4, 11, replace(proof, path=path))


def test_inclusion_rejects_wrong_position_and_size():
    log = build(8)
    proof = log.prove_inclusion(3, 8)
    assert not verify_inclusion(log.root(), log.entry(3), 2, 8, replace(proof, seq=2))
    assert not verify_inclusion(log.root(), log.entry(2), 3, 8, proof)
    # size and root travel together in a tree head; a size-8 proof does not fit the size-7 root
    assert not verify_inclusion(log.root(7), log.entry(3), 3, 7, replace(proof, tree_size=7))
    assert not verify_inclusion(log.root(), log.entry(3), 3, 8, replace(proof, path=proof.path + (bytes(32),)))
    assert not verify_inclusion(log.root(), log.entry(3), 3, 8, replace(proof, path=proof.path[:-1]))


def test_bad_inclusion_requests():
    log = build(4)
    for seq, size in [(4, 4), (0, 5), (-1, 3), (0, 0)]:
        with pytest.raises(ValueError):
            log.prove_inclusion(seq, size)


# -- consistency -----------------------------------------------------------------


def test_equal_sizes_trivial():
    log = build(6)
    proof = log.prove_consistency(6, 6)
    assert proof.path == ()
    assert verify_consistency(log.root(), log.root(), 6, 6, proof)


def test_five_to_eleven():
    log = build(11)
    proof = log.prove_consistency(5, 11)
    assert list(proof.path) == ref_subproof(5, encoded(log), True)
    assert verify_consistency(log.root(5), log.root(11), 5, 11, proof)


def test_root_from_other_log_fails():
    log, other = build(11), build(5, agent="b")
    proof = log.prove_consistency(5, 11)
    assert not verify_consistency(other.root(), log.root(), 5, 11, proof)


def test_every_consistency_up_to_16():
    log = build(16)
    leaves = encoded(log)
    for s2 in range(1, 17):
        for s1 in range(1, s2 + 1):
            proof = log.prove_consistency(s1, s2)
            if s1 < s2:
                assert list(proof.path) == ref_subproof(s1, leaves[:s2], True)
            assert verify_consistency(log.root(s1), log.root(s2), s1, s2, proof)


# -- cross validation --------------------------------------------------------------


def test_identical_logs():
    assert cross_validate(build(5).entries, build(5, geo="b").entries) == []


def test_deleted_from_b():
    a = build(5).entries
    b = a[:2] + a[3:]
    (d,) = cross_validate(a, b)
    assert d.kind == "MissingInB" and d.payload_hash == a[2].payload_hash


def test_extra_in_b():
    a = build(5).entries
    (d,) = cross_validate(a[:4], a)
    assert d.kind == "MissingInA"


def test_timestamp_skew():
    a = [entry(0, tick=100)]
    b = [entry(0, tick=110)]
    (d,) = cross_validate(a, b, skew=5)
    assert (d.kind, d.tick_a, d.tick_b) == ("TimestampSkew", 100, 110)
    assert cross_validate(a, b, skew=10) == []


def test_negative_skew():
    with pytest.raises(ValueError):
        cross_validate([], [], -1)


def test_duplicate_events_pair_in_order():
    e = entry(0)
    a = [e, e, e]
    assert [d.kind for d in cross_validate(a, [e, e])] == ["MissingInB"]


# -- export ---------------------------------------------------------------------


def test_export_round_trip():
    log = build(10, geo="site-a")
    rows = parse_export(export_log(log))
    assert [e for _, e, _ in rows] == list(log.entries)
    assert rows[-1][2] == log.root()
    assert verify_export(rows) == []
    assert log_from_entries(e for _, e, _ in rows).root() == log.root()


def test_edited_hex_digit_named():
    text = export_log(build(6)).splitlines()
    cols = text[4].split("\t")
    cols[4] = ("0" if cols[4][0] != "0" else "1") + cols[4][1:]
    text[4] = "\t".join(cols)
    problems = verify_export(parse_export("\n".join(text)))
    assert problems == [(5, 3, "recorded root does not match recomputed root")]


def test_malformed_export():
    with pytest.raises(LogFormatError) as err:
        parse_export("# header\n0\t0\ta\n")
    assert err.value.line == 2
    with pytest.raises(LogFormatError):
        parse_export("0\t0\ta\tk\tzz\t\t" + "00" * 32 + "\n")


def test_export_rejects_tabs_in_fields():
    log = MerkleLog()
    log.append(LogEntry(None, 0, "a\tb", "k", bytes(32)))
    with pytest.raises(ValueError):
        export_log(log)


# -- manifest -------------------------------------------------------------------


def manifest():
    return emit_manifest(
        "seed = 1\n",
        {"agent1": "v1"},
        {"hash": "sha256"},
        1,
        [("audit.log", b"log bytes"), ("trace", b"trace bytes")],
        b"final",
        [(0, "m", 1.0)],
    )


def test_manifest_has_seven_fields():
    doc = json.loads(manifest().to_json())
    assert sorted(doc) == sorted(MANIFEST_FIELDS) and len(MANIFEST_FIELDS) == 7
    assert RunManifest.from_json(manifest().to_json()) == manifest()


def test_manifest_verifies_untouched():
    m = manifest()
    m_artifacts = {"audit.log": b"log bytes", "trace": b"trace bytes"}
    assert m.algorithm_setup["sha256"] == H(b"seed = 1\n").hex()
    from ztfabric.auditlog import verify_manifest

    verify_manifest(m, m_artifacts, b"final")
    with pytest.raises(ManifestMismatch) as err:
        verify_manifest(m, {**m_artifacts, "trace": b"trace bytez"}, b"final")
    assert err.value.label == "trace"
    with pytest.raises(ManifestMismatch) as err:
        verify_manifest(m, m_artifacts, b"finaL")
    assert err.value.label == "final_results"
    with pytest.raises(ManifestMismatch) as err:
        verify_manifest(replace(m, algorithm_setup={**m.algorithm_setup, "config_text": "seed = 2\n"}), m_artifacts, b"final")
    assert err.value.label == "algorithm_setup"


def test_manifest_rejects_missing_field():
    doc = json.loads(manifest().to_json())
    del doc["rng_seed"]
    with pytest.raises(ValueError):
        RunManifest.from_json(json.dumps(doc))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2**32), st.sampled_from("abc"), st.binary(max_size=8)), max_size=40), st.integers(0, 39))
def test_random_logs_against_reference(events, pick):
    log = MerkleLog()
    for tick, agent, payload in events:
        log.record(tick, agent, "ev", payload)
    assert log.root() == ref_mth(encoded(log))
    if events:
        seq = pick % len(events)
        proof = log.prove_inclusion(seq, len(log))
        assert verify_inclusion(log.root(), log.entry(seq), seq, len(log), proof)


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.tuples(st.sampled_from("ab"), st.integers(0, 3)), min_size=1, max_size=30),
    st.data(),
)
def test_one_suppressed_entry_is_one_finding(events, data):
    a = [LogEntry(i, 10 * i, agent, "ev", H(bytes([p]))) for i, (agent, p) in enumerate(events)]
    gone = data.draw(st.integers(0, len(a) - 1))
    skew = data.draw(st.integers(0, 4))
    jitter = data.draw(st.lists(st.integers(-skew, skew), min_size=len(a), max_size=len(a)))
    b = [replace(e, tick=e.tick + 20 + d) for e, d in zip(a, jitter)]
    assert cross_validate(a, [replace(e, tick=e.tick - 20) for e in b], skew) == []
    b_shifted = [replace(e, tick=e.tick - 20) for e in b[:gone] + b[gone + 1 :]]
    (d,) = cross_validate(a, b_shifted, skew)
    assert d.kind == "MissingInB" and (d.agent_id, d.payload_hash) == (a[gone].agent_id, a[gone].payload_hash)
