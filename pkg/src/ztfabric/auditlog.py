"""Append-only Merkle event log, redundant-log cross-validation and run manifests.

The tree follows RFC 6962: ``leaf = H(0x00 || data)``, ``node = H(0x01 || l || r)``,
split at the largest power of two strictly below the subtree size. The root
of the empty log is ``H(b"")``.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Optional, Sequence

from .canonical import canonical, sha256


def leaf_hash(data: bytes) -> bytes:
    return sha256(b"\x00" + data)


def node_hash(left: bytes, right: bytes) -> bytes:
    return sha256(b"\x01" + left + right)


EMPTY_ROOT = sha256(b"")


def _split(n: int) -> int:
    k = 1
    while k << 1 < n:
        k <<= 1
    return k


@dataclass(frozen=True)
class LogEntry:
    seq: Optional[int]
    tick: int
    agent_id: str
    event_kind: str
    payload_hash: bytes
    geo_tag: Optional[str] = None

    def __post_init__(self):
        if self.geo_tag == "":
            object.__setattr__(self, "geo_tag", None)

    def encode(self) -> bytes:
        return canonical(
            self.seq, self.tick, self.agent_id, self.event_kind, self.payload_hash, self.geo_tag
        )


@dataclass(frozen=True)
class InclusionProof:
    seq: int
    tree_size: int
    path: tuple


@dataclass(frozen=True)
class ConsistencyProof:
    size1: int
    size2: int
    path: tuple


class CompactRange:
    """Running root over a growing leaf sequence in O(log n) memory."""

    def __init__(self):
        self._stack: list = []  # (size, hash), sizes strictly decreasing

    def push(self, leaf: bytes) -> None:
        size, h = 1, leaf
        while self._stack and self._stack[-1][0] == size:
            left_size, left = self._stack.pop()
            size, h = left_size + size, node_hash(left, h)
        self._stack.append((size, h))

    def root(self) -> bytes:
        if not self._stack:
            return EMPTY_ROOT
        h = self._stack[-1][1]
        for _, left in reversed(self._stack[:-1]):
            h = node_hash(left, h)
        return h


class MerkleLog:
    """Append-only log. There is deliberately no way to edit or remove entries."""

    def __init__(self):
        self._entries: list = []
        self._leaves: list = []
        self._compact = CompactRange()
        self._cache: dict = {}

    def __len__(self) -> int:
        return len(self._leaves)

    def append(self, entry: LogEntry) -> tuple[int, bytes]:
        seq = len(self._leaves)
        entry = replace(entry, seq=seq)
        leaf = leaf_hash(entry.encode())
        self._entries.append(entry)
        self._leaves.append(leaf)
        self._compact.push(leaf)
        return seq, self._compact.root()

    def record(self, tick: int, agent_id: str, event_kind: str, payload: bytes, geo_tag=None):
        return self.append(LogEntry(None, tick, agent_id, event_kind, sha256(payload), geo_tag))

    @property
    def entries(self) -> tuple:
        return tuple(self._entries)

    def entry(self, seq: int) -> LogEntry:
        return self._entries[seq]

    def leaf(self, seq: int) -> bytes:
        return self._leaves[seq]

    def root(self, size: Optional[int] = None) -> bytes:
        if size is None or size == len(self._leaves):
            return self._compact.root()
        if not 0 <= size <= len(self._leaves):
            raise ValueError(f"size {size} out of range")
        return self._subtree(0, size) if size else EMPTY_ROOT

    def _subtree(self, start: int, end: int) -> bytes:
        n = end - start
        if n == 1:
            return self._leaves[start]
        key = (start, end)
        h = self._cache.get(key)
        if h is None:
            k = _split(n)
            h = node_hash(self._subtree(start, start + k), self._subtree(start + k, end))
            self._cache[key] = h  # leaves never change, so any span is cacheable
        return h

    def prove_inclusion(self, seq: int, tree_size: int) -> InclusionProof:
        if not 0 <= seq < tree_size <= len(self._leaves):
            raise ValueError(f"bad inclusion request seq={seq} size={tree_size}")
        return InclusionProof(seq, tree_size, tuple(self._path(seq, 0, tree_size)))

    def _path(self, m: int, start: int, end: int) -> list:
        n = end - start
        if n == 1:
            return []
        k = _split(n)
        if m < k:
            return self._path(m, start, start + k) + [self._subtree(start + k, end)]
        return self._path(m - k, start + k, end) + [self._subtree(start, start + k)]

    def prove_consistency(self, size1: int, size2: int) -> ConsistencyProof:
        if not 0 < size1 <= size2 <= len(self._leaves):
            raise ValueError(f"bad consistency request {size1}->{size2}")
        if size1 == size2:
            return ConsistencyProof(size1, size2, ())
        return ConsistencyProof(size1, size2, tuple(self._subproof(size1, 0, size2, True)))

    def _subproof(self, m: int, start: int, end: int, complete: bool) -> list:
        n = end - start
        if m == n:
            return [] if complete else [self._subtree(start, end)]
        k = _split(n)
        if m <= k:
            return self._subproof(m, start, start + k, complete) + [self._subtree(start + k, end)]
        return self._subproof(m - k, start + k, end, False) + [self._subtree(start, start + k)]


def merkle_root(leaves: Sequence[bytes]) -> bytes:
    compact = CompactRange()
    for leaf in leaves:
        compact.push(leaf)
    return compact.root()


def verify_inclusion(
    root: bytes, entry: LogEntry, seq: int, tree_size: int, proof: InclusionProof
) -> bool:
    if entry.seq != seq or proof.seq != seq or proof.tree_size != tree_size:
        return False
    if not 0 <= seq < tree_size:
        return False
    fn, sn = seq, tree_size - 1
    r = leaf_hash(entry.encode())
    for p in proof.path:
        if sn == 0:
            return False
        if fn & 1 or fn == sn:
            r = node_hash(p, r)
            while not fn & 1 and fn != 0:
                fn >>= 1
                sn >>= 1
        else:
            r = node_hash(r, p)
        fn >>= 1
        sn >>= 1
    return sn == 0 and r == root


def verify_consistency(
    root1: bytes, root2: bytes, size1: int, size2: int, proof: ConsistencyProof
) -> bool:
    if proof.size1 != size1 or proof.size2 != size2:
        return False
    if not 0 < size1 <= size2:
        return False
    path = list(proof.path)
    if size1 == size2:
        return not path and root1 == root2
    if not path:
        return False
    if size1 & (size1 - 1) == 0:
        path.insert(0, root1)
    fn, sn = size1 - 1, size2 - 1
    while fn & 1:
        fn >>= 1
        sn >>= 1
    fr = sr = path[0]
    for c in path[1:]:
        if sn == 0:
            return False
        if fn & 1 or fn == sn:
            fr = node_hash(c, fr)
            sr = node_hash(c, sr)
            while not fn & 1 and fn != 0:
                fn >>= 1
                sn >>= 1
        else:
            sr = node_hash(sr, c)
        fn >>= 1
        sn >>= 1
    return sn == 0 and fr == root1 and sr == root2


# -- redundant logging -----------------------------------------------------


@dataclass(frozen=True)
class Discrepancy:
    kind: str  # MissingInA | MissingInB | TimestampSkew
    agent_id: str
    event_kind: str
    payload_hash: bytes
    tick_a: Optional[int] = None
    tick_b: Optional[int] = None

    def describe(self) -> str:
        where = f"agent={self.agent_id} event={self.event_kind} payload={self.payload_hash.hex()[:16]}"
        return f"{self.kind} {where} tick_a={self.tick_a} tick_b={self.tick_b}"


def _align(a: Sequence[LogEntry], b: Sequence[LogEntry], skew: int) -> list:
    """Cheapest order-preserving pairing of two runs of same-key entries.

    A pair within ``skew`` costs 0, a pair outside it costs 1, an unpaired
    entry costs 1. Returns ``[(i, j)]`` with ``None`` for an unpaired side.
    """
    n, m = len(a), len(b)
    if n == m and all(abs(x.tick - y.tick) <= skew for x, y in zip(a, b)):
        return list(zip(range(n), range(m)))  # the common case, no table needed
    cost = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        for j in range(m + 1):
            if i == 0 or j == 0:
                cost[i][j] = i + j
                continue
            pair = cost[i - 1][j - 1] + (abs(a[i - 1].tick - b[j - 1].tick) > skew)
            cost[i][j] = min(pair, cost[i - 1][j] + 1, cost[i][j - 1] + 1)
    out, i, j = [], n, m
    while i or j:
        if i and j and cost[i][j] == cost[i - 1][j - 1] + (abs(a[i - 1].tick - b[j - 1].tick) > skew):
            out.append((i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i and cost[i][j] == cost[i - 1][j] + 1:
            out.append((i - 1, None))
            i -= 1
        else:
            out.append((None, j - 1))
            j -= 1
    return out[::-1]


def cross_validate(
    log_a: Iterable[LogEntry], log_b: Iterable[LogEntry], skew: int = 0
) -> list:
    """Match entries of two redundant logs on (agent_id, event_kind, payload_hash).

    Repeated keys are paired by the cheapest order-preserving alignment, so a
    single suppressed entry is reported as exactly one ``MissingIn*``.
    Results list A-side findings in A's order, then entries only B holds.
    """
    if skew < 0:
        raise ValueError("skew must be >= 0")
    groups: tuple = (defaultdict(list), defaultdict(list))  # key -> [(position, entry)]
    for side, log in zip(groups, (log_a, log_b)):
        for pos, e in enumerate(log):
            side[(e.agent_id, e.event_kind, e.payload_hash)].append((pos, e))

    found_a, found_b = [], []
    for key in groups[0].keys() | groups[1].keys():
        a, b = groups[0].get(key, []), groups[1].get(key, [])
        for i, j in _align([e for _, e in a], [e for _, e in b], skew):
            if j is None:
                found_a.append((a[i][0], Discrepancy("MissingInB", *key, tick_a=a[i][1].tick)))
            elif i is None:
                found_b.append((b[j][0], Discrepancy("MissingInA", *key, tick_b=b[j][1].tick)))
            elif abs(a[i][1].tick - b[j][1].tick) > skew:
                d = Discrepancy("TimestampSkew", *key, tick_a=a[i][1].tick, tick_b=b[j][1].tick)
                found_a.append((a[i][0], d))
    return [d for _, d in sorted(found_a, key=lambda t: t[0])] + [
        d for _, d in sorted(found_b, key=lambda t: t[0])
    ]


# -- export format ---------------------------------------------------------

EXPORT_HEADER = "# ztfabric-log v1\tseq\ttick\tagent_id\tevent_kind\tpayload_hash\tgeo_tag\troot"


class LogFormatError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _check_text(value: str) -> str:
    if any(c in value for c in "\t\r\n"):
        raise ValueError(f"field contains tab or newline: {value!r}")
    return value


def export_log(log: MerkleLog) -> str:
    """One entry per line; the last column is the root after that append."""
    lines = [EXPORT_HEADER]
    compact = CompactRange()
    for e in log.entries:
        compact.push(leaf_hash(e.encode()))
        lines.append(
            "\t".join(
                [
                    str(e.seq),
                    str(e.tick),
                    _check_text(e.agent_id),
                    _check_text(e.event_kind),
                    e.payload_hash.hex(),
                    _check_text(e.geo_tag or ""),
                    compact.root().hex(),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def parse_export(text: str) -> list:
    """Return ``[(line_no, LogEntry, recorded_root)]``."""
    rows = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 7:
            raise LogFormatError(n, f"expected 7 columns, got {len(cols)}")
        try:
            entry = LogEntry(
                int(cols[0]), int(cols[1]), cols[2], cols[3], bytes.fromhex(cols[4]), cols[5] or None
            )
            root = bytes.fromhex(cols[6])
        except ValueError as exc:
            raise LogFormatError(n, str(exc)) from None
        if len(entry.payload_hash) != 32 or len(root) != 32:
            raise LogFormatError(n, "hash columns must be 32 bytes")
        if entry.seq < 0 or entry.tick < 0:
            raise LogFormatError(n, "negative seq or tick")
        rows.append((n, entry, root))
    return rows


def verify_export(rows: Sequence) -> list:
    """Recompute every running root; return ``[(line_no, seq, message)]``.

    Only the first root mismatch is reported since every later root inherits it.
    """
    problems = []
    compact = CompactRange()
    for expected_seq, (line, entry, root) in enumerate(rows):
        if entry.seq != expected_seq:
            problems.append((line, entry.seq, f"sequence gap: expected {expected_seq}"))
            break
        compact.push(leaf_hash(entry.encode()))
        if compact.root() != root:
            problems.append((line, entry.seq, "recorded root does not match recomputed root"))
            break
    return problems


def log_from_entries(entries: Iterable[LogEntry]) -> MerkleLog:
    log = MerkleLog()
    for e in entries:
        log.append(e)
    return log


# -- run manifest ----------------------------------------------------------

MANIFEST_FIELDS = (
    "algorithm_setup",
    "component_versions",
    "protocol_versions",
    "rng_seed",
    "intermediate_artifact_hashes",
    "final_results_hash",
    "kpi_progress",
)


@dataclass(frozen=True)
class RunManifest:
    algorithm_setup: Mapping[str, str]  # {"config_text", "sha256"}
    component_versions: Mapping[str, str]
    protocol_versions: Mapping[str, str]
    rng_seed: int
    intermediate_artifact_hashes: tuple  # ((label, hash), ...)
    final_results_hash: bytes
    kpi_progress: tuple  # ((tick, metric, value), ...)

    def to_json(self) -> str:
        doc = {
            "algorithm_setup": dict(self.algorithm_setup),
            "component_versions": dict(self.component_versions),
            "protocol_versions": dict(self.protocol_versions),
            "rng_seed": self.rng_seed,
            "intermediate_artifact_hashes": [
                {"label": label, "sha256": h.hex()} for label, h in self.intermediate_artifact_hashes
            ],
            "final_results_hash": self.final_results_hash.hex(),
            "kpi_progress": [
                {"tick": t, "metric": m, "value": v} for t, m, v in self.kpi_progress
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        doc = json.loads(text)
        missing = [f for f in MANIFEST_FIELDS if f not in doc]
        if missing or len(doc) != len(MANIFEST_FIELDS):
            raise ValueError(f"manifest fields wrong; missing={missing}")
        return cls(
            doc["algorithm_setup"],
            doc["component_versions"],
            doc["protocol_versions"],
            int(doc["rng_seed"]),
            tuple((a["label"], bytes.fromhex(a["sha256"])) for a in doc["intermediate_artifact_hashes"]),
            bytes.fromhex(doc["final_results_hash"]),
            tuple((k["tick"], k["metric"], k["value"]) for k in doc["kpi_progress"]),
        )


class ManifestMismatch(Exception):
    def __init__(self, label: str):
        super().__init__(f"artifact hash mismatch: {label}")
        self.label = label


def emit_manifest(
    config_text: str,
    component_versions: Mapping[str, str],
    protocol_versions: Mapping[str, str],
    rng_seed: int,
    artifacts: Sequence[tuple],
    final_results: bytes,
    kpi_progress: Iterable[tuple] = (),
) -> RunManifest:
    if not 0 <= rng_seed < 1 << 64:
        raise ValueError("rng_seed must fit in 64 bits")
    return RunManifest(
        {"config_text": config_text, "sha256": sha256(config_text.encode("utf-8")).hex()},
        dict(component_versions),
        dict(protocol_versions),
        rng_seed,
        tuple((label, sha256(data)) for label, data in artifacts),
        sha256(final_results),
        tuple(kpi_progress),
    )


def verify_manifest(
    manifest: RunManifest, artifacts: Mapping[str, bytes], final_results: bytes
) -> None:
    """Raise :class:`ManifestMismatch` naming the first artifact whose hash differs."""
    setup = manifest.algorithm_setup
    if sha256(setup["config_text"].encode("utf-8")).hex() != setup["sha256"]:
        raise ManifestMismatch("algorithm_setup")
    for label, digest in manifest.intermediate_artifact_hashes:
        data = artifacts.get(label)
        if data is None or sha256(data) != digest:
            raise ManifestMismatch(label)
    if sha256(final_results) != manifest.final_results_hash:
        raise ManifestMismatch("final_results")
