"""Pipeline simulator: rewrite degradation, the dual-cluster mitigation, and
false-fact injection against the shared knowledge base.

Rewrites are modeled per assertion as a three-state Markov chain::

                 a          b          1-a-b
    EXACT   -> EXACT  | MUTATED  | DROPPED
    MUTATED ->   --   | MUTATED (a+b) | DROPPED (1-a-b)
    DROPPED -> DROPPED

so after k hops P(EXACT) = a**k and P(not DROPPED) = (a+b)**k.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, NamedTuple, Optional, Sequence

import numpy as np

from . import packet as pk
from .auditlog import LogEntry, MerkleLog
from .canonical import canonical, sha256
from .identity import (
    AgentIdentity,
    AuthError,
    IdentityDocument,
    KeyPair,
    Party,
    generate_identity,
    issue_document,
    mutual_authenticate,
    verify_document,
)
from .integrity import (
    BrokenChain,
    Fact,
    KnowledgeBase,
    Status,
    append_provenance,
    check_record,
    endorse_fact,
    finalize,
    propose_fact,
    verify_provenance,
)
from .policy import (
    DEFAULT_ESCALATION,
    EscalationTable,
    PolicyRule,
    SanctionState,
    evaluate,
    record_violation,
)


class State(str, enum.Enum):
    EXACT = "EXACT"
    MUTATED = "MUTATED"
    DROPPED = "DROPPED"


@dataclass(frozen=True)
class Assertion:
    key: str
    value: str
    kind: str  # "term" | "numeric"
    state: State = State.EXACT


@dataclass(frozen=True)
class QueryItem:
    query_id: str
    references: tuple

    def __post_init__(self):
        keys = [r.key for r in self.references]
        if len(set(keys)) != len(keys):
            raise ValueError(f"duplicate assertion keys in {self.query_id}")


@dataclass(frozen=True)
class RewriteChannel:
    a: float = 0.6
    b: float = 0.2

    def __post_init__(self):
        if self.a < 0 or self.b < 0 or self.a + self.b > 1 + 1e-12:
            raise ValueError(f"need a, b >= 0 and a + b <= 1 (a={self.a}, b={self.b})")

    def transition_matrix(self) -> np.ndarray:
        a, b = self.a, self.b
        drop = max(0.0, 1.0 - a - b)
        return np.array([[a, b, drop], [0.0, a + b, drop], [0.0, 0.0, 1.0]])


def perturb(value: str, kind: str) -> str:
    """Deterministic stand-in for a paraphrase that keeps the key but not the value."""
    if kind == "numeric":
        try:
            return f"{float(value) * 1.1:g}"
        except ValueError:
            pass
    return f"~{value}"


def apply_channel(
    channel: RewriteChannel, assertions: Sequence[Assertion], rng: np.random.Generator
) -> list:
    """One Markov step per assertion; exactly one uniform draw per assertion, in order."""
    draws = rng.random(len(assertions))
    stay, keep = channel.a, channel.a + channel.b
    out = []
    for item, u in zip(assertions, draws):
        if item.state is State.EXACT:
            if u < stay:
                out.append(item)
            elif u < keep:
                out.append(replace(item, value=perturb(item.value, item.kind), state=State.MUTATED))
            else:
                out.append(replace(item, value="", state=State.DROPPED))
        elif item.state is State.MUTATED:
            out.append(item if u < keep else replace(item, value="", state=State.DROPPED))
        else:
            out.append(item)
    return out


class Scores(NamedTuple):
    grounding: float
    exactness: float
    verifiability: float
    aggregate: float


SCORE_NAMES = Scores._fields


def score(
    query: QueryItem, assertions: Sequence[Assertion], provenance_ok: Sequence[bool]
) -> Scores:
    """Score one hop's output against the query's reference assertions.

    All three criteria are fractions of the reference list, so an assertion
    that no longer survives counts against verifiability too.
    """
    n = len(query.references)
    if n == 0:
        raise ValueError("query has no reference assertions")
    if len(assertions) != n or len(provenance_ok) != n:
        raise ValueError("assertions and provenance flags must align with references")
    for ref, got in zip(query.references, assertions):
        if ref.key != got.key:
            raise ValueError(f"misaligned assertion {got.key!r} for reference {ref.key!r}")
    alive = [s.state is not State.DROPPED for s in assertions]
    exact = [
        s.state is State.EXACT and s.value == ref.value
        for s, ref in zip(assertions, query.references)
    ]
    g = sum(alive) / n
    e = sum(exact) / n
    v = sum(1 for a, ok in zip(alive, provenance_ok) if a and ok) / n
    return Scores(g, e, v, (g + e + v) / 3)


def expected_scores(channel: RewriteChannel, hops: int) -> tuple[float, float]:
    """(expected grounding, expected exactness) after ``hops`` rewrites."""
    m = channel.transition_matrix()
    dist = np.array([1.0, 0.0, 0.0])
    for _ in range(hops):
        dist = dist @ m
    grounding, exactness = float(dist[0] + dist[1]), float(dist[0])
    closed_g, closed_e = (channel.a + channel.b) ** hops, channel.a**hops
    if abs(grounding - closed_g) > 1e-12 or abs(exactness - closed_e) > 1e-12:
        raise ArithmeticError("transition-matrix power disagrees with closed form")
    return grounding, exactness


# -- topology ----------------------------------------------------------------


@dataclass(frozen=True)
class Member:
    identity: AgentIdentity
    keys: KeyPair
    document: IdentityDocument

    @property
    def agent_id(self) -> str:
        return self.identity.agent_id

    @property
    def party(self) -> Party:
        return Party(self.identity, self.keys, self.document)


@dataclass(frozen=True)
class Topology:
    """Ordered agent pipeline. The first member is the retrieval agent."""

    members: tuple
    trust_anchors: tuple  # ((issuer_id, public_key), ...)
    adversary_index: Optional[int] = None
    now: int = 0

    def __post_init__(self):
        if len(self.members) < 2:
            raise ValueError("a pipeline needs at least 2 agents")
        ids = [m.agent_id for m in self.members]
        if len(set(ids)) != len(ids):
            raise ValueError("agent ids must be unique")
        if self.adversary_index is not None and not 0 < self.adversary_index < len(self.members):
            raise ValueError("adversary index out of bounds")

    def index_of(self, agent_id: str) -> int:
        for i, m in enumerate(self.members):
            if m.agent_id == agent_id:
                return i
        raise KeyError(f"unknown agent {agent_id!r}")

    def key_lookup(self) -> dict:
        """Keys of members whose identity documents currently verify."""
        return {
            m.agent_id: m.document.subject_public_key
            for m in self.members
            if verify_document(m.document, self.trust_anchors, self.now)
        }


def derive_seed(master: int, *labels) -> bytes:
    return sha256(canonical("ztfabric-seed", master, *labels))


def build_pipeline(
    n_agents: int,
    seed: int,
    adversary_index: Optional[int] = None,
    authority_id: str = "ca",
) -> Topology:
    ca_keys = KeyPair.from_seed(derive_seed(seed, authority_id))
    members = []
    for i in range(n_agents):
        agent_id = "rag" if i == 0 else f"agent{i}"
        role = "adversary" if i == adversary_index else "specialist"
        ident, keys = generate_identity(derive_seed(seed, agent_id), agent_id, "pipeline", role)
        # a rogue agent can only vouch for itself
        issuer_id, issuer = (agent_id, keys) if i == adversary_index else (authority_id, ca_keys)
        members.append(Member(ident, keys, issue_document(issuer, issuer_id, ident, 0, 2**32)))
    return Topology(tuple(members), ((authority_id, ca_keys.public),), adversary_index)


def make_queries(n_queries: int, assertions_per_query: int, seed: int) -> list:
    """Synthetic reference sets: alternating numeric thresholds and code terms."""
    if n_queries < 1 or assertions_per_query < 1:
        raise ValueError("need at least one query and one assertion per query")
    rng = np.random.default_rng([seed, 0x51])
    terms = ("grounded", "bonded", "listed", "labeled", "enclosed", "accessible", "rated", "guarded")
    queries = []
    for q in range(n_queries):
        refs = []
        for j in range(assertions_per_query):
            if j % 2 == 0:
                refs.append(Assertion(f"q{q}.n{j}", str(int(rng.integers(1, 1000))), "numeric"))
            else:
                refs.append(Assertion(f"q{q}.t{j}", terms[int(rng.integers(len(terms)))], "term"))
        queries.append(QueryItem(f"q{q}", tuple(refs)))
    return queries


# -- trials ----------------------------------------------------------------


class TrialAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class TrialResult:
    scores: tuple  # Scores per hop 0..K
    transmissions: tuple  # sha256 of the message each hop's agent emitted
    protected_exact: Optional[tuple] = None  # per hop: all protected assertions EXACT
    protected_intact: Optional[bool] = None  # extracted bytes == sealed bytes


def encode_assertions(items: Sequence[Assertion]) -> bytes:
    return canonical(len(items)) + b"".join(canonical(a.key, a.value, a.kind) for a in items)


def decode_assertions(data: bytes) -> list:
    def take_field(pos):
        n = int.from_bytes(data[pos : pos + 4], "big")
        return data[pos + 4 : pos + 4 + n].decode("utf-8"), pos + 4 + n

    count = int.from_bytes(data[:8], "big")
    pos, out = 8, []
    for _ in range(count):
        key, pos = take_field(pos)
        value, pos = take_field(pos)
        kind, pos = take_field(pos)
        out.append(Assertion(key, value, kind))
    if pos != len(data):
        raise ValueError("trailing bytes in assertion encoding")
    return out


def protected_count(n: int, fraction: Optional[float]) -> int:
    if fraction is None:
        return 0
    if not 0 <= fraction <= 1:
        raise ValueError("protected fraction must be in [0, 1]")
    return math.ceil(fraction * n - 1e-12)


def _adversary_rewrite(items: Sequence[Assertion]) -> list:
    return [
        a if a.state is State.DROPPED else replace(a, value=perturb(a.value, a.kind), state=State.MUTATED)
        for a in items
    ]


def run_trial(
    topology: Topology,
    query: QueryItem,
    channel: RewriteChannel,
    protected_fraction: Optional[float] = None,
    seed=0,
) -> TrialResult:
    """Push one query's reference assertions down the pipeline.

    ``protected_fraction=None`` runs without the mitigation. Otherwise the
    first ``ceil(fraction * n)`` assertions travel in the sealed cluster of a
    dual-cluster packet and only the rest pass through the rewrite channel.
    """
    rng = np.random.default_rng(seed)
    lookup = topology.key_lookup()
    refs = list(query.references)
    n_prot = protected_count(len(refs), protected_fraction)
    protected, rewritable = refs[:n_prot], refs[n_prot:]
    mitigated = protected_fraction is not None

    origin = topology.members[0]
    # one provenance record per hop for the message carrying the rewritable assertions
    record = append_provenance(
        None, origin.identity, origin.keys, "created", encode_assertions(rewritable), 0
    )
    chain_ok = check_record(record, None, lookup) is None

    pkt = None
    sealed = b""
    if mitigated:
        sealed = encode_assertions(protected)
        packet_id = derive_seed(0, "packet", query.query_id, repr(seed))[:16]
        pkt = pk.seal(origin.identity, origin.keys, sealed, tuple(rewritable), packet_id)

    def hop_scores(current_rewritable, guard_ok):
        prot_state = [
            replace(p, state=State.EXACT) if guard_ok else replace(p, state=State.DROPPED)
            for p in protected
        ]
        items = prot_state + list(current_rewritable)
        flags = [guard_ok] * len(protected) + [chain_ok] * len(current_rewritable)
        return score(query, items, flags)

    first_msg = pk.encode_packet(pkt) if mitigated else encode_assertions(rewritable)
    scores = [hop_scores(rewritable, True)]
    transmissions = [sha256(first_msg)]
    prot_exact = [True] if mitigated else None

    for hop in range(1, len(topology.members)):
        member = topology.members[hop]
        adversarial = hop == topology.adversary_index

        def rewrite(items, _adv=adversarial):
            return _adversary_rewrite(items) if _adv else apply_channel(channel, items, rng)

        if mitigated:
            try:
                pkt = pk.forward(pkt, member.identity, member.keys, rewrite, lookup)
            except pk.GuardViolationError as exc:
                raise TrialAborted(f"{query.query_id} hop {hop}: {exc}") from exc
            if adversarial:
                pkt = replace(pkt, protected=replace(pkt.protected, payload=encode_assertions(_adversary_rewrite(protected))))
            rewritable = list(pkt.rewritable)
            received = decode_assertions(pkt.protected.payload)
            # full guard verification happens at the next forward / final extract
            guard_ok = sha256(pkt.protected.payload) == pkt.protected.content_hash
            prot_exact.append(guard_ok and received == protected)
            msg = pk.encode_packet(pkt)
        else:
            rewritable = rewrite(rewritable)
            guard_ok = True
            msg = encode_assertions(rewritable)

        prev_hash = record.record_hash
        record = append_provenance(
            record, member.identity, member.keys, "rewrite", encode_assertions(rewritable), hop
        )
        # prefix already checked, so checking the new link checks the whole chain
        chain_ok = chain_ok and check_record(record, prev_hash, lookup) is None
        scores.append(hop_scores(rewritable, guard_ok))
        transmissions.append(sha256(msg))

    intact = None
    if mitigated:
        try:
            intact = pk.extract_protected(pkt, lookup) == sealed
        except pk.GuardViolationError:
            intact = False
    return TrialResult(
        tuple(scores),
        tuple(transmissions),
        tuple(prot_exact) if prot_exact is not None else None,
        intact,
    )


def packet_trace(
    topology: Topology,
    query: QueryItem,
    channel: RewriteChannel,
    protected_fraction: float,
    seed=0,
) -> list:
    """The dual-cluster packet as emitted by each hop, stopping at the first refusal."""
    rng = np.random.default_rng(seed)
    lookup = topology.key_lookup()
    refs = list(query.references)
    n_prot = protected_count(len(refs), protected_fraction)
    origin = topology.members[0]
    packet_id = derive_seed(0, "packet", query.query_id, repr(seed))[:16]
    pkt = pk.seal(origin.identity, origin.keys, encode_assertions(refs[:n_prot]), tuple(refs[n_prot:]), packet_id)
    packets = [pkt]
    for member in topology.members[1:]:
        try:
            pkt = pk.forward(pkt, member.identity, member.keys, lambda items: apply_channel(channel, items, rng), lookup)
        except pk.GuardViolationError:
            break
        packets.append(pkt)
    return packets


# -- experiments -----------------------------------------------------------


@dataclass(frozen=True)
class HopSummary:
    hop: int
    mean: Scores
    ci: Scores  # 95% half-widths


@dataclass(frozen=True)
class ExperimentReport:
    rows: tuple
    n_samples: int
    params: Mapping[str, object] = field(default_factory=dict)
    trials: tuple = ()

    CSV_HEADER = (
        "hop,grounding_mean,grounding_ci,exactness_mean,exactness_ci,"
        "verifiability_mean,verifiability_ci,aggregate_mean,aggregate_ci"
    )

    def to_csv(self) -> str:
        lines = [self.CSV_HEADER]
        for row in self.rows:
            cells = [str(row.hop)]
            for m, c in zip(row.mean, row.ci):
                cells += [f"{m:.6f}", f"{c:.6f}"]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def standard_error(self, hop: int, name: str) -> float:
        return getattr(self.rows[hop].ci, name) / Z95


Z95 = 1.96


def summarize(trials: Sequence[TrialResult]) -> tuple:
    arr = np.array([[list(s) for s in t.scores] for t in trials])  # trial x hop x score
    n = arr.shape[0]
    means = arr.sum(axis=0) / n
    if n > 1:
        sd = arr.std(axis=0, ddof=1)
    else:
        sd = np.zeros_like(means)
    half = Z95 * sd / math.sqrt(n)
    rows = tuple(
        HopSummary(h, Scores(*map(float, means[h])), Scores(*map(float, half[h])))
        for h in range(arr.shape[1])
    )
    return rows


def _trial_job(args):
    return run_trial(*args)


def run_experiment(
    n_queries: int,
    hops: int,
    trials: int,
    channel: RewriteChannel = RewriteChannel(),
    protected_fraction: Optional[float] = None,
    seed: int = 0,
    assertions_per_query: int = 10,
    adversary_index: Optional[int] = None,
    workers: int = 1,
    log: Optional[MerkleLog] = None,
) -> ExperimentReport:
    """Run ``n_queries x trials`` independent trials over a ``hops + 1`` agent pipeline.

    Each trial draws from its own stream seeded by (seed, query, trial), so
    results do not depend on ``workers``.
    """
    if n_queries < 1 or trials < 1 or hops < 1:
        raise ValueError("n_queries, trials and hops must all be >= 1")
    topology = build_pipeline(hops + 1, seed, adversary_index)
    queries = make_queries(n_queries, assertions_per_query, seed)
    jobs = [
        (topology, q, channel, protected_fraction, [seed, qi, t])
        for qi, q in enumerate(queries)
        for t in range(trials)
    ]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_trial_job, jobs, chunksize=16))
    else:
        results = [_trial_job(j) for j in jobs]

    if log is not None:
        tick = 0
        for res in results:
            for hop, digest in enumerate(res.transmissions):
                log.append(LogEntry(None, tick, topology.members[hop].agent_id, "transmit", digest))
                tick += 1

    params = {
        "n_queries": n_queries,
        "hops": hops,
        "trials": trials,
        "a": channel.a,
        "b": channel.b,
        "mitigation": "off" if protected_fraction is None else "on",
        "rho": protected_fraction,
        "seed": seed,
        "assertions_per_query": assertions_per_query,
    }
    return ExperimentReport(summarize(results), len(results), params, tuple(results))


# -- false-fact injection --------------------------------------------------


@dataclass(frozen=True)
class Defenses:
    quorum: int = 3

    def __post_init__(self):
        if self.quorum < 1:
            raise ValueError("quorum must be >= 1")


@dataclass(frozen=True)
class ContaminationReport:
    fact: Fact
    accepted_by: Mapping[str, bool]  # agent_id -> contaminated, in pipeline order
    defenses_enabled: bool
    status: Status
    stopped_at: Optional[str] = None  # why propagation halted, if it did

    @property
    def contaminated(self) -> int:
        return sum(self.accepted_by.values())

    def to_csv(self) -> str:
        lines = ["agent_id,contaminated"]
        lines += [f"{a},{int(v)}" for a, v in self.accepted_by.items()]
        return "\n".join(lines) + "\n"


FACT_KIND = "fact"


def chain_rules(topology: Topology) -> list:
    ids = [m.agent_id for m in topology.members]
    return [PolicyRule(s, d, frozenset({FACT_KIND})) for s, d in zip(ids, ids[1:])]


def inject_false_fact(
    topology: Topology,
    fact: tuple,
    adversary_id: str,
    defenses: Optional[Defenses],
    seed: int = 0,
    colluders: Sequence[str] = (),
    rules: Optional[Sequence[PolicyRule]] = None,
    sanctions: Optional[Mapping[str, SanctionState]] = None,
    kb: Optional[KnowledgeBase] = None,
    escalation: EscalationTable = DEFAULT_ESCALATION,
    log: Optional[MerkleLog] = None,
) -> ContaminationReport:
    """An insider injects ``fact = (key, value)`` and it flows down the pipeline.

    Without defenses every agent downstream of the adversary stores it. With
    defenses each hop must pass mutual authentication, policy, and provenance
    checks, and the fact must clear a quorum in the shared knowledge base;
    only ``adversary_id`` and ``colluders`` ever endorse it.
    """
    start = topology.index_of(adversary_id)
    hostile = {adversary_id, *colluders}
    for c in colluders:
        topology.index_of(c)
    rng = np.random.default_rng([seed, 0xA7])
    now = topology.now
    adversary = topology.members[start]
    key, value = fact

    def note(agent_id, kind, payload: bytes):
        if log is not None:
            log.record(now, agent_id, kind, payload)

    origin = append_provenance(
        None, adversary.identity, adversary.keys, "created", canonical(key, value), now
    )
    false_fact = Fact(key, value, origin.record_hash)
    note(adversary_id, "inject", false_fact.signed_bytes())
    accepted_by = {m.agent_id: False for m in topology.members}
    downstream = topology.members[start + 1 :]

    if defenses is None:
        for m in downstream:
            if m.agent_id not in hostile:
                accepted_by[m.agent_id] = True
                note(m.agent_id, "accept", false_fact.signed_bytes())
        return ContaminationReport(false_fact, accepted_by, False, Status.ACCEPTED)

    lookup = topology.key_lookup()
    rules = chain_rules(topology) if rules is None else list(rules)
    sanctions = dict(sanctions or {})
    kb = kb or KnowledgeBase()

    proposal = propose_fact(kb, false_fact, adversary_id)
    for m in topology.members:
        if m.agent_id in hostile:
            proposal = endorse_fact(proposal, m.identity, m.keys)
    kb, status = finalize(kb, proposal, defenses.quorum, lookup)
    note(adversary_id, f"finalize:{status.value}", false_fact.signed_bytes())
    if status is Status.FLAGGED:
        sanctions[adversary_id] = record_violation(
            sanctions.get(adversary_id, SanctionState(adversary_id)), "contradiction", now, escalation
        )

    stopped = None
    sender = adversary
    for receiver in downstream:
        try:
            mutual_authenticate(
                sender.party, receiver.party, rng.bytes, topology.trust_anchors, now
            )
        except AuthError as exc:
            stopped = f"auth:{exc.side}:{exc.reason}"
            note(receiver.agent_id, "auth_failure", canonical(sender.agent_id, exc.reason))
            break
        decision = evaluate(rules, sanctions, sender.identity, receiver.identity, FACT_KIND)
        if not decision:
            stopped = f"policy:{decision.value}"
            note(receiver.agent_id, "policy_deny", canonical(sender.agent_id, decision.value))
            break
        try:
            verify_provenance([origin], lookup)
        except BrokenChain as exc:
            stopped = f"provenance:{exc.reason.value}"
            note(receiver.agent_id, "provenance_broken", canonical(exc.index))
            break
        if status is not Status.ACCEPTED:
            stopped = f"quorum:{status.value}"
            note(receiver.agent_id, "reject", false_fact.signed_bytes())
            break
        if receiver.agent_id not in hostile:
            accepted_by[receiver.agent_id] = True
        note(receiver.agent_id, "accept", false_fact.signed_bytes())
        sender = receiver

    return ContaminationReport(false_fact, accepted_by, True, status, stopped)
