"""Command-line entry point.

Exit codes: 0 success, 1 verification failure detected (or a run declined at
an ``--approve`` checkpoint), 2 configuration or input error, 3 internal error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import traceback
from pathlib import Path
from typing import Callable, Optional

from . import __version__
from .auditlog import (
    LogEntry,
    LogFormatError,
    MerkleLog,
    cross_validate,
    emit_manifest,
    export_log,
    log_from_entries,
    parse_export,
    verify_export,
    verify_inclusion,
)
from .config import ConfigError, ScenarioConfig, format_config, parse_config
from .integrity import Fact, KnowledgeBase, append_provenance
from .packet import encode_packet, hexdump
from .policy import blast_radius
from .scenario import build_world
from .sim import (
    Defenses,
    RewriteChannel,
    TrialAborted,
    build_pipeline,
    inject_false_fact,
    make_queries,
    packet_trace,
    run_experiment,
)

log = logging.getLogger("ztfabric")

OK, VERIFICATION_FAILED, CONFIG_ERROR, INTERNAL_ERROR = 0, 1, 2, 3

PROTOCOL_VERSIONS = {
    "canonical-encoding": "1",
    "signature": "ed25519/rfc8032",
    "hash": "sha256",
    "merkle-log": "rfc6962",
    "guard-chain": "1",
    "log-export": "1",
    "scenario-config": "1",
}

SECONDARY_GEO = "site-b"


class UsageError(Exception):
    pass


def _prompt(question: str) -> bool:
    try:
        answer = input(f"{question} [y/N] ")
    except EOFError:
        return False
    return answer.strip().lower() in ("y", "yes")


# replaced in tests
approver: Callable[[str], bool] = _prompt


def _checkpoint(args, question: str) -> bool:
    return not args.approve or approver(question)


def _load(args) -> tuple[ScenarioConfig, str]:
    if not args.config:
        raise UsageError("--config is required")
    try:
        text = Path(args.config).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from None
    cfg = parse_config(text)
    if args.seed is not None:
        if not 0 <= args.seed < 1 << 64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
        cfg.seed = args.seed
        text = format_config(cfg)
    return cfg, text


def _out_dir(args, cfg: Optional[ScenarioConfig]) -> Path:
    out = Path(args.out or (cfg.output if cfg else "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _tagged(events: MerkleLog, geo: str) -> MerkleLog:
    """A log of the same event stream as written at site ``geo``."""
    return log_from_entries(
        LogEntry(None, e.tick, e.agent_id, e.event_kind, e.payload_hash, geo) for e in events.entries
    )


def _write_run(
    out: Path,
    config_text: str,
    seed: int,
    components: dict,
    intermediates: list,
    final: tuple,
    kpis: list,
) -> None:
    """Write artifacts and the manifest describing them."""
    for name, data in intermediates + [final]:
        (out / name).write_bytes(data)
    manifest = emit_manifest(
        config_text,
        {"ztfabric": __version__, **components},
        PROTOCOL_VERSIONS,
        seed,
        intermediates,
        final[1],
        kpis,
    )
    (out / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")


def _log_artifacts(events: MerkleLog, geo: str) -> list:
    """Primary log plus a redundant copy kept at a second site."""
    return [
        ("audit.log", export_log(_tagged(events, geo)).encode()),
        ("audit-b.log", export_log(_tagged(events, SECONDARY_GEO)).encode()),
    ]


# -- commands ----------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg, text = _load(args)
    exp = cfg.experiment
    if exp is None:
        raise ConfigError(1, "simulate needs an [experiment] section")
    rho = exp.rho if exp.mitigation else None
    channel = RewriteChannel(cfg.a, cfg.b)
    if not _checkpoint(args, f"run {exp.queries * exp.trials} trials over {exp.hops} hops?"):
        print("not approved", file=sys.stderr)
        return VERIFICATION_FAILED

    audit = MerkleLog()
    audit.record(0, "orchestrator", "run_start", text.encode())
    try:
        report = run_experiment(
            exp.queries,
            exp.hops,
            exp.trials,
            channel,
            rho,
            cfg.seed,
            exp.assertions,
            exp.adversary_hop,
            exp.workers,
            audit,
        )
    except TrialAborted as exc:
        print(f"trial aborted: {exc}", file=sys.stderr)
        return VERIFICATION_FAILED
    csv = report.to_csv()
    audit.record(len(audit), "orchestrator", "run_end", csv.encode())

    out = _out_dir(args, cfg)
    intermediates = _log_artifacts(audit, cfg.geo_tag)
    if args.dump_packet:
        topo = build_pipeline(exp.hops + 1, cfg.seed, exp.adversary_hop)
        query = make_queries(1, exp.assertions, cfg.seed)[0]
        packets = packet_trace(topo, query, channel, exp.rho, [cfg.seed, 0, 0])
        intermediates.append(("packet.hex", hexdump(encode_packet(packets[-1])).encode()))
    kpis = [
        (row.hop, f"{name}_mean", round(value, 6))
        for row in report.rows
        for name, value in row.mean._asdict().items()
    ]
    components = {
        f"agent{h}": f"markov-rewrite(a={cfg.a:g},b={cfg.b:g})" for h in range(1, exp.hops + 1)
    }
    if not _checkpoint(args, "write results?"):
        print("not approved", file=sys.stderr)
        return VERIFICATION_FAILED
    _write_run(out, text, cfg.seed, components, intermediates, ("report.csv", csv.encode()), kpis)
    intact = [t.protected_intact for t in report.trials if t.protected_intact is not None]
    if not all(intact):
        print("protected cluster mismatch detected", file=sys.stderr)
        return VERIFICATION_FAILED
    sys.stdout.write(csv)
    return OK


def cmd_attack(args) -> int:
    cfg, text = _load(args)
    att = cfg.attack
    if att is None:
        raise ConfigError(1, "attack needs an [attack] section")
    world = build_world(cfg)
    topo = world.topology(att.pipeline or None)
    kb = None
    if att.established is not None:
        honest = next(m for m in topo.members if m.agent_id not in {att.adversary, *att.colluders})
        rec = append_provenance(
            None, honest.identity, honest.keys, "created", att.established.encode(), 0
        )
        kb = KnowledgeBase({att.fact_key: Fact(att.fact_key, att.established, rec.record_hash)})
    if not _checkpoint(args, f"inject {att.fact_key}={att.fact_value} from {att.adversary}?"):
        print("not approved", file=sys.stderr)
        return VERIFICATION_FAILED

    audit = MerkleLog()
    report = inject_false_fact(
        topo,
        (att.fact_key, att.fact_value),
        att.adversary,
        Defenses(att.quorum) if att.defenses else None,
        cfg.seed,
        att.colluders,
        world.rules,
        world.sanctions,
        kb,
        world.escalation,
        audit,
    )
    out = _out_dir(args, cfg)
    csv = report.to_csv()
    kpis = [(0, "contaminated", report.contaminated), (0, "status", report.status.value)]
    _write_run(
        out,
        text,
        cfg.seed,
        {a: f"role={world.members[a].identity.role}" for a in world.members},
        _log_artifacts(audit, cfg.geo_tag),
        ("contamination.csv", csv.encode()),
        kpis,
    )
    sys.stdout.write(csv)
    print(f"contaminated={report.contaminated} status={report.status.value}"
          + (f" stopped={report.stopped_at}" if report.stopped_at else ""))
    return VERIFICATION_FAILED if report.contaminated else OK


def _read_log(path: str) -> list:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise UsageError(f"cannot read log {path}: {exc}") from None
    try:
        return parse_export(text)
    except LogFormatError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _sample(n: int, k: int = 16) -> list:
    if n == 0:
        return []
    step = max(1, n // k)
    return sorted(set(range(0, n, step)) | {n - 1})


def cmd_verify_log(args) -> int:
    cfg, text = (None, "") if not args.config else _load(args)
    skew = args.skew if args.skew is not None else (cfg.skew if cfg else 0)
    if skew < 0:
        raise UsageError("--skew must be >= 0")
    lines = []
    kpis = []
    logs = [(args.log, _read_log(args.log))]
    if args.second:
        logs.append((args.second, _read_log(args.second)))

    for path, rows in logs:
        for line, seq, msg in verify_export(rows):
            lines.append(f"{path}:{line}: entry seq={seq}: {msg}")
        merkle = log_from_entries(e for _, e, _ in rows)
        root = merkle.root()
        for seq in _sample(len(merkle)):
            proof = merkle.prove_inclusion(seq, len(merkle))
            if not verify_inclusion(root, merkle.entry(seq), seq, len(merkle), proof):
                lines.append(f"{path}: inclusion proof failed for seq={seq}")
        kpis.append((0, f"entries:{Path(path).name}", len(rows)))

    if len(logs) == 2:
        entries = [[e for _, e, _ in rows] for _, rows in logs]
        for d in cross_validate(entries[0], entries[1], skew):
            lines.append(d.describe())

    report = "".join(f"{l}\n" for l in lines) or "clean\n"
    sys.stdout.write(report)
    kpis.append((0, "discrepancies", len(lines)))
    out = _out_dir(args, cfg)
    setup = text or f"verify-log {' '.join(p for p, _ in logs)} skew={skew}\n"
    inputs = [(Path(p).name, Path(p).read_bytes()) for p, _ in logs]
    _write_run(out, setup, cfg.seed if cfg else 0, {}, inputs, ("verify_report.txt", report.encode()), kpis)
    return VERIFICATION_FAILED if lines else OK


def cmd_blast_radius(args) -> int:
    cfg, text = _load(args)
    world = build_world(cfg)
    if not args.agent:
        raise UsageError("--agent is required")
    if args.agent not in world.members:
        raise UsageError(f"unknown agent {args.agent!r}")
    reach = sorted(blast_radius(world.rules, world.sanctions, args.agent, world.roster))
    listing = "".join(f"{a}\n" for a in reach)
    sys.stdout.write(listing)
    out = _out_dir(args, cfg)
    tiers = {a: f"tier={s.tier}" for a, s in world.sanctions.items()}
    _write_run(
        out, text, cfg.seed, tiers, [], ("blast_radius.txt", listing.encode()),
        [(0, "blast_radius_size", len(reach))],
    )
    return OK


# -- argument parsing ----------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ztfabric", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    common = _Parser(add_help=False)
    common.add_argument("--config", help="scenario file")
    common.add_argument("--out", help="output directory (default: scenario output)")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--approve", action="store_true", help="ask before running and writing")

    p = sub.add_parser("simulate", parents=[common], help="rewrite-degradation experiment")
    p.add_argument("--dump-packet", action="store_true", help="also write packet.hex")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("attack", parents=[common], help="false-fact injection")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("verify-log", parents=[common], help="check log exports")
    p.add_argument("log")
    p.add_argument("--second", help="redundant log to cross-validate against")
    p.add_argument("--skew", type=int, help="allowed tick skew between logs")
    p.set_defaults(func=cmd_verify_log)

    p = sub.add_parser("blast-radius", parents=[common], help="reachable agent set")
    p.add_argument("--agent", required=True)
    p.set_defaults(func=cmd_blast_radius)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CONFIG_ERROR
    except SystemExit as exc:  # --help / --version
        return OK if not exc.code else CONFIG_ERROR
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return CONFIG_ERROR
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CONFIG_ERROR
    except Exception:
        traceback.print_exc()
        return INTERNAL_ERROR


if __name__ == "__main__":
    sys.exit(main())
