"""Scenario configuration: a small line-oriented ``key = value`` format.

Layout::

    # comment
    [scenario]            singleton sections: scenario, authority, sanctions,
    seed = 42             anomaly, channel, experiment, attack, audit
    [agent rag]           one section per agent
    role = specialist
    [rule]                each [rule] header starts a new allow rule
    src = ingest
    dst = rag
    kinds = data, fact

Singleton keys may also be written at top level in dotted form
(``channel.a = 0.6``). Unknown sections and keys are errors.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional

from .canonical import canonical, sha256
from .identity import ROLES


class ConfigError(Exception):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.message = message


CREDENTIALS = ("valid", "expired", "self-signed")


@dataclass
class AgentSpec:
    agent_id: str
    segment: str = "default"
    role: str = "specialist"
    seed: Optional[bytes] = None
    credential: str = "valid"
    violations: int = 0
    line: int = field(default=0, compare=False, repr=False)


@dataclass
class RuleSpec:
    src: str
    dst: str
    kinds: tuple
    line: int = field(default=0, compare=False, repr=False)


@dataclass
class ExperimentSpec:
    queries: int = 30
    hops: int = 6
    trials: int = 20
    assertions: int = 10
    mitigation: bool = False
    rho: float = 0.5
    adversary_hop: Optional[int] = None
    workers: int = 1


@dataclass
class AttackSpec:
    adversary: str = ""
    fact_key: str = ""
    fact_value: str = ""
    colluders: tuple = ()
    quorum: int = 3
    defenses: bool = True
    pipeline: tuple = ()
    established: Optional[str] = None


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    seed: int = 0
    output: str = "out"
    authority_id: str = "ca"
    authority_seed: Optional[bytes] = None
    agents: list = field(default_factory=list)
    rules: list = field(default_factory=list)
    throttled: int = 1
    restricted: int = 3
    quarantined: int = 5
    rate_factor: float = 3.0
    histogram_distance: float = 0.5
    a: float = 0.6
    b: float = 0.2
    experiment: Optional[ExperimentSpec] = None
    attack: Optional[AttackSpec] = None
    skew: int = 0
    geo_tag: str = "site-a"

    def agent(self, agent_id: str) -> AgentSpec:
        for spec in self.agents:
            if spec.agent_id == agent_id:
                return spec
        raise KeyError(agent_id)

    @property
    def segments(self) -> set:
        return {a.segment for a in self.agents}


# -- value parsers -------------------------------------------------------------


def _u64(v: str) -> int:
    n = int(v, 0)
    if not 0 <= n < 1 << 64:
        raise ValueError("must be an unsigned 64-bit integer")
    return n


def _nonneg(v: str) -> int:
    n = int(v, 0)
    if n < 0:
        raise ValueError("must be >= 0")
    return n


def _positive(v: str) -> int:
    n = int(v, 0)
    if n < 1:
        raise ValueError("must be >= 1")
    return n


def _prob(v: str) -> float:
    x = float(v)
    if not 0.0 <= x <= 1.0:
        raise ValueError("probability must be in [0, 1]")
    return x


def _pos_float(v: str) -> float:
    x = float(v)
    if not x > 0:
        raise ValueError("must be > 0")
    return x


def _bool(v: str) -> bool:
    low = v.lower()
    if low in ("on", "true", "yes", "1"):
        return True
    if low in ("off", "false", "no", "0"):
        return False
    raise ValueError("expected on/off")


def _word(v: str) -> str:
    if not v or any(c.isspace() for c in v) or "," in v:
        raise ValueError("expected a single non-empty word")
    return v


def _text(v: str) -> str:
    if not v:
        raise ValueError("value must be non-empty")
    return v


def _list(v: str) -> tuple:
    items = tuple(x.strip() for x in v.split(","))
    if not all(items):
        raise ValueError("empty item in list")
    return items


def _seed_bytes(v: str) -> bytes:
    if re.fullmatch(r"[0-9a-fA-F]{64}", v):
        return bytes.fromhex(v)
    return sha256(canonical("config-seed", _u64(v)))


def _role(v: str) -> str:
    if v not in ROLES:
        raise ValueError(f"role must be one of {sorted(ROLES)}")
    return v


def _credential(v: str) -> str:
    if v not in CREDENTIALS:
        raise ValueError(f"credential must be one of {list(CREDENTIALS)}")
    return v


# section -> key -> (attribute, parser)
SINGLETONS = {
    "scenario": {"name": ("name", _word), "seed": ("seed", _u64), "output": ("output", _text)},
    "authority": {"id": ("authority_id", _word), "seed": ("authority_seed", _seed_bytes)},
    "sanctions": {
        "throttled": ("throttled", _positive),
        "restricted": ("restricted", _positive),
        "quarantined": ("quarantined", _positive),
    },
    "anomaly": {
        "rate_factor": ("rate_factor", _pos_float),
        "histogram_distance": ("histogram_distance", _pos_float),
    },
    "channel": {"a": ("a", _prob), "b": ("b", _prob)},
    "experiment": {
        "queries": ("queries", _positive),
        "hops": ("hops", _positive),
        "trials": ("trials", _positive),
        "assertions": ("assertions", _positive),
        "mitigation": ("mitigation", _bool),
        "rho": ("rho", _prob),
        "adversary_hop": ("adversary_hop", _positive),
        "workers": ("workers", _positive),
    },
    "attack": {
        "adversary": ("adversary", _word),
        "key": ("fact_key", _text),
        "value": ("fact_value", _text),
        "colluders": ("colluders", _list),
        "quorum": ("quorum", _positive),
        "defenses": ("defenses", _bool),
        "pipeline": ("pipeline", _list),
        "established": ("established", _text),
    },
    "audit": {"skew": ("skew", _nonneg), "geo": ("geo_tag", _word)},
}

AGENT_KEYS = {
    "segment": ("segment", _word),
    "role": ("role", _role),
    "seed": ("seed", _seed_bytes),
    "credential": ("credential", _credential),
    "violations": ("violations", _nonneg),
}

RULE_KEYS = {"src": ("src", _word), "dst": ("dst", _word), "kinds": ("kinds", _list)}

_HEADER = re.compile(r"^\[\s*([a-z_]+)(?:\s+([^\s\]]+))?\s*\]$")
_ASSIGN = re.compile(r"^([A-Za-z_][A-Za-z0-9_.]*)\s*=\s*(.*)$")


def parse_config(text: str) -> ScenarioConfig:
    """Parse scenario text; raises :class:`ConfigError` with a 1-based line number."""
    cfg = ScenarioConfig()
    seen: dict = {}  # (section, key) -> line, for duplicate detection
    key_lines: dict = {}  # (section, key) -> line, for later validation messages
    section: Optional[str] = None
    target = None  # AgentSpec | RuleSpec being filled
    rule_keys: set = set()
    rule_line = 0

    def close_rule():
        if isinstance(target, dict):
            missing = {"src", "dst", "kinds"} - rule_keys
            if missing:
                raise ConfigError(rule_line, f"rule missing {sorted(missing)}")
            cfg.rules.append(RuleSpec(target["src"], target["dst"], target["kinds"], rule_line))

    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _HEADER.match(line)
        if m:
            close_rule()
            kind, name = m.group(1), m.group(2)
            target = None
            if kind == "agent":
                if not name:
                    raise ConfigError(n, "agent section needs an id: [agent <id>]")
                if any(a.agent_id == name for a in cfg.agents):
                    raise ConfigError(n, f"duplicate agent {name!r}")
                target = AgentSpec(name, line=n)
                cfg.agents.append(target)
                section = f"agent {name}"
            elif kind == "rule":
                if name:
                    raise ConfigError(n, "[rule] takes no name")
                target, rule_keys, rule_line = {}, set(), n
                section = "rule"
            elif kind in SINGLETONS:
                if name:
                    raise ConfigError(n, f"[{kind}] takes no name")
                if ("section", kind) in seen:
                    raise ConfigError(n, f"duplicate section [{kind}]")
                seen[("section", kind)] = n
                section = kind
                _ensure_subsection(cfg, kind)
            else:
                raise ConfigError(n, f"unknown section [{kind}]")
            continue

        m = _ASSIGN.match(line)
        if not m:
            raise ConfigError(n, f"expected 'key = value' or '[section]', got {line!r}")
        key, value = m.group(1), m.group(2).strip()

        if "." in key:
            sec, _, sub = key.partition(".")
            if sec not in SINGLETONS or "." in sub:
                raise ConfigError(n, f"unknown key {key!r}")
            _ensure_subsection(cfg, sec)
            _assign(cfg, sec, sub, value, n, seen, key_lines)
            continue
        if section is None:
            raise ConfigError(n, f"key {key!r} outside any section")
        if section == "rule":
            if key not in RULE_KEYS:
                raise ConfigError(n, f"unknown key {key!r} in [rule]")
            if key in rule_keys:
                raise ConfigError(n, f"duplicate key {key!r}")
            attr, conv = RULE_KEYS[key]
            target[attr] = _convert(conv, value, n, key)
            rule_keys.add(key)
        elif section.startswith("agent "):
            if key not in AGENT_KEYS:
                raise ConfigError(n, f"unknown key {key!r} in [{section}]")
            if (section, key) in seen:
                raise ConfigError(n, f"duplicate key {key!r}")
            seen[(section, key)] = n
            attr, conv = AGENT_KEYS[key]
            setattr(target, attr, _convert(conv, value, n, key))
        else:
            _assign(cfg, section, key, value, n, seen, key_lines)
    close_rule()
    _validate(cfg, key_lines)
    return cfg


def _ensure_subsection(cfg: ScenarioConfig, sec: str) -> None:
    if sec == "experiment" and cfg.experiment is None:
        cfg.experiment = ExperimentSpec()
    if sec == "attack" and cfg.attack is None:
        cfg.attack = AttackSpec()


def _convert(conv, value, line, key):
    try:
        return conv(value)
    except ValueError as exc:
        raise ConfigError(line, f"{key}: {exc}") from None


def _assign(cfg, sec, key, value, line, seen, key_lines):
    table = SINGLETONS[sec]
    if key not in table:
        raise ConfigError(line, f"unknown key {key!r} in [{sec}]")
    if (sec, key) in seen:
        raise ConfigError(line, f"duplicate key {sec}.{key}")
    seen[(sec, key)] = line
    key_lines[(sec, key)] = line
    attr, conv = table[key]
    obj = {"experiment": cfg.experiment, "attack": cfg.attack}.get(sec, cfg)
    setattr(obj, attr, _convert(conv, value, line, f"{sec}.{key}"))


def _validate(cfg: ScenarioConfig, key_lines: dict) -> None:
    def line_of(*keys):
        found = [key_lines[k] for k in keys if k in key_lines]
        return max(found) if found else 1

    if cfg.a + cfg.b > 1 + 1e-12:
        raise ConfigError(
            line_of(("channel", "a"), ("channel", "b")), "channel.a + channel.b must be <= 1"
        )
    if not cfg.throttled <= cfg.restricted <= cfg.quarantined:
        raise ConfigError(
            line_of(("sanctions", "throttled"), ("sanctions", "restricted"), ("sanctions", "quarantined")),
            "sanction thresholds must satisfy throttled <= restricted <= quarantined",
        )

    ids = {a.agent_id for a in cfg.agents}
    names = ids | cfg.segments
    for rule in cfg.rules:
        for sel in (rule.src, rule.dst):
            if sel not in names:
                raise ConfigError(rule.line, f"rule selector {sel!r} names no declared agent or segment")

    exp = cfg.experiment
    if exp is not None and exp.adversary_hop is not None and exp.adversary_hop > exp.hops:
        raise ConfigError(line_of(("experiment", "adversary_hop")), "adversary_hop must be <= hops")

    att = cfg.attack
    if att is not None:
        for req in ("adversary", "key", "value"):
            if ("attack", req) not in key_lines:
                raise ConfigError(
                    line_of(("attack", "adversary"), ("attack", "key"), ("attack", "value")),
                    f"attack.{req} is required",
                )
        if att.adversary not in ids:
            raise ConfigError(line_of(("attack", "adversary")), f"unknown agent {att.adversary!r}")
        for c in att.colluders:
            if c not in ids:
                raise ConfigError(line_of(("attack", "colluders")), f"unknown agent {c!r}")
        if att.pipeline:
            for p in att.pipeline:
                if p not in ids:
                    raise ConfigError(line_of(("attack", "pipeline")), f"unknown agent {p!r}")
            if len(set(att.pipeline)) != len(att.pipeline):
                raise ConfigError(line_of(("attack", "pipeline")), "pipeline repeats an agent")
            if att.adversary not in att.pipeline:
                raise ConfigError(line_of(("attack", "pipeline")), "adversary is not in the pipeline")


def format_config(cfg: ScenarioConfig) -> str:
    """Serialize to the canonical text form; ``parse_config`` inverts it."""
    out = [
        "[scenario]",
        f"name = {cfg.name}",
        f"seed = {cfg.seed}",
        f"output = {cfg.output}",
        "",
        "[authority]",
        f"id = {cfg.authority_id}",
    ]
    if cfg.authority_seed is not None:
        out.append(f"seed = {cfg.authority_seed.hex()}")
    out += [
        "",
        "[sanctions]",
        f"throttled = {cfg.throttled}",
        f"restricted = {cfg.restricted}",
        f"quarantined = {cfg.quarantined}",
        "",
        "[anomaly]",
        f"rate_factor = {cfg.rate_factor!r}",
        f"histogram_distance = {cfg.histogram_distance!r}",
        "",
        "[channel]",
        f"a = {cfg.a!r}",
        f"b = {cfg.b!r}",
        "",
        "[audit]",
        f"skew = {cfg.skew}",
        f"geo = {cfg.geo_tag}",
    ]
    for a in cfg.agents:
        out += ["", f"[agent {a.agent_id}]", f"segment = {a.segment}", f"role = {a.role}"]
        if a.seed is not None:
            out.append(f"seed = {a.seed.hex()}")
        out += [f"credential = {a.credential}", f"violations = {a.violations}"]
    for r in cfg.rules:
        out += ["", "[rule]", f"src = {r.src}", f"dst = {r.dst}", f"kinds = {', '.join(r.kinds)}"]
    if cfg.experiment is not None:
        e = cfg.experiment
        out += [
            "",
            "[experiment]",
            f"queries = {e.queries}",
            f"hops = {e.hops}",
            f"trials = {e.trials}",
            f"assertions = {e.assertions}",
            f"mitigation = {'on' if e.mitigation else 'off'}",
            f"rho = {e.rho!r}",
            f"workers = {e.workers}",
        ]
        if e.adversary_hop is not None:
            out.append(f"adversary_hop = {e.adversary_hop}")
    if cfg.attack is not None:
        t = cfg.attack
        out += [
            "",
            "[attack]",
            f"adversary = {t.adversary}",
            f"key = {t.fact_key}",
            f"value = {t.fact_value}",
            f"quorum = {t.quorum}",
            f"defenses = {'on' if t.defenses else 'off'}",
        ]
        if t.colluders:
            out.append(f"colluders = {', '.join(t.colluders)}")
        if t.pipeline:
            out.append(f"pipeline = {', '.join(t.pipeline)}")
        if t.established is not None:
            out.append(f"established = {t.established}")
    return "\n".join(out) + "\n"

