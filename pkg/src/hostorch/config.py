"""Static configuration: hostname rules, timing, limits and process specs.

The configuration document is line oriented::

    # comment
    [network]
    subnet = 10.0.0.0/16
    rtt = 1ms

    [timing]
    cold_start_latency = 200ms

    [rule]
    pattern = db-*
    function_type = dbnode
    max_instances = 8

Durations are an integer followed by ``ms``, ``s`` or ``m`` and are stored as
integer microseconds.
"""
from __future__ import annotations

import ipaddress
import re
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

US = 1
MS = 1000
SEC = 1000 * MS
MIN = 60 * SEC

# platform caps for a single function instance
MAX_MEMORY_MB = 10240
MAX_VCPUS = 6
MAX_LIFETIME = 15 * MIN

_UNITS = {"ms": MS, "s": SEC, "m": MIN}
_DURATION_RE = re.compile(r"^(\d+)(ms|s|m)$")
_HOSTNAME_RE = re.compile(r"^[A-Za-z0-9](?:[A-Za-z0-9.-]{0,252})$")
_PLACEHOLDER_RE = re.compile(r"\{([^{}]*)\}")
PLACEHOLDERS = ("hostname", "address", "port", "portmap")


class ConfigError(Exception):
    pass


class ConfigSyntaxError(ConfigError):
    def __init__(self, message: str, line: int, column: int = 1):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class ConfigValidationError(ConfigError):
    pass


class SubnetExhausted(Exception):
    pass


def parse_duration(text: str) -> int:
    """Parse ``250ms`` / ``5s`` / ``10m`` (or a bare ``0``) into microseconds."""
    text = text.strip()
    if text == "0":
        return 0
    m = _DURATION_RE.match(text)
    if not m:
        raise ValueError(f"bad duration {text!r}")
    return int(m.group(1)) * _UNITS[m.group(2)]


def format_duration(us: int) -> str:
    if us == 0:
        return "0"
    for unit, size in (("m", MIN), ("s", SEC), ("ms", MS)):
        if us % size == 0:
            return f"{us // size}{unit}"
    raise ValueError(f"duration {us}us is not a whole number of milliseconds")


def valid_hostname(name: str) -> bool:
    return bool(_HOSTNAME_RE.match(name))


def glob_match(pattern: str, name: str) -> bool:
    """Match ``name`` against ``pattern`` where only ``*`` is special."""
    regex = ".*".join(re.escape(part) for part in pattern.split("*"))
    return re.fullmatch(regex, name, flags=re.DOTALL) is not None


@dataclass(frozen=True)
class ExternalConnPolicy:
    kind: str = "keep-running"  # keep-running | preemptible | warm-for
    warm_for: Optional[int] = None
    distinguish_endpoint_role: bool = False

    KINDS = ("keep-running", "preemptible", "warm-for")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigValidationError(f"unknown external policy {self.kind!r}")
        if self.kind == "warm-for":
            if self.warm_for is None or self.warm_for <= 0:
                raise ConfigValidationError("warm-for duration must be positive")
        elif self.warm_for is not None:
            raise ConfigValidationError(f"{self.kind} takes no duration")

    @classmethod
    def parse(cls, text: str, distinguish_endpoint_role: bool = False) -> "ExternalConnPolicy":
        parts = text.split()
        if not parts:
            raise ValueError("empty external policy")
        if parts[0] == "warm-for":
            if len(parts) != 2:
                raise ValueError("warm-for needs exactly one duration")
            return cls("warm-for", parse_duration(parts[1]), distinguish_endpoint_role)
        if len(parts) != 1:
            raise ValueError(f"unexpected arguments to {parts[0]}")
        return cls(parts[0], None, distinguish_endpoint_role)

    def format(self) -> str:
        if self.kind == "warm-for":
            return f"warm-for {format_duration(self.warm_for)}"
        return self.kind


KEEP_RUNNING = ExternalConnPolicy("keep-running")
PREEMPTIBLE = ExternalConnPolicy("preemptible")


def warm_for(duration: int, distinguish_endpoint_role: bool = False) -> ExternalConnPolicy:
    return ExternalConnPolicy("warm-for", duration, distinguish_endpoint_role)


@dataclass(frozen=True)
class MappingRule:
    pattern: str
    function_type: str
    max_instances: int = 64
    external_policy: Optional[ExternalConnPolicy] = None

    def matches(self, hostname: str) -> bool:
        return glob_match(self.pattern, hostname)


@dataclass(frozen=True)
class TimingParams:
    cold_start_latency: int = 200 * MS
    resume_latency: int = 20 * MS
    idle_debounce: int = 500 * MS
    keep_warm_period: int = 60 * SEC
    sleep_ttl: int = 10 * MIN
    connect_timeout: int = 5 * SEC

    FIELDS = (
        "cold_start_latency",
        "resume_latency",
        "idle_debounce",
        "keep_warm_period",
        "sleep_ttl",
        "connect_timeout",
    )


@dataclass(frozen=True)
class NetworkParams:
    subnet: ipaddress.IPv4Network = ipaddress.IPv4Network("10.0.0.0/16")
    rtt: int = 1 * MS
    jitter: int = 0

    @property
    def capacity(self) -> int:
        return max(self.subnet.num_addresses - 2, 0)


@dataclass(frozen=True)
class Limits:
    memory_mb: int = 1024
    vcpus: int = 1
    max_lifetime: Optional[int] = MAX_LIFETIME  # None disables the cap


@dataclass(frozen=True)
class ProcessSpec:
    function_type: str
    command: str
    env: Tuple[Tuple[str, str], ...] = ()
    workdir: Optional[str] = None
    readiness_timeout: int = 10 * SEC

    def render(self, **values: object) -> str:
        return self.command.format(**{k: values.get(k, "") for k in PLACEHOLDERS})


@dataclass(frozen=True)
class Config:
    rules: Tuple[MappingRule, ...]
    network: NetworkParams = field(default_factory=NetworkParams)
    timing: TimingParams = field(default_factory=TimingParams)
    limits: Tuple[Tuple[str, Limits], ...] = ()
    default_external_policy: ExternalConnPolicy = KEEP_RUNNING
    max_restarts: int = 3
    processes: Tuple[ProcessSpec, ...] = ()
    hosts: Tuple[Tuple[str, int], ...] = ()

    def __post_init__(self):
        validate(self)

    def limits_for(self, function_type: str) -> Limits:
        for name, lim in self.limits:
            if name == function_type:
                return lim
        return Limits()

    def policy_for(self, rule: MappingRule) -> ExternalConnPolicy:
        return rule.external_policy or self.default_external_policy

    def process_for(self, function_type: str) -> Optional[ProcessSpec]:
        for spec in self.processes:
            if spec.function_type == function_type:
                return spec
        return None


def validate(config: Config) -> None:
    if not config.rules:
        raise ConfigValidationError("rules non-empty: at least one [rule] is required")
    seen = set()
    for rule in config.rules:
        if not rule.pattern:
            raise ConfigValidationError("rule pattern must be non-empty")
        if not rule.function_type:
            raise ConfigValidationError(f"rule {rule.pattern!r}: function_type must be non-empty")
        if not all(c == "*" or c.isalnum() or c in ".-" for c in rule.pattern):
            raise ConfigValidationError(f"rule pattern {rule.pattern!r} is not a valid glob")
        if rule.max_instances <= 0:
            raise ConfigValidationError(f"rule {rule.pattern!r}: max_instances must be positive")
        if rule.pattern in seen:
            raise ConfigValidationError(f"duplicate rule pattern {rule.pattern!r}")
        seen.add(rule.pattern)

    t = config.timing
    for name in TimingParams.FIELDS:
        if getattr(t, name) <= 0:
            raise ConfigValidationError(f"timing {name} must be strictly positive")
    if not t.resume_latency < t.cold_start_latency:
        raise ConfigValidationError("resume_latency must be below cold_start_latency")
    if not t.keep_warm_period < t.sleep_ttl:
        raise ConfigValidationError("keep_warm_period must be below sleep_ttl")

    net = config.network
    if net.rtt < 0 or net.jitter < 0:
        raise ConfigValidationError("network durations must be non-negative")
    total = sum(r.max_instances for r in config.rules)
    if total > net.capacity:
        raise ConfigValidationError(
            f"subnet {net.subnet} holds {net.capacity} hosts, rules allow {total}"
        )
    if config.max_restarts < 0:
        raise ConfigValidationError("max_restarts must be non-negative")

    for name, lim in config.limits:
        if not 0 < lim.memory_mb <= MAX_MEMORY_MB:
            raise ConfigValidationError(f"limits {name}: memory_mb must be in 1..{MAX_MEMORY_MB}")
        if not 0 < lim.vcpus <= MAX_VCPUS:
            raise ConfigValidationError(f"limits {name}: vcpus must be in 1..{MAX_VCPUS}")
        if lim.max_lifetime is not None and lim.max_lifetime <= 0:
            raise ConfigValidationError(f"limits {name}: max_lifetime must be positive")

    for spec in config.processes:
        if not spec.command.strip():
            raise ConfigValidationError(f"process {spec.function_type}: empty command")
        for ph in _PLACEHOLDER_RE.findall(spec.command):
            if ph not in PLACEHOLDERS:
                raise ConfigValidationError(
                    f"process {spec.function_type}: unknown placeholder {{{ph}}}"
                )
        if spec.command.count("{") != spec.command.count("}"):
            raise ConfigValidationError(f"process {spec.function_type}: unbalanced braces")

    for name, _port in config.hosts:
        if not valid_hostname(name):
            raise ConfigValidationError(f"invalid hostname {name!r} in [hosts]")
        if resolve_function_type(name, config) is None:
            raise ConfigValidationError(f"host {name!r} matches no rule")


def resolve_function_type(hostname: str, config: Config) -> Optional[MappingRule]:
    """Return the first rule (declaration order) whose pattern matches ``hostname``."""
    for rule in config.rules:
        if rule.matches(hostname):
            return rule
    return None


class AddressAllocator:
    """Hands out subnet addresses to hostnames, one per name, first come first served.

    Bindings survive instance restarts because they are keyed on the hostname,
    not on the instance.
    """

    def __init__(self, subnet: ipaddress.IPv4Network):
        self.subnet = subnet
        self.by_host: Dict[str, ipaddress.IPv4Address] = {}
        self.by_address: Dict[ipaddress.IPv4Address, str] = {}
        self._next = 1

    @property
    def capacity(self) -> int:
        return max(self.subnet.num_addresses - 2, 0)

    def assign(self, hostname: str) -> ipaddress.IPv4Address:
        addr = self.by_host.get(hostname)
        if addr is not None:
            return addr
        if self._next > self.capacity:
            raise SubnetExhausted(f"subnet {self.subnet} exhausted ({self.capacity} hosts)")
        addr = self.subnet.network_address + self._next
        self._next += 1
        self.by_host[hostname] = addr
        self.by_address[addr] = hostname
        return addr

    def lookup(self, address) -> Optional[str]:
        return self.by_address.get(ipaddress.ip_address(address))

    def __contains__(self, address) -> bool:
        return ipaddress.ip_address(address) in self.subnet


def assign_address(hostname: str, registry: AddressAllocator) -> ipaddress.IPv4Address:
    return registry.assign(hostname)


# --- parsing ---------------------------------------------------------------

_SECTION_RE = re.compile(r"^\[\s*([a-z]+)(?:\s+([A-Za-z0-9_.-]+))?\s*\]$")
_SINGLE = ("network", "timing", "policy", "hosts")
_NAMED = ("limits", "process")


@dataclass
class _Section:
    kind: str
    name: Optional[str]
    line: int
    items: List[Tuple[str, str, int, int]] = field(default_factory=list)


def _tokenize(text: str) -> List[_Section]:
    sections: List[_Section] = []
    current: Optional[_Section] = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        stripped = line.strip()
        if not stripped:
            continue
        col = len(line) - len(line.lstrip()) + 1
        if stripped.startswith("["):
            m = _SECTION_RE.match(stripped)
            if not m:
                raise ConfigSyntaxError(f"malformed section header {stripped!r}", lineno, col)
            kind, name = m.group(1), m.group(2)
            if kind == "rule" or kind in _SINGLE:
                if name is not None:
                    raise ConfigSyntaxError(f"[{kind}] takes no name", lineno, col)
            elif kind in _NAMED:
                if name is None:
                    raise ConfigSyntaxError(f"[{kind}] needs a function type name", lineno, col)
            else:
                raise ConfigSyntaxError(f"unknown section [{kind}]", lineno, col)
            current = _Section(kind, name, lineno)
            sections.append(current)
            continue
        if current is None:
            raise ConfigSyntaxError("key outside of any section", lineno, col)
        if "=" not in stripped:
            if current.kind == "hosts":
                current.items.append((stripped, "", lineno, col))
                continue
            raise ConfigSyntaxError("expected 'key = value'", lineno, col)
        key, value = stripped.split("=", 1)
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigSyntaxError("missing key before '='", lineno, col)
        current.items.append((key, value, lineno, col))
    return sections


def _expect(section: _Section, allowed: Tuple[str, ...]) -> Dict[str, Tuple[str, int, int]]:
    out: Dict[str, Tuple[str, int, int]] = {}
    for key, value, line, col in section.items:
        if key not in allowed:
            raise ConfigSyntaxError(f"unknown key {key!r} in [{section.kind}]", line, col)
        if key in out:
            raise ConfigSyntaxError(f"duplicate key {key!r}", line, col)
        out[key] = (value, line, col)
    return out


def _conv(item: Tuple[str, int, int], fn):
    value, line, col = item
    try:
        return fn(value)
    except ValueError as e:
        raise ConfigSyntaxError(str(e), line, col) from None


def _int(text: str) -> int:
    if not re.fullmatch(r"\d+", text):
        raise ValueError(f"expected an integer, got {text!r}")
    return int(text)


def _bool(text: str) -> bool:
    if text in ("true", "yes", "1"):
        return True
    if text in ("false", "no", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _lifetime(text: str) -> Optional[int]:
    return None if text in ("none", "inf") else parse_duration(text)


def parse_config(text: str) -> Config:
    """Parse and validate a configuration document."""
    sections = _tokenize(text)
    seen_single = set()
    rules: List[MappingRule] = []
    network = NetworkParams()
    timing = TimingParams()
    policy_items: Dict[str, Tuple[str, int, int]] = {}
    limits: List[Tuple[str, Limits]] = []
    processes: List[ProcessSpec] = []
    hosts: List[Tuple[str, int]] = []
    rule_policies: List[Tuple[MappingRule, Dict]] = []

    for sec in sections:
        if sec.kind in _SINGLE:
            if sec.kind in seen_single:
                raise ConfigSyntaxError(f"duplicate section [{sec.kind}]", sec.line)
            seen_single.add(sec.kind)
        if sec.kind == "network":
            items = _expect(sec, ("subnet", "rtt", "jitter"))
            kw = {}
            if "subnet" in items:
                kw["subnet"] = _conv(items["subnet"], lambda v: ipaddress.IPv4Network(v, strict=True))
            for k in ("rtt", "jitter"):
                if k in items:
                    kw[k] = _conv(items[k], parse_duration)
            network = NetworkParams(**kw)
        elif sec.kind == "timing":
            items = _expect(sec, TimingParams.FIELDS)
            timing = TimingParams(**{k: _conv(v, parse_duration) for k, v in items.items()})
        elif sec.kind == "policy":
            policy_items = _expect(
                sec, ("external_policy", "distinguish_endpoint_role", "max_restarts")
            )
        elif sec.kind == "rule":
            items = _expect(
                sec,
                ("pattern", "function_type", "max_instances", "external_policy",
                 "distinguish_endpoint_role"),
            )
            for req in ("pattern", "function_type"):
                if req not in items:
                    raise ConfigValidationError(f"[rule] at line {sec.line} is missing {req!r}")
            rule = MappingRule(
                pattern=items["pattern"][0],
                function_type=items["function_type"][0],
                max_instances=_conv(items["max_instances"], _int) if "max_instances" in items else 64,
            )
            rules.append(rule)
            rule_policies.append((rule, items))
        elif sec.kind == "limits":
            items = _expect(sec, ("memory_mb", "vcpus", "max_lifetime"))
            kw = {}
            if "memory_mb" in items:
                kw["memory_mb"] = _conv(items["memory_mb"], _int)
            if "vcpus" in items:
                kw["vcpus"] = _conv(items["vcpus"], _int)
            if "max_lifetime" in items:
                kw["max_lifetime"] = _conv(items["max_lifetime"], _lifetime)
            limits.append((sec.name, Limits(**kw)))
        elif sec.kind == "process":
            items = _expect(sec, ("command", "env", "workdir", "readiness_timeout"))
            if "command" not in items:
                raise ConfigValidationError(f"[process {sec.name}] is missing 'command'")
            env: Tuple[Tuple[str, str], ...] = ()
            if "env" in items:
                env = _conv(items["env"], _parse_env)
            processes.append(
                ProcessSpec(
                    function_type=sec.name,
                    command=items["command"][0],
                    env=env,
                    workdir=items["workdir"][0] if "workdir" in items else None,
                    readiness_timeout=_conv(items["readiness_timeout"], parse_duration)
                    if "readiness_timeout" in items
                    else 10 * SEC,
                )
            )
        elif sec.kind == "hosts":
            for key, value, line, col in sec.items:
                port = _conv((value, line, col), _int) if value else 0
                hosts.append((key, port))

    distinguish = False
    if "distinguish_endpoint_role" in policy_items:
        distinguish = _conv(policy_items["distinguish_endpoint_role"], _bool)
    default_policy = ExternalConnPolicy("keep-running", None, distinguish)
    if "external_policy" in policy_items:
        default_policy = _conv(
            policy_items["external_policy"], lambda v: ExternalConnPolicy.parse(v, distinguish)
        )
    max_restarts = 3
    if "max_restarts" in policy_items:
        max_restarts = _conv(policy_items["max_restarts"], _int)

    final_rules = []
    for rule, items in rule_policies:
        if "external_policy" in items or "distinguish_endpoint_role" in items:
            d = distinguish
            if "distinguish_endpoint_role" in items:
                d = _conv(items["distinguish_endpoint_role"], _bool)
            if "external_policy" in items:
                pol = _conv(items["external_policy"], lambda v: ExternalConnPolicy.parse(v, d))
            else:
                pol = replace(default_policy, distinguish_endpoint_role=d)
            rule = replace(rule, external_policy=pol)
        final_rules.append(rule)

    return Config(
        rules=tuple(final_rules),
        network=network,
        timing=timing,
        limits=tuple(limits),
        default_external_policy=default_policy,
        max_restarts=max_restarts,
        processes=tuple(processes),
        hosts=tuple(hosts),
    )


def _parse_env(text: str) -> Tuple[Tuple[str, str], ...]:
    pairs = []
    for tok in text.split():
        if "=" not in tok:
            raise ValueError(f"env entry {tok!r} is not KEY=VALUE")
        k, v = tok.split("=", 1)
        pairs.append((k, v))
    return tuple(pairs)


def load_config(path) -> Config:
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read())


def serialize_config(config: Config) -> str:
    """Render ``config`` back into the document format; ``parse_config`` inverts it."""
    out = ["[network]", f"subnet = {config.network.subnet}",
           f"rtt = {format_duration(config.network.rtt)}",
           f"jitter = {format_duration(config.network.jitter)}", "", "[timing]"]
    for name in TimingParams.FIELDS:
        out.append(f"{name} = {format_duration(getattr(config.timing, name))}")
    pol = config.default_external_policy
    out += ["", "[policy]", f"external_policy = {pol.format()}",
            f"distinguish_endpoint_role = {str(pol.distinguish_endpoint_role).lower()}",
            f"max_restarts = {config.max_restarts}"]
    for rule in config.rules:
        out += ["", "[rule]", f"pattern = {rule.pattern}",
                f"function_type = {rule.function_type}",
                f"max_instances = {rule.max_instances}"]
        if rule.external_policy is not None:
            out.append(f"external_policy = {rule.external_policy.format()}")
            out.append("distinguish_endpoint_role = "
                       f"{str(rule.external_policy.distinguish_endpoint_role).lower()}")
    for name, lim in config.limits:
        life = "none" if lim.max_lifetime is None else format_duration(lim.max_lifetime)
        out += ["", f"[limits {name}]", f"memory_mb = {lim.memory_mb}",
                f"vcpus = {lim.vcpus}", f"max_lifetime = {life}"]
    for spec in config.processes:
        out += ["", f"[process {spec.function_type}]", f"command = {spec.command}",
                f"readiness_timeout = {format_duration(spec.readiness_timeout)}"]
        if spec.env:
            out.append("env = " + " ".join(f"{k}={v}" for k, v in spec.env))
        if spec.workdir:
            out.append(f"workdir = {spec.workdir}")
    if config.hosts:
        out += ["", "[hosts]"]
        out += [f"{name} = {port}" if port else name for name, port in config.hosts]
    return "\n".join(out) + "\n"
