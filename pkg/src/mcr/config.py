"""Job and network configuration: rails, options, bootstrap key-value store.

The config format is a flat sectioned text file, one directive per line:

    config <name> { driver = tcp|inproc|mock_rdma; latency = <ticks> }
    rail <name> { priority = <int>; topology = ring|none|full; config = <name>;
                  checkpointable = true|false; gate minsize = <size>; }
    option <name> { rails = <name>[, <name>...]; }

Braces may open on the header line and close on their own line; semicolons
and newlines both separate directives; ``#`` starts a comment. Sizes accept
B, KB and MB suffixes as powers of 1024.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional

from .errors import ConfigSyntaxError, DanglingReference, KeyNotFound, NoRingRail
from .sched import CostModel

DRIVERS = ("inproc", "tcp", "mock_rdma")
TOPOLOGIES = ("ring", "none", "full")

# Drivers whose endpoints can be serialized into a process image. tcp and
# mock_rdma endpoints hold state outside the image (sockets, pinned device
# regions) and are closed before checkpointing instead.
CHECKPOINTABLE_DRIVERS = {"inproc"}

DEFAULT_LATENCY = {"inproc": 1.0, "tcp": 5.0, "mock_rdma": 2.0}


@dataclass
class GateSpec:
    kind: str               # only "minsize" for now
    value: int              # bytes

    def __post_init__(self):
        if self.kind != "minsize":
            raise ConfigSyntaxError(f"unknown gate kind {self.kind!r}")
        if self.value <= 0:
            raise ConfigSyntaxError("gate minsize must be > 0")

    def passes(self, size: int) -> bool:
        # Strict: the message must be larger than the threshold.
        return size > self.value


@dataclass
class DriverConfig:
    name: str
    driver: str
    latency: Optional[float] = None

    def __post_init__(self):
        if self.driver not in DRIVERS:
            raise ConfigSyntaxError(f"unknown driver {self.driver!r}")
        if self.latency is None:
            self.latency = DEFAULT_LATENCY[self.driver]


@dataclass
class RailSpec:
    name: str
    priority: int
    driver: str
    topology: str
    checkpointable: bool
    gates: list[GateSpec] = field(default_factory=list)
    config_ref: str = ""
    latency: float = 0.0

    def __post_init__(self):
        if self.priority < 0:
            raise ConfigSyntaxError(f"rail {self.name}: priority must be >= 0")
        if self.topology not in TOPOLOGIES:
            raise ConfigSyntaxError(f"rail {self.name}: unknown topology {self.topology!r}")

    def gates_pass(self, size: int) -> bool:
        return all(g.passes(size) for g in self.gates)

    @property
    def on_demand(self) -> bool:
        # Ring rails are wired statically at bootstrap; only none/full
        # topologies create endpoints on demand.
        return self.topology in ("none", "full")


@dataclass
class NetOption:
    name: str
    rails: list[str]


@dataclass
class NetConfig:
    """Parsed configuration plus resolution helpers."""

    rails: list[RailSpec]
    options: list[NetOption]
    driver_configs: list[DriverConfig]

    def rail(self, name: str) -> RailSpec:
        for r in self.rails:
            if r.name == name:
                return r
        raise DanglingReference(f"unknown rail {name!r}")

    def option(self, name: str) -> NetOption:
        for o in self.options:
            if o.name == name:
                return o
        raise DanglingReference(f"unknown option {name!r}")

    def option_rails(self, name: str) -> list[RailSpec]:
        """Rails of an option, sorted for election: priority desc, listed order."""
        opt = self.option(name)
        order = {rn: i for i, rn in enumerate(opt.rails)}
        rails = [self.rail(rn) for rn in opt.rails]
        rails.sort(key=lambda r: (-r.priority, order[r.name]))
        return rails


_SIZE_RE = re.compile(r"^(\d+)\s*(B|KB|MB)?$", re.IGNORECASE)
_SIZE_MULT = {"B": 1, "KB": 1024, "MB": 1024 * 1024}


def parse_size(text: str) -> int:
    m = _SIZE_RE.match(text.strip())
    if not m:
        raise ConfigSyntaxError(f"bad size {text!r}")
    mult = _SIZE_MULT[(m.group(2) or "B").upper()]
    return int(m.group(1)) * mult


def _strip_comment(line: str) -> str:
    idx = line.find("#")
    return line if idx < 0 else line[:idx]


def _tokenize_blocks(text: str):
    """Yield (kind, name, directives) for every top-level block."""
    # Normalize: comments out, braces isolated, then split on ; and newlines.
    cleaned = []
    for line in text.splitlines():
        cleaned.append(_strip_comment(line))
    stream = "\n".join(cleaned).replace("{", " { ").replace("}", " } ")
    parts = [p.strip() for p in re.split(r"[;\n]", stream)]

    block = None
    for part in parts:
        if not part:
            continue
        if block is None:
            m = re.match(r"^(config|rail|option)\s+([\w.\-]+)\s*\{?\s*(.*)$", part)
            if not m:
                raise ConfigSyntaxError(f"expected block header, got {part!r}")
            kind, name, rest = m.group(1), m.group(2), m.group(3)
            block = [kind, name, []]
            part = rest.strip()
            if not part:
                continue
        # Inside a block: may contain { leftovers, directives, or }.
        for piece in part.split("}"):
            piece = piece.strip().lstrip("{").strip()
            if piece:
                if block is None:
                    raise ConfigSyntaxError(f"directive outside block: {piece!r}")
                block[2].append(piece)
        if part.endswith("}") or "}" in part:
            if block is None:
                raise ConfigSyntaxError("unbalanced '}'")
            yield tuple(block)
            block = None
    if block is not None:
        raise ConfigSyntaxError(f"unterminated block {block[0]} {block[1]}")


def _directive(d: str) -> tuple[str, str]:
    if "=" not in d:
        raise ConfigSyntaxError(f"expected key = value, got {d!r}")
    key, _, val = d.partition("=")
    return key.strip(), val.strip()


def parse_config(text: str) -> NetConfig:
    """Parse and validate a configuration document.

    Raises ConfigSyntaxError on malformed input, DanglingReference when a
    rail or config name is unknown, and NoRingRail when an option lacks a
    gate-free ring rail.
    """
    configs: list[DriverConfig] = []
    rails: list[RailSpec] = []
    options: list[NetOption] = []

    for kind, name, directives in _tokenize_blocks(text):
        if kind == "config":
            driver = None
            latency = None
            for d in directives:
                key, val = _directive(d)
                if key == "driver":
                    driver = val
                elif key == "latency":
                    latency = float(val)
                else:
                    raise ConfigSyntaxError(f"config {name}: unknown key {key!r}")
            if driver is None:
                raise ConfigSyntaxError(f"config {name}: missing driver")
            configs.append(DriverConfig(name, driver, latency))
        elif kind == "rail":
            fields = {"priority": None, "topology": None, "config": None,
                      "checkpointable": None}
            gates: list[GateSpec] = []
            for d in directives:
                key, val = _directive(d)
                if key == "gate minsize":
                    gates.append(GateSpec("minsize", parse_size(val)))
                elif key in fields:
                    fields[key] = val
                else:
                    raise ConfigSyntaxError(f"rail {name}: unknown key {key!r}")
            if fields["priority"] is None or fields["topology"] is None \
                    or fields["config"] is None:
                raise ConfigSyntaxError(f"rail {name}: priority, topology and config are required")
            rails.append(RailSpec(
                name=name,
                priority=int(fields["priority"]),
                driver="",          # resolved below from the config block
                topology=fields["topology"],
                checkpointable=_parse_bool(fields["checkpointable"], name),
                gates=gates,
                config_ref=fields["config"],
            ))
        else:  # option
            rail_list = None
            for d in directives:
                key, val = _directive(d)
                if key != "rails":
                    raise ConfigSyntaxError(f"option {name}: unknown key {key!r}")
                rail_list = [r.strip() for r in val.split(",") if r.strip()]
            if not rail_list:
                raise ConfigSyntaxError(f"option {name}: missing rails list")
            options.append(NetOption(name, rail_list))

    _check_unique([c.name for c in configs], "config")
    _check_unique([r.name for r in rails], "rail")
    _check_unique([o.name for o in options], "option")

    cfg_by_name = {c.name: c for c in configs}
    for rail in rails:
        ref = cfg_by_name.get(rail.config_ref)
        if ref is None:
            raise DanglingReference(f"rail {rail.name}: unknown config {rail.config_ref!r}")
        rail.driver = ref.driver
        rail.latency = ref.latency
        if rail.checkpointable is None:
            rail.checkpointable = ref.driver in CHECKPOINTABLE_DRIVERS

    rail_names = {r.name for r in rails}
    for opt in options:
        for rn in opt.rails:
            if rn not in rail_names:
                raise DanglingReference(f"option {opt.name}: unknown rail {rn!r}")

    net = NetConfig(rails, options, configs)
    for opt in options:
        validate_option(net, opt.name)
    return net


def _parse_bool(val: Optional[str], ctx: str):
    if val is None:
        return None
    if val.lower() in ("true", "1", "yes"):
        return True
    if val.lower() in ("false", "0", "no"):
        return False
    raise ConfigSyntaxError(f"rail {ctx}: bad boolean {val!r}")


def _check_unique(names: list[str], kind: str) -> None:
    seen = set()
    for n in names:
        if n in seen:
            raise ConfigSyntaxError(f"duplicate {kind} name {n!r}")
        seen.add(n)


def validate_option(net: NetConfig, option_name: str) -> None:
    """Every usable option needs at least one accept-all ring rail."""
    opt = net.option(option_name)
    for rn in opt.rails:
        rail = net.rail(rn)
        if rail.topology == "ring" and not rail.gates:
            return
    raise NoRingRail(f"option {option_name}: no gate-free ring rail")


def serialize_config(net: NetConfig) -> str:
    """Render a NetConfig back to the text format (parse/serialize idempotent)."""
    out = []
    for c in net.driver_configs:
        out.append(f"config {c.name} {{ driver = {c.driver}; latency = {c.latency:g} }}")
    for r in net.rails:
        parts = [f"priority = {r.priority}", f"topology = {r.topology}",
                 f"config = {r.config_ref}",
                 f"checkpointable = {'true' if r.checkpointable else 'false'}"]
        for g in r.gates:
            parts.append(f"gate minsize = {g.value}")
        out.append(f"rail {r.name} {{ {'; '.join(parts)} }}")
    for o in net.options:
        out.append(f"option {o.name} {{ rails = {', '.join(o.rails)} }}")
    return "\n".join(out) + "\n"


# Bundled defaults. ``mixed`` is the canonical checkpointing setup: an
# inproc ring carrying small traffic (its endpoints serialize into images)
# plus a gated dynamic TCP rail that must be closed around checkpoints.
# ``multirail_tcp`` mirrors the two-rail TCP arrangement with a 32KB gate.
DEFAULT_CONFIG = """\
# default rail definitions
config inproc_cfg { driver = inproc }
config tcp_cfg { driver = tcp }
config rdma_cfg { driver = mock_rdma }

rail shm_ring { priority = 1; topology = ring; config = inproc_cfg; checkpointable = true }
rail tcp_large { priority = 10; topology = none; config = tcp_cfg; checkpointable = false; gate minsize = 32KB }
rail tcp_any { priority = 5; topology = none; config = tcp_cfg; checkpointable = false }
rail tcp_mpi { priority = 1; topology = ring; config = tcp_cfg; checkpointable = false }
rail rdma_large { priority = 10; topology = none; config = rdma_cfg; checkpointable = false; gate minsize = 32KB }
rail inproc_large { priority = 10; topology = none; config = inproc_cfg; checkpointable = true; gate minsize = 32KB }

option mixed { rails = tcp_large, shm_ring }
option multirail_tcp { rails = tcp_large, tcp_mpi }
option rdma_mix { rails = rdma_large, shm_ring }
option inproc_only { rails = inproc_large, shm_ring }
# any-size dynamic rail for replication traffic between arbitrary peers
option fti_mix { rails = tcp_large, tcp_any, shm_ring }
"""


@dataclass
class JobSpec:
    n_processes: int
    tasks_per_process: int = 1
    lanes_per_process: int = 1
    seed: int = 0
    cost_model: CostModel = field(default_factory=CostModel)
    ckpt_dir: Optional[str] = None
    net_option: str = "mixed"

    def __post_init__(self):
        if self.n_processes < 1:
            raise ConfigSyntaxError("n_processes must be >= 1")
        if self.tasks_per_process < 1:
            raise ConfigSyntaxError("tasks_per_process must be >= 1")
        if self.lanes_per_process < 1:
            raise ConfigSyntaxError("lanes_per_process must be >= 1")
        self.seed = int(self.seed) & 0xFFFFFFFFFFFFFFFF

    @property
    def n_tasks(self) -> int:
        return self.n_processes * self.tasks_per_process


# --- bootstrap key-value store ----------------------------------------------

class BootstrapKVS:
    """PMI-style KVS used once per (re)bootstrap to wire the initial ring.

    Writes are staged; a fence publishes everything staged so far and bumps
    the epoch. Readers only see published values, which models the "keys
    written before a fence are readable by all after it" contract.
    """

    def __init__(self, n_processes: int = 1):
        self.n_processes = n_processes
        self.fence_epoch = 0
        self._staged: dict[str, str] = {}
        self._published: dict[str, str] = {}
        self._arrived: set[int] = set()

    def put(self, key: str, value: str) -> None:
        if not key:
            raise KeyNotFound("empty key")
        self._staged[key] = str(value)

    def get(self, key: str) -> str:
        if not key:
            raise KeyNotFound("empty key")
        if key not in self._published:
            raise KeyNotFound(key)
        return self._published[key]

    def fence(self, pid: int = 0) -> int:
        """Register one process's arrival; the last arrival publishes.

        Returns the epoch the caller will observe once the round completes.
        Blocking semantics across live tasks are provided by the runtime,
        which parks tasks on a condition until `round_complete` flips.
        """
        self._arrived.add(pid)
        if len(self._arrived) >= self.n_processes:
            self._arrived.clear()
            self._published.update(self._staged)
            self._staged.clear()
            self.fence_epoch += 1
        return self.fence_epoch

    def round_pending(self) -> int:
        return len(self._arrived)

    def snapshot(self) -> dict[str, str]:
        return dict(self._published)


class TcpRegistryServer:
    """Single localhost TCP registry standing in for PMI when driver=tcp.

    Line protocol, one request per connection:
        PUT <key> <value>    -> OK
        GET <key>            -> VALUE <value> | MISSING
        FENCE <pid>          -> EPOCH <n>
    """

    def __init__(self, n_processes: int):
        import socketserver
        import threading

        kvs = BootstrapKVS(n_processes)
        outer = self

        class Handler(socketserver.StreamRequestHandler):
            def handle(self):
                line = self.rfile.readline().decode("utf-8").strip()
                if not line:
                    return
                parts = line.split(" ", 2)
                cmd = parts[0].upper()
                with outer._lock:
                    if cmd == "PUT" and len(parts) == 3:
                        kvs.put(parts[1], parts[2])
                        self.wfile.write(b"OK\n")
                    elif cmd == "GET" and len(parts) >= 2:
                        try:
                            val = kvs.get(parts[1])
                            self.wfile.write(f"VALUE {val}\n".encode("utf-8"))
                        except KeyNotFound:
                            self.wfile.write(b"MISSING\n")
                    elif cmd == "FENCE" and len(parts) >= 2:
                        epoch = kvs.fence(int(parts[1]))
                        self.wfile.write(f"EPOCH {epoch}\n".encode("utf-8"))
                    else:
                        self.wfile.write(b"ERR\n")

        self.kvs = kvs
        self._lock = threading.Lock()
        self._server = socketserver.ThreadingTCPServer(("127.0.0.1", 0), Handler)
        self._server.daemon_threads = True
        self.address = self._server.server_address
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    def close(self):
        self._server.shutdown()
        self._server.server_close()


class TcpRegistryClient:
    """KVS facade speaking to a TcpRegistryServer."""

    def __init__(self, address):
        self.address = address
        self.fence_epoch = 0

    def _ask(self, line: str) -> str:
        import socket

        with socket.create_connection(self.address) as s:
            s.sendall((line + "\n").encode("utf-8"))
            chunks = []
            while True:
                b = s.recv(4096)
                if not b:
                    break
                chunks.append(b)
                if b.endswith(b"\n"):
                    break
        return b"".join(chunks).decode("utf-8").strip()

    def put(self, key: str, value: str) -> None:
        if not key:
            raise KeyNotFound("empty key")
        self._ask(f"PUT {key} {value}")

    def get(self, key: str) -> str:
        if not key:
            raise KeyNotFound("empty key")
        resp = self._ask(f"GET {key}")
        if resp == "MISSING":
            raise KeyNotFound(key)
        return resp[len("VALUE "):]

    def fence(self, pid: int = 0) -> int:
        resp = self._ask(f"FENCE {pid}")
        self.fence_epoch = int(resp.split(" ", 1)[1])
        return self.fence_epoch
