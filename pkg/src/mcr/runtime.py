"""Job runtime: logical processes, rails, the control plane, and the task API.

Every logical process hosts its tasks on cooperative lanes and owns one
endpoint table; all processes share a single event loop, so cross-process
behavior is causal in virtual time and reproducible for a fixed seed.
Interaction between processes happens only through rail frames (data or
control) and the bootstrap KVS.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Optional

from .config import (
    DEFAULT_CONFIG,
    BootstrapKVS,
    JobSpec,
    NetConfig,
    RailSpec,
    parse_config,
)
from .errors import (
    ConnectTimeout,
    McrError,
    NoRouteToProcess,
    PeerFailed,
    RailBusy,
    RailClosed,
    UnknownRail,
)
from .multirail import (
    FRAME_CONTROL,
    FRAME_DATA,
    Endpoint,
    EndpointState,
    EndpointTable,
    InprocChannel,
    Message,
    MockRdmaState,
    TcpRailPort,
    creation_candidates,
    decode_frame,
    encode_frame,
    select_endpoint,
)
from .sched import (
    BlockOn,
    Charge,
    Compute,
    Condition,
    EventLoop,
    IoWrite,
    Scheduler,
    Task,
    TaskKind,
    TaskState,
    Trace,
    WaitTicks,
    YieldNow,
)
from .signaling import ControlKind, ControlMessage, RouteView, route_next_hop

_TIMEOUT = object()


@dataclass
class RuntimeOptions:
    io_yield: bool = False
    process_switch_mode: bool = False
    connect_timeout: float = 50_000.0
    helper_queue_depth: int = 4
    ckpt_enabled: bool = True
    storage_quota: Optional[int] = None


@dataclass
class SendReceipt:
    rail: Optional[str]
    arrival: float


@dataclass
class TaskSpec:
    """How to build (and rebuild) one application task."""

    body: Callable                    # body(api, state) -> generator
    make_state: Callable = lambda api: None
    save: Optional[Callable] = None   # save(state) -> bytes
    load: Optional[Callable] = None   # load(blob) -> state
    lane: Optional[int] = None        # None: spread process-local tasks round-robin


class _ProcessKilled(BaseException):
    """Raised inside a victim task at its fault point; not an McrError so
    application code cannot accidentally swallow it."""


class RailState:
    def __init__(self, spec: RailSpec, pid: int):
        self.spec = spec
        self.open = False
        self.port: Optional[TcpRailPort] = None         # tcp driver
        self.channels: dict[int, InprocChannel] = {}    # inproc / mock_rdma
        self.rdma = MockRdmaState() if spec.driver == "mock_rdma" else None
        self.pid = pid

    def allocate(self) -> None:
        """Open the rail from scratch: fresh listener, empty device state."""
        if self.open:
            return
        if self.spec.driver == "tcp":
            self.port = TcpRailPort(self.pid)
        self.open = True

    def conn_string(self) -> str:
        if self.spec.driver == "tcp":
            return self.port.conn_string()
        return f"chan:{self.pid}"

    def release(self) -> None:
        if self.spec.driver == "tcp" and self.port is not None:
            self.port.close()
            self.port = None
        for ch in self.channels.values():
            ch.close()
        self.channels.clear()
        if self.rdma is not None:
            self.rdma.clear()
        self.open = False


class LogicalProcess:
    def __init__(self, rt: "Runtime", pid: int):
        self.rt = rt
        self.pid = pid
        self.sched = Scheduler(rt.loop, rt.cost, n_lanes=rt.jobspec.lanes_per_process,
                               pid=pid, trace=rt.trace, io_yield=rt.options.io_yield,
                               process_switch_mode=rt.options.process_switch_mode)
        self.table = EndpointTable()
        self.rails: dict[str, RailState] = {}
        self.failed = False
        # Data-plane matching state, per destination rank.
        self.inbox: dict[int, list[Message]] = {}
        self.pending_recv: dict[int, tuple[Condition, Optional[int], Optional[int]]] = {}
        # Quiescence counters: frames sent by this process / consumed here,
        # keyed "src,dst" process pair.
        self.sent_counts: dict[str, int] = {}
        self.consumed_counts: dict[str, int] = {}
        # Control-plane mailboxes.
        self.barrier_inbox: dict[tuple, object] = {}
        self.barrier_waiters: dict[tuple, Condition] = {}
        self.intra_barriers: dict[object, dict] = {}
        self.ckpt_results: dict[int, object] = {}
        self.ckpt_result_conds: dict[int, Condition] = {}

    # -- rails ---------------------------------------------------------------

    def rail_state(self, name: str) -> RailState:
        st = self.rails.get(name)
        if st is None:
            raise UnknownRail(f"process {self.pid}: unknown rail {name!r}")
        return st

    def open_rail_specs(self) -> list[RailSpec]:
        return [st.spec for st in self.rails.values() if st.open]

    def close_rail_local(self, name: str) -> int:
        """Remove every endpoint of the rail from this process and release
        driver resources. Static routes of other rails are untouched."""
        st = self.rail_state(name)
        removed = self.table.remove_rail(name)
        st.release()
        if removed:
            self.rt.trace.log(0, self.pid, "-", "-", f"rail_close:{name}:{removed}")
        return removed

    def route_view(self) -> RouteView:
        neighbors = {ep.remote for ep in self.table.all_endpoints()
                     if ep.state is EndpointState.CONNECTED}
        return RouteView(neighbors)

    def alive_tasks(self) -> list[Task]:
        return [t for t in self.sched.tasks.values() if t.state is not TaskState.DONE]

    # -- matching --------------------------------------------------------------

    def match_inbox(self, rank: int, src, tag) -> Optional[Message]:
        queue = self.inbox.get(rank)
        if not queue:
            return None
        for i, msg in enumerate(queue):
            if _filters_match(msg, src, tag):
                return queue.pop(i)
        return None

    def count_consumed(self, msg: Message) -> None:
        key = f"{msg.src_process},{msg.dst_process}"
        self.consumed_counts[key] = self.consumed_counts.get(key, 0) + 1


def _filters_match(msg: Message, src, tag) -> bool:
    if src is not None and msg.src_task != src:
        return False
    if tag is not None and msg.tag != tag:
        return False
    return True


class Runtime:
    """One job: n_processes logical processes wired by the selected net option."""

    def __init__(self, jobspec: JobSpec, net: Optional[NetConfig] = None,
                 config_text: Optional[str] = None,
                 options: Optional[RuntimeOptions] = None,
                 job_id: Optional[str] = None):
        self.config_text = config_text if config_text is not None else DEFAULT_CONFIG
        self.net = net or parse_config(self.config_text)
        self.jobspec = jobspec
        self.job_id = job_id or f"job-{jobspec.seed:016x}"
        self.cost = jobspec.cost_model
        self.options = options or RuntimeOptions()
        self.loop = EventLoop()
        self.trace = Trace()
        self.procs: list[LogicalProcess] = []
        self.kvs = BootstrapKVS(jobspec.n_processes)
        self.failed_pids: set[int] = set()
        self.reconnects = 0
        self.in_flight: dict[str, int] = {}
        self.conn_waiters: dict[int, Condition] = {}
        self._req_seq = 0
        self._probe_seq = 0
        self.probe_waiters: dict[int, Condition] = {}
        self.results: dict = {}
        self.task_failures: dict[int, BaseException] = {}
        self.task_specs: dict[int, TaskSpec] = {}
        self.task_states: dict[int, object] = {}
        self.pending_restart: set[int] = set()
        self.fault_plan = None
        self.fail_image_write: set[int] = set()
        self.fence_epoch_seen = 0
        self._fence_cond: Optional[Condition] = None
        self.coordinator = None      # installed by ckpt_transparent
        self.multilevel = None       # installed by ckpt_multilevel
        self.routing_faults: list[str] = []
        self.started = False

    # -- construction ---------------------------------------------------------

    @property
    def n(self) -> int:
        return self.jobspec.n_processes

    def host_of(self, rank: int) -> int:
        if rank >= self.jobspec.n_tasks:
            # Helper task ids are allocated above the app rank space,
            # one per process.
            return rank - self.jobspec.n_tasks
        return rank // self.jobspec.tasks_per_process

    def start(self) -> None:
        """Create processes, open rails, and wire the static ring via the KVS."""
        if self.started:
            return
        option_rails = self.net.option_rails(self.jobspec.net_option)
        self._setup_kvs(option_rails)
        for pid in range(self.n):
            proc = LogicalProcess(self, pid)
            proc.sched.on_task_error = self.record_failure
            for spec in option_rails:
                proc.rails[spec.name] = RailState(spec, pid)
                proc.rails[spec.name].allocate()
            self.procs.append(proc)
        for spec in option_rails:
            self.in_flight.setdefault(spec.name, 0)
            if spec.topology in ("ring", "full"):
                self._bootstrap_ring(spec)
        self.started = True

    def _setup_kvs(self, option_rails) -> None:
        # Standing in for PMI: in-process when the ring is inproc-backed,
        # a single localhost TCP registry when the ring rides TCP.
        ring_drivers = {r.driver for r in option_rails if r.topology == "ring"}
        if "tcp" in ring_drivers:
            from .config import TcpRegistryClient, TcpRegistryServer

            self._registry = TcpRegistryServer(self.n)
            self.kvs = TcpRegistryClient(self._registry.address)

    def _bootstrap_ring(self, spec: RailSpec) -> None:
        """PMI-style exchange: publish conn info, fence, connect the static
        routes (rank-adjacent chain for ring, all pairs for full)."""
        tag = f"boot{self.kvs.fence_epoch}"
        for proc in self.procs:
            self.kvs.put(f"rail.{spec.name}.{tag}.rank.{proc.pid}",
                         proc.rail_state(spec.name).conn_string())
        for proc in self.procs:
            self.kvs.fence(proc.pid)
        self.fence_epoch_seen = self.kvs.fence_epoch
        if spec.topology == "full":
            for p in range(self.n):
                for q in range(p + 1, self.n):
                    self._wire_edge(spec, p, q, tag)
        else:
            for pid in range(self.n - 1):
                self._wire_edge(spec, pid, pid + 1, tag)

    def _wire_edge(self, spec: RailSpec, p: int, q: int, tag: str) -> None:
        """Create the static route between adjacent processes (idempotent)."""
        a, b = self.procs[p], self.procs[q]
        if a.table.find(spec.name, q) is not None:
            return
        info_q = self.kvs.get(f"rail.{spec.name}.{tag}.rank.{q}")
        self._driver_connect(a, b, spec, info_q)
        a.table.insert(Endpoint(spec.name, q, static=True), spec.priority)
        b.table.insert(Endpoint(spec.name, p, static=True), spec.priority)

    def _driver_connect(self, a: LogicalProcess, b: LogicalProcess,
                        spec: RailSpec, remote_info: str) -> None:
        """Create the low-level route a<->b. Both processes live in this
        address space, so the handshake completes inside one event.

        An already-established route is reused: crossing connection
        requests must never replace a live connection, or frames in flight
        on the old one would be orphaned.
        """
        ra, rb = a.rail_state(spec.name), b.rail_state(spec.name)
        if not ra.open or not rb.open:
            raise RailClosed(f"rail {spec.name} closed during connect")
        if spec.driver == "tcp":
            if b.pid in ra.port.conns and a.pid in rb.port.conns:
                return
            ra.port.connect_to(b.pid, remote_info)
            rb.port.accept_from()
        else:
            if b.pid in ra.channels and a.pid in rb.channels:
                return
            ch = InprocChannel()
            ra.channels[b.pid] = ch
            rb.channels[a.pid] = ch
            if spec.driver == "mock_rdma":
                ra.rdma.qp_tokens.add(("qp", a.pid, b.pid, ch.channel_id))
                rb.rdma.qp_tokens.add(("qp", b.pid, a.pid, ch.channel_id))
                ra.rdma.pinned_regions.add(("mr", a.pid, ch.channel_id))
                rb.rdma.pinned_regions.add(("mr", b.pid, ch.channel_id))

    # -- task management --------------------------------------------------------

    def spawn_app(self, rank: int, spec: TaskSpec, kind: TaskKind = TaskKind.APP,
                  state: object = None, restarted: bool = False,
                  lane: Optional[int] = None) -> Task:
        pid = self.host_of(rank) if kind is TaskKind.APP else rank - self.n_app_ranks()
        proc = self.procs[pid]
        api = TaskApi(self, proc, rank)
        if state is None and not restarted:
            state = spec.make_state(api)
        self.task_specs[rank] = spec
        self.task_states[rank] = state
        if restarted:
            self.pending_restart.add(rank)
        if lane is None:
            lane = spec.lane
        if lane is None:
            # spread a process's tasks across its lanes in rank order
            lane = (rank % self.jobspec.tasks_per_process) % self.jobspec.lanes_per_process
        gen = self._task_shell(api, spec, state)
        task = proc.sched.add_task(rank, kind, lane, gen)
        api.task = task
        return task

    def n_app_ranks(self) -> int:
        return self.jobspec.n_tasks

    def spawn_helper(self, task_id: int, pid: int, body, lane: int = 0) -> Task:
        """Oversubscribe a helper task onto an existing lane of a process."""
        proc = self.procs[pid]
        api = TaskApi(self, proc, task_id)
        gen = self._task_shell(api, TaskSpec(body=body), None)
        task = proc.sched.add_task(task_id, TaskKind.HELPER, lane, gen)
        api.task = task
        return task

    def _task_shell(self, api: "TaskApi", spec: TaskSpec, state):
        try:
            yield from spec.body(api, state)
        except _ProcessKilled:
            pass

    # -- running ----------------------------------------------------------------

    def run(self):
        """Drive the event loop to completion and classify the outcome."""
        if not self.started:
            self.start()
        self.loop.run()
        if not self.failed_pids and not self.task_failures:
            Scheduler.check_deadlock([p.sched for p in self.procs])
        # Helpers parked on their idle condition are finished off in place.
        for proc in self.procs:
            for t in proc.sched.tasks.values():
                if t.state is not TaskState.DONE and t.blocked_on == "idle":
                    t.state = TaskState.DONE
                    t.finish_time = t.lane.now
        status = "killed" if self.failed_pids else (
            "aborted" if self.task_failures else "completed")
        finish = {}
        for proc in self.procs:
            finish.update(proc.sched.finish_times())
        return RunOutcome(status, finish, dict(self.results),
                          dict(self.task_failures), self)

    def virtual_makespan(self) -> float:
        return max((lane.now for p in self.procs for lane in p.sched.lanes),
                   default=0.0)

    def close(self) -> None:
        for proc in self.procs:
            for st in proc.rails.values():
                st.release()
        registry = getattr(self, "_registry", None)
        if registry is not None:
            registry.close()
            self._registry = None

    # -- rails (job-level surface) -----------------------------------------------

    def close_rail(self, name: str) -> int:
        self._known_rail(name)
        if self.in_flight.get(name, 0) > 0:
            raise RailBusy(f"rail {name}: {self.in_flight[name]} frames in flight")
        return sum(proc.close_rail_local(name) for proc in self.procs)

    def reopen_rail(self, name: str) -> None:
        spec = self._known_rail(name)
        for proc in self.procs:
            proc.rail_state(name).allocate()
        if spec.topology == "ring" and self.started:
            # Static routes come back through a fresh KVS exchange; dynamic
            # rails reconnect lazily on demand.
            if not all(self.procs[p].table.find(name, p + 1) for p in range(self.n - 1)):
                self._bootstrap_ring(spec)

    def _known_rail(self, name: str) -> RailSpec:
        for spec in self.net.option_rails(self.jobspec.net_option):
            if spec.name == name:
                return spec
        raise UnknownRail(name)

    def dynamic_route_census(self) -> int:
        """Connected non-static routes on non-checkpointable rails (pairs)."""
        pairs = set()
        for proc in self.procs:
            for ep in proc.table.all_endpoints():
                spec = self.net.rail(ep.rail)
                if spec.checkpointable or ep.static:
                    continue
                if ep.state is EndpointState.CONNECTED:
                    pairs.add((ep.rail, min(proc.pid, ep.remote), max(proc.pid, ep.remote)))
        return len(pairs)

    # -- data plane ----------------------------------------------------------------

    def count_sent(self, msg: Message) -> None:
        proc = self.procs[msg.src_process]
        key = f"{msg.src_process},{msg.dst_process}"
        proc.sent_counts[key] = proc.sent_counts.get(key, 0) + 1

    def _deliver_local(self, msg: Message, now: float) -> None:
        self._deliver_data(msg, now)

    def _transmit(self, proc: LogicalProcess, ep: Endpoint, spec: RailSpec,
                  frame: bytes, arrival: float, is_data: bool) -> None:
        if spec.driver == "tcp":
            proc.rail_state(spec.name).port.send_bytes(ep.remote, frame)
        if is_data:
            self.in_flight[spec.name] = self.in_flight.get(spec.name, 0) + 1
        remote = ep.remote
        rail_name = spec.name

        def on_arrival():
            if is_data:
                self.in_flight[rail_name] -= 1
            self._receive_frame(remote, proc.pid, rail_name, frame)

        self.loop.at(arrival, on_arrival)

    def _receive_frame(self, pid: int, from_pid: int, rail_name: str, frame: bytes) -> None:
        proc = self.procs[pid]
        if proc.failed:
            return
        st = proc.rails.get(rail_name)
        if st is not None and st.spec.driver == "tcp" and st.open:
            # Pull the real bytes off the wire; orderly TCP close still
            # delivers frames buffered before a peer's rail shutdown.
            try:
                frame = st.port.recv_frame(from_pid)
            except (RailClosed, ConnectionError, OSError):
                pass  # fall back to the scheduled copy
        ftype, msg = decode_frame(frame)
        if ftype == FRAME_DATA:
            self._deliver_data(msg, self.loop.now)
        elif ftype == FRAME_CONTROL:
            self._handle_control(proc, ControlMessage.decode(msg.payload))

    def _deliver_data(self, msg: Message, now: float) -> None:
        proc = self.procs[msg.dst_process]
        if proc.failed:
            return
        pend = proc.pending_recv.get(msg.dst_task)
        if pend is not None and _filters_match(msg, pend[1], pend[2]):
            del proc.pending_recv[msg.dst_task]
            pend[0].signal_all(now, msg)
        else:
            proc.inbox.setdefault(msg.dst_task, []).append(msg)

    # -- control plane ----------------------------------------------------------------

    def route_control(self, proc: LogicalProcess, cmsg: ControlMessage,
                      at: float) -> None:
        """Forward a control message one greedy hop from ``proc``."""
        if cmsg.target == proc.pid:
            self._consume_control(proc, cmsg)
            return
        if cmsg.hops >= cmsg.ttl:
            self.routing_faults.append(
                f"ttl exceeded {cmsg.origin}->{cmsg.target} at {proc.pid}")
            return
        view = proc.route_view()
        next_hop = route_next_hop(proc.pid, cmsg.target, view)  # NoProgress is fatal
        ep = self._control_endpoint(proc, next_hop)
        if ep is None:
            raise NoRouteToProcess(
                f"control hop {proc.pid}->{next_hop} has no endpoint")
        spec = self.net.rail(ep.rail)
        fwd = ControlMessage(cmsg.kind, cmsg.origin, cmsg.target,
                             cmsg.hops + 1, cmsg.ttl, cmsg.payload)
        frame = encode_frame(FRAME_CONTROL, proc.pid, next_hop, 0, 0, 0, fwd.encode())
        cost = self.cost.net_per_byte * len(frame) + spec.latency
        self._transmit(proc, ep, spec, frame, at + cost, is_data=False)

    def _control_endpoint(self, proc: LogicalProcess, remote: int) -> Optional[Endpoint]:
        # Control traffic may ride any rail and ignores gates; highest
        # priority connected endpoint wins.
        for ep in proc.table.endpoints_for(remote):
            if ep.state is EndpointState.CONNECTED and proc.rails[ep.rail].open:
                return ep
        return None

    def _handle_control(self, proc: LogicalProcess, cmsg: ControlMessage) -> None:
        if cmsg.target != proc.pid:
            self.route_control(proc, cmsg, self.loop.now)
            return
        if cmsg.kind is ControlKind.CONN_REQUEST:
            self._serve_conn_request(proc, cmsg)
        elif cmsg.kind is ControlKind.CONN_ACK:
            self._serve_conn_ack(proc, cmsg)
        elif cmsg.kind is ControlKind.BARRIER_TOKEN:
            self._serve_barrier_token(proc, cmsg)
        elif cmsg.kind is ControlKind.PROBE:
            self._serve_probe(proc, cmsg)

    def _serve_conn_request(self, proc: LogicalProcess, cmsg: ControlMessage) -> None:
        req = json.loads(cmsg.payload.decode("utf-8"))
        rail_name = req["rail"]
        st = proc.rails.get(rail_name)
        if st is None or not st.open:
            return  # requester will time out
        origin = self.procs[cmsg.origin]
        if proc.table.find(rail_name, cmsg.origin) is None:
            self._driver_connect(proc, origin, st.spec, req["info"])
            proc.table.insert(Endpoint(rail_name, cmsg.origin), st.spec.priority)
            self.trace.log(self.loop.now, proc.pid, "-", "-",
                           f"accept:{rail_name}:{cmsg.origin}")
        ack_payload = json.dumps({"rail": rail_name, "req": req["req"],
                                  "info": st.conn_string()}).encode("utf-8")
        ack = ControlMessage(ControlKind.CONN_ACK, proc.pid, cmsg.origin,
                             0, self.n, ack_payload)
        self.route_control(proc, ack, self.loop.now)

    def _serve_conn_ack(self, proc: LogicalProcess, cmsg: ControlMessage) -> None:
        rep = json.loads(cmsg.payload.decode("utf-8"))
        rail_name = rep["rail"]
        st = proc.rails.get(rail_name)
        if st is None or not st.open:
            return
        ep = proc.table.find(rail_name, cmsg.origin)
        if ep is None:
            ep = Endpoint(rail_name, cmsg.origin)
            proc.table.insert(ep, st.spec.priority)
        self.reconnects += 1
        self.trace.log(self.loop.now, proc.pid, "-", "-",
                       f"on_demand_connect:{rail_name}:{cmsg.origin}")
        cond = self.conn_waiters.pop(rep["req"], None)
        if cond is not None:
            cond.signal_all(self.loop.now, ep)

    def _serve_barrier_token(self, proc: LogicalProcess, cmsg: ControlMessage) -> None:
        tok = json.loads(cmsg.payload.decode("utf-8"))
        key = (tok["phase"], tok["seq"])
        cond = proc.barrier_waiters.pop(key, None)
        if cond is not None:
            cond.signal_all(self.loop.now, tok["data"])
        else:
            proc.barrier_inbox[key] = tok["data"]

    def _serve_probe(self, proc: LogicalProcess, cmsg: ControlMessage) -> None:
        flag = cmsg.payload[:1]
        probe_id = int.from_bytes(cmsg.payload[1:9], "little")
        body = cmsg.payload[9:]
        if flag == b"Q":
            reply = b"A" + probe_id.to_bytes(8, "little") + \
                cmsg.hops.to_bytes(4, "little") + body
            back = ControlMessage(ControlKind.PROBE, proc.pid, cmsg.origin,
                                  0, self.n, reply)
            self.route_control(proc, back, self.loop.now)
        else:
            hops_there = int.from_bytes(body[:4], "little")
            cond = self.probe_waiters.pop(probe_id, None)
            if cond is not None:
                cond.signal_all(self.loop.now, (hops_there, body[4:]))

    def next_req_id(self) -> int:
        self._req_seq += 1
        return self._req_seq

    # -- faults -----------------------------------------------------------------------

    def kill_processes(self, pids, now: float) -> None:
        """Victims stop executing; their local (L1) storage is marked lost;
        survivors get PeerFailed on contact."""
        pids = sorted(set(pids))
        for pid in pids:
            proc = self.procs[pid]
            proc.failed = True
            self.failed_pids.add(pid)
            self.trace.log(now, pid, "-", "-", "kill")
            for task in proc.sched.tasks.values():
                if task.state is TaskState.DONE:
                    continue
                if task.state is TaskState.RUNNING:
                    # Mid-segment tasks get the kill thrown at their next
                    # resumption; the raising caller handles itself.
                    task._pending_exc = _ProcessKilled()
                else:
                    task.state = TaskState.DONE
                    task.finish_time = task.lane.now
            for lane in proc.sched.lanes:
                lane.run_queue.clear()
        if self.multilevel is not None:
            self.multilevel.mark_lost(pids)
        # Survivors blocked on a dead source observe the failure.
        for proc in self.procs:
            if proc.failed:
                continue
            for rank, (cond, src, tag) in list(proc.pending_recv.items()):
                if src is not None and self.host_of(src) in self.failed_pids:
                    del proc.pending_recv[rank]
                    task = proc.sched.tasks.get(rank)
                    if task is not None:
                        task.throw_soon(PeerFailed(f"process {self.host_of(src)} killed"), now)

    def record_failure(self, task: Task, exc: BaseException) -> None:
        self.task_failures[task.id] = exc


@dataclass
class RunOutcome:
    status: str
    finish_times: dict
    results: dict
    failures: dict
    runtime: Runtime


# ---------------------------------------------------------------------------

class TaskApi:
    """What task bodies see. Methods that can take virtual time or block are
    generators and must be driven with ``yield from``; pure bookkeeping calls
    are plain methods."""

    def __init__(self, rt: Runtime, proc: LogicalProcess, rank: int):
        self.rt = rt
        self.proc = proc
        self.rank = rank
        self.task: Optional[Task] = None

    # -- basic effects -------------------------------------------------------

    def compute(self, units: float):
        yield Compute(units)

    def wait(self, ticks: float):
        yield WaitTicks(ticks)

    def yield_now(self):
        yield YieldNow()

    def write_bytes(self, nbytes: int, kind: str = "local"):
        per = {"local": self.rt.cost.local_write_per_byte,
               "pfs": self.rt.cost.pfs_per_byte,
               "encode": self.rt.cost.encode_per_byte}[kind]
        yield IoWrite(nbytes * per, label=kind)

    def charge(self, ticks: float):
        yield Charge(ticks)

    # -- messaging -------------------------------------------------------------

    def send(self, dst_rank: int, tag: int, payload) -> SendReceipt:
        rt, proc = self.rt, self.proc
        payload = bytes(payload)
        dst_pid = rt.host_of(dst_rank)
        if dst_pid in rt.failed_pids:
            raise PeerFailed(f"destination process {dst_pid} is marked killed")
        msg = Message(self.rank, dst_rank, proc.pid, dst_pid, tag, payload)
        if dst_pid == proc.pid:
            # Intra-process delivery bypasses rails: a shared-memory copy.
            rt.count_sent(msg)
            rt._deliver_local(msg, self.task.lane.now)
            return SendReceipt(None, self.task.lane.now)
        ep = None
        while ep is None:
            rails = proc.open_rail_specs()
            rails.sort(key=lambda s: -s.priority)
            ep = select_endpoint(proc.table, msg, rails)
            if ep is not None:
                break
            cands = creation_candidates(msg, rails)
            if not cands:
                raise NoRouteToProcess(
                    f"no route to process {dst_pid} for {msg.size}-byte message")
            yield from self.request_connection(cands[0].name, dst_pid)
        spec = rt.net.rail(ep.rail)
        frame = encode_frame(FRAME_DATA, proc.pid, dst_pid, self.rank, dst_rank,
                             tag, payload)
        cost = rt.cost.net_per_byte * msg.size + spec.latency
        rt.count_sent(msg)
        rt._transmit(proc, ep, spec, frame, self.task.lane.now + cost, is_data=True)
        yield Charge(cost)
        return SendReceipt(ep.rail, self.task.lane.now)

    def recv(self, src: Optional[int] = None, tag: Optional[int] = None) -> Message:
        proc = self.proc
        if src is not None and self.rt.host_of(src) in self.rt.failed_pids:
            raise PeerFailed(f"source process {self.rt.host_of(src)} is marked killed")
        msg = proc.match_inbox(self.rank, src, tag)
        if msg is None:
            cond = Condition(proc.sched, "recv")
            proc.pending_recv[self.rank] = (cond, src, tag)
            msg = yield BlockOn(cond, state=TaskState.BLOCKED_RECV)
        proc.count_consumed(msg)
        return msg

    def elect(self, dst_rank: int, size: int) -> Endpoint:
        """Election without transmission (diagnostics and tests)."""
        proc = self.proc
        dst_pid = self.rt.host_of(dst_rank)
        msg = Message(self.rank, dst_rank, proc.pid, dst_pid, 0, b"\0" * size)
        rails = proc.open_rail_specs()
        rails.sort(key=lambda s: -s.priority)
        ep = select_endpoint(proc.table, msg, rails)
        if ep is None:
            raise NoRouteToProcess(f"no connected endpoint to {dst_pid}")
        return ep

    # -- signaling ----------------------------------------------------------------

    def request_connection(self, rail_name: str, target_pid: int) -> Endpoint:
        """One-sided on-demand connection via routed control messages."""
        rt, proc = self.rt, self.proc
        if target_pid == proc.pid:
            raise RailClosed("cannot request a connection to self")
        st = proc.rail_state(rail_name)
        if not st.open:
            raise RailClosed(f"rail {rail_name} closed at requester")
        existing = proc.table.find(rail_name, target_pid)
        if existing is not None and existing.state is EndpointState.CONNECTED:
            return existing
        req_id = rt.next_req_id()
        cond = Condition(proc.sched, f"connack:{req_id}")
        rt.conn_waiters[req_id] = cond
        payload = json.dumps({"rail": rail_name, "req": req_id,
                              "info": st.conn_string()}).encode("utf-8")
        cmsg = ControlMessage(ControlKind.CONN_REQUEST, proc.pid, target_pid,
                              0, rt.n, payload)
        rt.route_control(proc, cmsg, self.task.lane.now)
        deadline = self.task.lane.now + rt.options.connect_timeout

        def expire():
            waiter = rt.conn_waiters.pop(req_id, None)
            if waiter is not None:
                waiter.signal_all(rt.loop.now, _TIMEOUT)

        rt.loop.at(deadline, expire)
        result = yield BlockOn(cond, state=TaskState.BLOCKED_RECV)
        if result is _TIMEOUT:
            raise ConnectTimeout(
                f"no answer from process {target_pid} on rail {rail_name}")
        return result

    def probe(self, target_pid: int, payload: bytes = b"") -> tuple[int, bytes]:
        """Route a probe to ``target_pid``; returns (hops taken, payload)."""
        rt, proc = self.rt, self.proc
        rt._probe_seq += 1
        probe_id = rt._probe_seq
        cond = Condition(proc.sched, f"probe:{probe_id}")
        rt.probe_waiters[probe_id] = cond
        body = b"Q" + probe_id.to_bytes(8, "little") + bytes(payload)
        cmsg = ControlMessage(ControlKind.PROBE, proc.pid, target_pid,
                              0, rt.n, body)
        rt.route_control(proc, cmsg, self.task.lane.now)
        result = yield BlockOn(cond, state=TaskState.BLOCKED_RECV)
        return result

    # -- collectives / protocol helpers ----------------------------------------------

    def intra_barrier(self, key):
        """Counting barrier across this process's live tasks; returns the
        elected master rank (lowest alive task id)."""
        proc = self.proc
        alive = sorted(t.id for t in proc.alive_tasks())
        master = alive[0]
        bar = proc.intra_barriers.get(key)
        if bar is None:
            bar = {"count": 0, "cond": Condition(proc.sched, f"intra:{key}"),
                   "expect": len(alive)}
            proc.intra_barriers[key] = bar
        bar["count"] += 1
        if bar["count"] >= bar["expect"]:
            del proc.intra_barriers[key]
            bar["cond"].signal_all(self.task.lane.now)
        else:
            yield BlockOn(bar["cond"], state=TaskState.BLOCKED_RECV)
        return master

    def barrier_send(self, dst_pid: int, phase: str, seq: int, data) -> None:
        payload = json.dumps({"phase": phase, "seq": seq, "data": data},
                             sort_keys=True).encode("utf-8")
        cmsg = ControlMessage(ControlKind.BARRIER_TOKEN, self.proc.pid, dst_pid,
                              0, self.rt.n, payload)
        self.rt.route_control(self.proc, cmsg, self.task.lane.now)

    def barrier_recv(self, phase: str, seq: int):
        proc = self.proc
        key = (phase, seq)
        if key in proc.barrier_inbox:
            return proc.barrier_inbox.pop(key)
        cond = Condition(proc.sched, f"barrier:{phase}:{seq}")
        proc.barrier_waiters[key] = cond
        data = yield BlockOn(cond, state=TaskState.BLOCKED_RECV)
        return data

    def kvs_fence(self):
        """Blocking fence over the bootstrap KVS across all processes."""
        rt = self.rt
        epoch = rt.kvs.fence(self.proc.pid)
        if epoch > rt.fence_epoch_seen:
            rt.fence_epoch_seen = epoch
            if rt._fence_cond is not None:
                rt._fence_cond.signal_all(self.task.lane.now, epoch)
                rt._fence_cond = None
            return epoch
        if rt._fence_cond is None:
            rt._fence_cond = Condition(self.proc.sched, "kvs_fence")
        epoch = yield BlockOn(rt._fence_cond, state=TaskState.BLOCKED_RECV)
        return epoch

    # -- checkpoint surfaces (installed subsystems) -----------------------------------

    def checkpoint(self):
        if self.rt.coordinator is None:
            from .ckpt_transparent import CheckpointCoordinator
            self.rt.coordinator = CheckpointCoordinator(self.rt)
        result = yield from self.rt.coordinator.collective(self)
        return result

    def protect(self, region_id: int, buf, elem_size: int = 1, count: Optional[int] = None):
        self._multilevel().protect(self.rank, region_id, buf, elem_size, count)

    def checkpoint_app(self, ckpt_id: int, level: int):
        result = yield from self._multilevel().checkpoint_app(self, ckpt_id, level)
        return result

    def recover(self, level: int):
        result = yield from self._multilevel().recover(self, level)
        return result

    def _multilevel(self):
        if self.rt.multilevel is None:
            raise McrError("multilevel checkpointing not initialized (call fti_init)")
        return self.rt.multilevel

    # -- misc --------------------------------------------------------------------------

    def fault_point(self, step: int) -> None:
        """Victims stop exactly at their fault plan step.

        The first victim reaching the step takes the whole victim set down,
        so every victim halts at the same logical step.
        """
        plan = self.rt.fault_plan
        if plan is None or step != plan.step or self.proc.pid not in plan.victims:
            return
        if not self.proc.failed:
            self.rt.kill_processes(plan.victims, self.task.lane.now)
        raise _ProcessKilled()

    def report(self, key: str, value) -> None:
        self.rt.results[(self.rank, key)] = value

    def dynamic_route_census(self) -> int:
        return self.rt.dynamic_route_census()

    def reconnect_count(self) -> int:
        return self.rt.reconnects

    def trace_event(self, event: str) -> None:
        self.rt.trace.log(self.task.lane.now, self.proc.pid,
                          self.task.lane.id, self.rank, event)

    @property
    def now(self) -> float:
        return self.task.lane.now
