"""User-level cooperative scheduler over a deterministic virtual clock.

Each logical process owns a set of execution lanes (one per simulated core).
Tasks are Python generators that yield effect objects back to their lane;
the lane charges virtual ticks from the cost model and decides when to
switch. Scheduling is non-preemptive: a running task keeps its lane until
it yields, blocks, or finishes.

The whole job runs inside one event loop (`EventLoop`). Lanes interleave
through that loop, so cross-process message timing is causal and every run
with the same seed and configuration produces the same trace.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Optional

from .errors import DeadlockError, UnknownLane


@dataclass
class CostModel:
    """Tick charges for every modeled operation.

    ``ctx_switch`` is the user-level switch cost; the process-baseline
    comparison harness multiplies it by ``process_switch_multiplier``.
    """

    compute_tick: float = 1.0
    net_per_byte: float = 1.0
    local_write_per_byte: float = 1.0
    encode_per_byte: float = 1.0
    ctx_switch: float = 0.0
    pfs_per_byte: float = 4.0
    process_switch_multiplier: float = 10.0

    def __post_init__(self):
        for name in ("compute_tick", "net_per_byte", "local_write_per_byte",
                     "encode_per_byte", "ctx_switch", "pfs_per_byte"):
            if getattr(self, name) < 0:
                raise ValueError(f"cost model field {name} must be >= 0")
        # A user-level switch can never cost more than the process-level
        # switch modeled by the comparison harness.
        if self.process_switch_multiplier < 1:
            raise ValueError("process_switch_multiplier must be >= 1")


class VirtualClock:
    """Monotone non-decreasing tick counter."""

    __slots__ = ("now",)

    def __init__(self, start: float = 0.0):
        self.now = start

    def advance_to(self, t: float) -> None:
        if t < self.now:
            raise ValueError(f"clock would go backwards: {t} < {self.now}")
        self.now = t

    def advance_by(self, dt: float) -> None:
        if dt < 0:
            raise ValueError("negative clock advance")
        self.now += dt


class EventLoop:
    """Deterministic discrete-event core.

    Events are ordered by (time, insertion sequence), so simultaneous
    events fire in scheduling order and runs are reproducible.
    """

    def __init__(self):
        self._heap: list = []
        self._seq = 0
        self.now = 0.0

    def at(self, time: float, fn: Callable[[], None]) -> None:
        if time < self.now:
            time = self.now
        heapq.heappush(self._heap, (time, self._seq, fn))
        self._seq += 1

    def pending(self) -> bool:
        return bool(self._heap)

    def run(self, until_idle_check: Optional[Callable[[], bool]] = None) -> None:
        """Drain the event heap.

        ``until_idle_check`` is polled whenever the heap empties; returning
        True means "more events were injected, keep going".
        """
        while True:
            while self._heap:
                time, _, fn = heapq.heappop(self._heap)
                self.now = max(self.now, time)
                fn()
            if until_idle_check is None or not until_idle_check():
                return


class TaskState(Enum):
    READY = "ready"
    RUNNING = "running"
    YIELDED = "yielded"
    BLOCKED_RECV = "blocked_recv"
    BLOCKED_IO = "blocked_io"
    DONE = "done"


class TaskKind(Enum):
    APP = "app"
    HELPER = "helper"


# Effects a task generator may yield to its scheduler. Bodies normally go
# through a TaskApi wrapper rather than building these directly.

@dataclass
class Compute:
    units: float


@dataclass
class IoWrite:
    """Charge ticks for a storage transfer.

    With ``io_yield`` enabled on the scheduler the task blocks and the lane
    is released for the duration; otherwise the lane is held, which models
    a runtime that has no yield points inside I/O calls.
    """

    ticks: float
    label: str = "io"


@dataclass
class WaitTicks:
    """Block for a fixed virtual duration (an io/recv completion deadline)."""

    ticks: float
    label: str = "wait"


@dataclass
class YieldNow:
    pass


@dataclass
class BlockOn:
    """Block until ``condition`` is signalled."""

    condition: "Condition"
    state: TaskState = TaskState.BLOCKED_RECV


@dataclass
class Charge:
    """Advance the lane clock without any scheduling decision."""

    ticks: float


class Condition:
    """A wakeable waiting point; tasks block on it, anyone may signal it.

    ``idle_ok`` marks conditions (helper idle queues) whose waiters do not
    count as deadlocked when the job is otherwise finished.
    """

    def __init__(self, scheduler_host: "Scheduler", name: str = "", idle_ok: bool = False):
        self._host = scheduler_host
        self.name = name
        self.idle_ok = idle_ok
        self._waiters: list[Task] = []

    def add_waiter(self, task: "Task") -> None:
        self._waiters.append(task)

    def waiters(self) -> list["Task"]:
        return list(self._waiters)

    def signal_all(self, at_time: float, value=None) -> None:
        waiters, self._waiters = self._waiters, []
        for t in waiters:
            t._resume_value = value
            t.scheduler._make_ready(t, at_time)

    def signal_one(self, at_time: float, value=None) -> None:
        if self._waiters:
            t = self._waiters.pop(0)
            t._resume_value = value
            t.scheduler._make_ready(t, at_time)


class Task:
    def __init__(self, task_id: int, kind: TaskKind, lane: "Lane", gen):
        self.id = task_id
        self.kind = kind
        self.lane = lane
        self.gen = gen
        self.state = TaskState.READY
        self.finish_time: Optional[float] = None
        self.scheduler: "Scheduler" = lane.scheduler
        self._resume_value = None
        self._pending_exc: Optional[BaseException] = None
        self.blocked_on: str = ""

    def __repr__(self):
        return f"<Task {self.id} {self.kind.value} {self.state.value}>"

    def throw_soon(self, exc: BaseException, at_time: float) -> None:
        """Deliver an exception into the task at its next resumption."""
        self._pending_exc = exc
        self.scheduler._make_ready(self, at_time)


class Lane:
    def __init__(self, scheduler: "Scheduler", lane_id: int):
        self.scheduler = scheduler
        self.id = lane_id
        self.clock = VirtualClock()
        self.run_queue: list[Task] = []
        self.current: Optional[Task] = None
        self._dispatch_scheduled = False
        self._ever_dispatched = False
        self.switches = 0

    @property
    def now(self) -> float:
        return self.clock.now


class Scheduler:
    """Per-process cooperative scheduler.

    One scheduler per logical process; all its lanes share the hosting
    process identity `pid` for tracing. Cross-process coordination happens
    through the shared EventLoop.
    """

    def __init__(self, loop: EventLoop, cost: CostModel, n_lanes: int = 1,
                 pid: int = 0, trace: Optional["Trace"] = None,
                 io_yield: bool = False, process_switch_mode: bool = False):
        self.loop = loop
        self.cost = cost
        self.pid = pid
        self.trace = trace or Trace()
        self.io_yield = io_yield
        self.process_switch_mode = process_switch_mode
        self.lanes = [Lane(self, i) for i in range(n_lanes)]
        self.tasks: dict[int, Task] = {}
        # Installed by the runtime: called with (task, exc) when a task body
        # raises; returning normally marks the task failed instead of
        # crashing the loop.
        self.on_task_error: Optional[Callable] = None

    # -- public ops ---------------------------------------------------------

    def spawn_task(self, lane_id: int, kind: TaskKind, work) -> int:
        """Queue a task on a lane; ``work`` is a generator or a descriptor list."""
        if lane_id < 0 or lane_id >= len(self.lanes):
            raise UnknownLane(f"process {self.pid} has no lane {lane_id}")
        lane = self.lanes[lane_id]
        task_id = self._next_task_id()
        gen = work if hasattr(work, "send") else _compile_descriptor(work)
        task = Task(task_id, kind, lane, gen)
        self.tasks[task_id] = task
        self._trace(lane, task_id, "spawn")
        self._make_ready(task, lane.now)
        return task_id

    def add_task(self, task_id: int, kind: TaskKind, lane_id: int, gen) -> Task:
        """Like spawn_task but with a caller-chosen id (runtime-assigned ranks)."""
        if lane_id < 0 or lane_id >= len(self.lanes):
            raise UnknownLane(f"process {self.pid} has no lane {lane_id}")
        lane = self.lanes[lane_id]
        task = Task(task_id, kind, lane, gen)
        self.tasks[task_id] = task
        self._trace(lane, task_id, "spawn")
        self._make_ready(task, lane.now)
        return task

    def run_to_completion(self) -> dict[int, float]:
        """Drive a standalone scheduler until every task is done.

        Multi-process jobs go through Runtime.run() instead, which owns the
        shared event loop.
        """
        self.loop.run()
        self.check_deadlock([self])
        return {tid: t.finish_time for tid, t in self.tasks.items()}

    @staticmethod
    def check_deadlock(schedulers: Iterable["Scheduler"]) -> None:
        stuck = []
        for sched in schedulers:
            for t in sched.tasks.values():
                if t.state is TaskState.DONE:
                    continue
                if t.state in (TaskState.BLOCKED_RECV, TaskState.BLOCKED_IO) \
                        and t.blocked_on == "idle":
                    continue
                stuck.append((sched.pid, t.id, t.state.value, t.blocked_on))
        if stuck:
            dump = "; ".join(f"p{p} task {tid} {st} on {on!r}" for p, tid, st, on in stuck)
            raise DeadlockError(f"no pending event while tasks blocked: {dump}", blocked=stuck)

    def finish_times(self) -> dict[int, float]:
        return {tid: t.finish_time for tid, t in self.tasks.items()}

    # -- internals ----------------------------------------------------------

    def _next_task_id(self) -> int:
        return max(self.tasks) + 1 if self.tasks else 0

    def _trace(self, lane: Lane, task_id, event: str) -> None:
        self.trace.log(lane.now, self.pid, lane.id, task_id, event)

    def _make_ready(self, task: Task, at_time: float) -> None:
        if task.state is TaskState.DONE:
            return
        task.state = TaskState.READY
        task.blocked_on = ""
        lane = task.lane
        if task not in lane.run_queue:
            lane.run_queue.append(task)
        self._schedule_dispatch(lane, at_time)

    def _schedule_dispatch(self, lane: Lane, at_time: float) -> None:
        if lane.current is not None or lane._dispatch_scheduled or not lane.run_queue:
            return
        lane._dispatch_scheduled = True
        self.loop.at(max(lane.now, at_time), lambda: self._dispatch(lane))

    def _dispatch(self, lane: Lane) -> None:
        lane._dispatch_scheduled = False
        if lane.current is not None or not lane.run_queue:
            return
        lane.clock.advance_to(max(lane.now, self.loop.now))
        # Every dispatch after the lane's first charges one context switch.
        if lane._ever_dispatched:
            charge = self.cost.ctx_switch
            if self.process_switch_mode:
                charge *= self.cost.process_switch_multiplier
            lane.clock.advance_by(charge)
            lane.switches += 1
            if charge:
                self._trace(lane, "-", "switch")
        else:
            lane._ever_dispatched = True
        task = lane.run_queue.pop(0)
        task.state = TaskState.RUNNING
        lane.current = task
        self._trace(lane, task.id, "dispatch")
        self._step(task)

    def _step(self, task: Task) -> None:
        """Advance the task generator until it blocks, reschedules, or ends."""
        lane = task.lane
        while True:
            try:
                if task._pending_exc is not None:
                    exc, task._pending_exc = task._pending_exc, None
                    effect = task.gen.throw(exc)
                else:
                    value, task._resume_value = task._resume_value, None
                    effect = task.gen.send(value)
            except StopIteration:
                self._finish(task)
                return
            except Exception as exc:
                if self.on_task_error is None:
                    raise
                self.on_task_error(task, exc)
                self._trace(lane, task.id, f"failed:{type(exc).__name__}")
                self._finish(task)
                return
            action = self._apply(task, effect)
            if action == "inline":
                continue
            return

    def _apply(self, task: Task, effect) -> str:
        lane = task.lane
        if isinstance(effect, Compute):
            ticks = effect.units * self.cost.compute_tick
            if ticks <= 0:
                return "inline"
            lane.clock.advance_by(ticks)
            self._reschedule(task)
            return "event"
        if isinstance(effect, Charge):
            if effect.ticks <= 0:
                return "inline"
            lane.clock.advance_by(effect.ticks)
            self._reschedule(task)
            return "event"
        if isinstance(effect, IoWrite):
            if effect.ticks <= 0:
                return "inline"
            if self.io_yield:
                wake = lane.now + effect.ticks
                self._block(task, TaskState.BLOCKED_IO, effect.label)
                self.loop.at(wake, lambda: self._make_ready(task, wake))
            else:
                # No yield points inside I/O: the lane is held for the
                # whole transfer.
                lane.clock.advance_by(effect.ticks)
                self._reschedule(task)
            return "event"
        if isinstance(effect, WaitTicks):
            wake = lane.now + effect.ticks
            self._block(task, TaskState.BLOCKED_RECV, effect.label)
            self.loop.at(wake, lambda: self._make_ready(task, wake))
            return "event"
        if isinstance(effect, YieldNow):
            task.state = TaskState.YIELDED
            self._trace(lane, task.id, "yield")
            lane.current = None
            self._make_ready(task, lane.now)
            self._schedule_dispatch(lane, lane.now)
            return "event"
        if isinstance(effect, BlockOn):
            self._block(task, effect.state, effect.condition.name)
            effect.condition.add_waiter(task)
            return "event"
        if callable(effect):
            # Runtime-level effects (send, recv, control ops) are closures
            # installed by the runtime layer; they return "inline", "event"
            # or "blocked" themselves.
            return effect(self, task)
        raise TypeError(f"task {task.id} yielded unknown effect {effect!r}")

    def _reschedule(self, task: Task) -> None:
        lane = task.lane
        self.loop.at(lane.now, lambda: self._continue(task))

    def _continue(self, task: Task) -> None:
        if task.state is TaskState.RUNNING:
            self._step(task)

    def _block(self, task: Task, state: TaskState, label: str) -> None:
        lane = task.lane
        task.state = state
        task.blocked_on = label
        self._trace(lane, task.id, f"block:{label}" if label else "block")
        lane.current = None
        self._schedule_dispatch(lane, lane.now)

    def _finish(self, task: Task) -> None:
        lane = task.lane
        task.state = TaskState.DONE
        task.finish_time = lane.now
        lane.current = None
        self._trace(lane, task.id, "done")
        self._schedule_dispatch(lane, lane.now)


def _compile_descriptor(work) -> "generator":
    """Build a task body from a declarative descriptor list.

    Supported steps: ("compute", units), ("wait", ticks), ("write", ticks),
    ("yield",). Handy for scheduler tests that do not need the runtime.
    """
    steps = list(work)

    def body():
        for step in steps:
            op = step[0]
            if op == "compute":
                yield Compute(step[1])
            elif op == "wait":
                yield WaitTicks(step[1])
            elif op == "write":
                yield IoWrite(step[1])
            elif op == "yield":
                yield YieldNow()
            else:
                raise ValueError(f"unknown work step {step!r}")

    return body()


@dataclass
class TraceEvent:
    tick: float
    process: int
    lane: int
    task: object
    event: str


class Trace:
    """Append-only scheduling event log, rendered as CSV for tests and plots."""

    HEADER = "tick,process,lane,task,event"

    def __init__(self):
        self.events: list[TraceEvent] = []

    def log(self, tick, process, lane, task, event) -> None:
        self.events.append(TraceEvent(tick, process, lane, task, event))

    def to_csv(self) -> str:
        lines = [self.HEADER]
        for e in self.events:
            lines.append(f"{_fmt_tick(e.tick)},{e.process},{e.lane},{e.task},{e.event}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_csv())

    def select(self, event_prefix: str) -> list[TraceEvent]:
        return [e for e in self.events if e.event.startswith(event_prefix)]


def _fmt_tick(t: float) -> str:
    return str(int(t)) if float(t).is_integer() else repr(t)
