"""Scheduler unit tests: lanes, cooperative switching, virtual time."""

import pytest

from mcr.errors import DeadlockError, UnknownLane
from mcr.sched import (
    BlockOn,
    Compute,
    Condition,
    CostModel,
    EventLoop,
    IoWrite,
    Scheduler,
    TaskKind,
    TaskState,
    WaitTicks,
    YieldNow,
)


def make_sched(**kw):
    loop = EventLoop()
    cost = kw.pop("cost", CostModel())
    return Scheduler(loop, cost, **kw)


def test_single_task_finish_time():
    sched = make_sched(cost=CostModel(compute_tick=1, ctx_switch=7))
    tid = sched.spawn_task(0, TaskKind.APP, [("compute", 1000)])
    times = sched.run_to_completion()
    # First dispatch on a lane is free; only later switches are charged.
    assert times[tid] == 1000


def test_spawn_on_missing_lane():
    sched = make_sched(n_lanes=4)
    with pytest.raises(UnknownLane):
        sched.spawn_task(99, TaskKind.APP, [("compute", 1)])


def test_yield_alone_charges_one_switch():
    sched = make_sched(cost=CostModel(ctx_switch=3))

    def body():
        yield Compute(10)
        yield YieldNow()
        yield Compute(10)

    tid = sched.spawn_task(0, TaskKind.APP, body())
    times = sched.run_to_completion()
    assert times[tid] == 10 + 3 + 10


def test_round_robin_is_deterministic():
    def run_once():
        sched = make_sched(cost=CostModel(ctx_switch=1))
        for _ in range(2):
            sched.spawn_task(0, TaskKind.APP,
                             [("compute", 5), ("yield",), ("compute", 5),
                              ("yield",), ("compute", 5)])
        sched.run_to_completion()
        return [(e.tick, e.task, e.event) for e in sched.trace.events]

    assert run_once() == run_once()


def test_helper_work_hides_inside_blocked_window():
    # App blocks 100 ticks; helper has 60 ticks of encode work on the same
    # lane and must finish inside the window without delaying the app.
    sched = make_sched(cost=CostModel(ctx_switch=0))
    app = sched.spawn_task(0, TaskKind.APP,
                           [("compute", 40), ("wait", 100), ("compute", 10)])
    # The helper only gets the lane once the app blocks at t=40.
    helper = sched.spawn_task(0, TaskKind.HELPER, [("compute", 60)])
    times = sched.run_to_completion()
    assert times[app] == 40 + 100 + 10
    assert times[helper] == 40 + 60
    assert times[helper] <= 40 + 100  # hidden inside the app's wait


def test_oversubscribed_app_finish_matches_inline_baseline():
    # App: 1000 work with a 200-tick recv wait at the midpoint. Helper has
    # 150 ticks of work. The app's finish time must equal the helper-free
    # run because the helper fits inside the wait.
    def app_work():
        return [("compute", 500), ("wait", 200), ("compute", 500)]

    solo = make_sched(cost=CostModel(ctx_switch=0))
    a0 = solo.spawn_task(0, TaskKind.APP, app_work())
    base = solo.run_to_completion()[a0]

    both = make_sched(cost=CostModel(ctx_switch=0))
    a1 = both.spawn_task(0, TaskKind.APP, app_work())
    h1 = both.spawn_task(0, TaskKind.HELPER, [("compute", 150)])
    times = both.run_to_completion()
    assert times[a1] == base == 1200
    assert times[h1] == 650


def test_io_yield_releases_lane():
    # With io_yield the helper's long write overlaps the app's wake; without
    # it the lane is held and the app is delayed.
    def build(io_yield):
        sched = make_sched(cost=CostModel(ctx_switch=0), io_yield=io_yield)
        app = sched.spawn_task(0, TaskKind.APP,
                               [("compute", 100), ("wait", 200), ("compute", 300)])
        # Helper starts its 300-tick write at t=100, straddling the app's
        # wake at t=300.
        helper = sched.spawn_task(0, TaskKind.HELPER, [("write", 300)])
        times = sched.run_to_completion()
        return times[app]

    assert build(io_yield=True) == 100 + 200 + 300
    assert build(io_yield=False) == 100 + 300 + 300  # write holds the lane


def test_switch_accounting_identity():
    # Total lane advance == work + non-overlapped gaps + switches * cost.
    cost = CostModel(ctx_switch=5)
    sched = make_sched(cost=cost)
    sched.spawn_task(0, TaskKind.APP, [("compute", 30), ("yield",), ("compute", 20)])
    sched.spawn_task(0, TaskKind.APP, [("compute", 10), ("yield",), ("compute", 10)])
    sched.run_to_completion()
    lane = sched.lanes[0]
    work = 30 + 20 + 10 + 10
    assert lane.now == work + lane.switches * cost.ctx_switch


def test_process_switch_mode_is_slower():
    def finish(process_mode):
        sched = make_sched(cost=CostModel(ctx_switch=2),
                           process_switch_mode=process_mode)
        a = sched.spawn_task(0, TaskKind.APP,
                             [("compute", 10), ("yield",), ("compute", 10),
                              ("yield",), ("compute", 10)])
        sched.spawn_task(0, TaskKind.HELPER,
                         [("compute", 5), ("yield",), ("compute", 5),
                          ("yield",), ("compute", 5)])
        return sched.run_to_completion()[a]

    # UNIX-process helper baseline pays the multiplied switch cost.
    assert finish(True) > finish(False)


def test_deadlock_reports_blocked_tasks():
    sched = make_sched()
    cond = Condition(sched, "never")

    def body():
        yield BlockOn(cond)

    sched.spawn_task(0, TaskKind.APP, body())
    with pytest.raises(DeadlockError) as err:
        sched.run_to_completion()
    assert err.value.blocked


def test_work_conservation_no_idle_with_ready_task():
    # Two pure-compute tasks: the lane must run them back to back.
    sched = make_sched(cost=CostModel(ctx_switch=0))
    sched.spawn_task(0, TaskKind.APP, [("compute", 50)])
    sched.spawn_task(0, TaskKind.APP, [("compute", 70)])
    times = sched.run_to_completion()
    assert sched.lanes[0].now == 120
    assert sorted(times.values()) == [50, 120]


def test_state_transitions_and_finish_map():
    sched = make_sched()

    def body():
        yield Compute(5)
        yield WaitTicks(5)
        yield IoWrite(5)

    tid = sched.spawn_task(0, TaskKind.APP, body())
    task = sched.tasks[tid]
    assert task.state is TaskState.READY
    times = sched.run_to_completion()
    assert task.state is TaskState.DONE
    assert times[tid] == 15
