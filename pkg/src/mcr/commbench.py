"""Communication microbenchmark.

Ping-pong latencies per message size, measured in virtual ticks before a
transparent checkpoint, in the first round after it (the transient window
where closed dynamic routes reconnect on demand), and once steady again.

Sizes at or under the 32KB gate run between rank-adjacent pairs over the
static ring; larger sizes run between skip-distance pairs so they exercise
on-demand routes on the gated rail, which is exactly what the checkpoint
closes. Reported alongside: the pre-checkpoint dynamic-route census and the
reconnect counter, which must agree once traffic resumes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

from .config import ConfigSyntaxError, JobSpec
from .runtime import Runtime, RuntimeOptions, TaskSpec
from .sched import CostModel

GATE_BYTES = 32 * 1024
TAG_PING = 201
TAG_PONG = 202

PHASE_PRE = 0
PHASE_CKPT = 1
PHASE_POST = 2
PHASE_DONE = 3


@dataclass
class CommBenchConfig:
    sizes: tuple = (64, 1024, 65536)
    ranks: int = 4
    rounds: int = 4
    with_checkpoint: bool = False

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if self.ranks < 4 or self.ranks % 2:
            raise ConfigSyntaxError("comm bench needs an even rank count >= 4")
        if self.rounds < 2:
            raise ConfigSyntaxError("need at least 2 rounds per phase")


def partner_of(rank: int, size: int, n: int) -> int:
    if size <= GATE_BYTES:
        return rank ^ 1                  # adjacent pair over the ring
    return (rank + 2) % n if rank % 4 < 2 else (rank - 2) % n


def is_initiator(rank: int, size: int, n: int) -> bool:
    return rank < partner_of(rank, size, n)


def comm_app(cfg: CommBenchConfig) -> TaskSpec:
    def make_state(api):
        return {"phase": PHASE_PRE, "round": 0, "op": 0,
                "lat": {}, "census": -1, "ckpt": ""}

    def save(state):
        return json.dumps(state, sort_keys=True).encode("utf-8")

    def load(blob):
        state = json.loads(blob.decode("utf-8"))
        state["lat"] = {k: v for k, v in state["lat"].items()}
        return state

    def ping_round(api, st, label):
        n = cfg.ranks
        for size in cfg.sizes:
            peer = partner_of(api.rank, size, n)
            if is_initiator(api.rank, size, n):
                t0 = api.now
                yield from api.send(peer, TAG_PING, b"\0" * size)
                yield from api.recv(src=peer, tag=TAG_PONG)
                st["lat"][f"{size}:{label}"] = (api.now - t0) / 2
            else:
                msg = yield from api.recv(src=peer, tag=TAG_PING)
                yield from api.send(peer, TAG_PONG, msg.payload)

    def body(api, st):
        while st["phase"] != PHASE_DONE:
            api.fault_point(st["op"])
            st["op"] += 1
            if st["phase"] == PHASE_PRE:
                label = "pre" if st["round"] == cfg.rounds - 1 else "warm"
                yield from ping_round(api, st, label)
                st["round"] += 1
                if st["round"] >= cfg.rounds:
                    st["phase"], st["round"] = PHASE_CKPT, 0
            elif st["phase"] == PHASE_CKPT:
                if cfg.with_checkpoint:
                    if api.rank == 0 and st["census"] < 0:
                        # recorded once, pre-checkpoint; a restarted run must
                        # keep the census saved in its checkpoint state
                        st["census"] = api.dynamic_route_census()
                    result = yield from api.checkpoint()
                    st["ckpt"] = result.name
                st["phase"] = PHASE_POST
            else:
                label = "transient" if st["round"] == 0 else (
                    "post" if st["round"] == cfg.rounds - 1 else "warm")
                yield from ping_round(api, st, label)
                st["round"] += 1
                if st["round"] >= cfg.rounds:
                    st["phase"] = PHASE_DONE
        for key, val in st["lat"].items():
            if not key.endswith(":warm"):
                api.report(f"lat:{key}", val)
        if api.rank == 0:
            api.report("census_pre", st["census"])
            api.report("reconnects_post", api.reconnect_count())
            api.report("ckpt_state", st["ckpt"])

    return TaskSpec(body=body, make_state=make_state, save=save, load=load)


@dataclass
class CommBenchResult:
    rows: list            # dicts: size, pre, transient, post
    census_pre: int
    reconnects: int
    virtual_walltime: float
    outcome: object

    def row(self, size: int) -> dict:
        for r in self.rows:
            if r["size"] == size:
                return r
        raise KeyError(size)


def run_comm_bench(cfg: CommBenchConfig, seed: int = 0,
                   ckpt_dir: Optional[str] = None, net_option: str = "mixed",
                   cost: Optional[CostModel] = None,
                   options: Optional[RuntimeOptions] = None,
                   fault_plan=None):
    jobspec = JobSpec(n_processes=cfg.ranks, tasks_per_process=1, seed=seed,
                      cost_model=cost or CostModel(), ckpt_dir=ckpt_dir,
                      net_option=net_option)
    rt = Runtime(jobspec, options=options)
    rt.start()
    if cfg.with_checkpoint:
        from .ckpt_transparent import CheckpointCoordinator
        coord = CheckpointCoordinator(rt)
        coord.app_meta = {"bench": "comm", "cfg": _cfg_dict(cfg)}
    if fault_plan is not None:
        from . import faults
        faults.install(rt, fault_plan)
    app = comm_app(cfg)
    for rank in range(cfg.ranks):
        rt.spawn_app(rank, app)
    outcome = rt.run()
    return collect_comm(cfg, rt, outcome), rt


def resume_comm_bench(manifest_path: str,
                      options: Optional[RuntimeOptions] = None):
    from .ckpt_transparent import restore

    def spec_for(rank, meta):
        return comm_app(CommBenchConfig(**meta["cfg"]))

    rt = restore(manifest_path, spec_for, options=options)
    cfg = CommBenchConfig(**rt.coordinator.app_meta["cfg"])
    outcome = rt.run()
    return collect_comm(cfg, rt, outcome), rt


def _cfg_dict(cfg: CommBenchConfig) -> dict:
    return {"sizes": list(cfg.sizes), "ranks": cfg.ranks,
            "rounds": cfg.rounds, "with_checkpoint": cfg.with_checkpoint}


def collect_comm(cfg: CommBenchConfig, rt: Runtime, outcome) -> CommBenchResult:
    res = outcome.results
    rows = []
    for size in cfg.sizes:
        row = {"size": size, "pre": None, "transient": None, "post": None}
        for (rank, key), val in res.items():
            if key.startswith(f"lat:{size}:"):
                row[key.rsplit(":", 1)[1]] = val
        rows.append(row)
    return CommBenchResult(
        rows=rows,
        census_pre=res.get((0, "census_pre"), -1),
        reconnects=rt.reconnects,
        virtual_walltime=rt.virtual_makespan(),
        outcome=outcome,
    )
