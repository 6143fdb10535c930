"""Heat-dissipation stencil benchmark.

A 2D grid of 64-bit reals, initialized with a hot top row (100.0) and cold
everywhere else, relaxed by a 5-point Jacobi update with fixed boundary
values. Rows are distributed across ranks in contiguous blocks; each step
exchanges ghost rows with rank neighbors and chain-reduces the residual
(max absolute cell delta) to rank 0 in rank order. The final grid digest is
a sha256 over the raw little-endian grid bytes gathered in rank order, so
equality claims are bit-exact, never epsilon-based.

Checkpoint integration happens at the step-loop head: transparent mode
calls the collective there, application-level modes protect the block and
step counter and write through the multilevel engine.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .config import ConfigSyntaxError, JobSpec
from .runtime import Runtime, RuntimeOptions, TaskSpec
from .sched import CostModel

TAG_UP = 101      # row sent to the lower-ranked neighbor
TAG_DOWN = 102    # row sent to the higher-ranked neighbor
TAG_RESID = 103
TAG_GATHER = 104

CKPT_MODES = ("none", "transparent", "l1", "l2", "l3", "l4")


@dataclass
class HeatdisConfig:
    rows: int = 64
    cols: int = 64
    iterations: int = 100
    ranks: int = 4
    ckpt_every: int = 0
    ckpt_mode: str = "none"

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigSyntaxError("iterations must be >= 1")
        if self.rows % self.ranks:
            raise ConfigSyntaxError(
                f"rows {self.rows} not divisible by ranks {self.ranks}")
        if self.ckpt_mode not in CKPT_MODES:
            raise ConfigSyntaxError(f"unknown ckpt_mode {self.ckpt_mode!r}")
        if self.ckpt_mode != "none" and self.ckpt_every < 1:
            raise ConfigSyntaxError("checkpointing requires ckpt_every >= 1")

    @property
    def block_rows(self) -> int:
        return self.rows // self.ranks

    @property
    def level(self) -> int:
        return int(self.ckpt_mode[1]) if self.ckpt_mode.startswith("l") else 0


def init_block(cfg: HeatdisConfig, rank: int) -> np.ndarray:
    block = np.zeros((cfg.block_rows, cfg.cols), dtype="<f8")
    if rank == 0:
        block[0, :] = 100.0
    return block


def jacobi_block(block: np.ndarray, top: np.ndarray, bottom: np.ndarray,
                 first_row: int, total_rows: int) -> np.ndarray:
    """One Jacobi sweep over an owned row block with ghost rows supplied.

    The same expression runs for every decomposition, so digests agree
    bit-for-bit between rank counts.
    """
    rows, cols = block.shape
    ext = np.empty((rows + 2, cols), dtype=block.dtype)
    ext[0] = top
    ext[1:-1] = block
    ext[-1] = bottom
    new = block.copy()
    new[:, 1:-1] = 0.25 * (ext[:-2, 1:-1] + ext[2:, 1:-1]
                           + ext[1:-1, :-2] + ext[1:-1, 2:])
    # Fixed boundaries: hot top row, cold bottom row; side columns are
    # never touched above.
    if first_row == 0:
        new[0, :] = block[0, :]
    if first_row + rows == total_rows:
        new[-1, :] = block[-1, :]
    new[:, 0] = block[:, 0]
    new[:, -1] = block[:, -1]
    return new


def reference_step(grid: np.ndarray) -> np.ndarray:
    """Whole-grid sweep used as the single-rank path and by tests."""
    return jacobi_block(grid, np.zeros(grid.shape[1]), np.zeros(grid.shape[1]),
                        0, grid.shape[0])


_STATE_HDR = struct.Struct("<QIIdd")


def _save_state(state) -> bytes:
    block = state["block"]
    return _STATE_HDR.pack(int(state["step"][0]), block.shape[0], block.shape[1],
                           state["residual"][0], 0.0) + block.tobytes()


def _load_state(blob: bytes):
    step, rows, cols, residual, _ = _STATE_HDR.unpack_from(blob, 0)
    block = np.frombuffer(blob[_STATE_HDR.size:], dtype="<f8").reshape(rows, cols).copy()
    return {"step": np.array([step], dtype="<i8"),
            "residual": np.array([residual], dtype="<f8"),
            "block": block}


def heatdis_app(cfg: HeatdisConfig, recover_level: Optional[int] = None) -> TaskSpec:
    """Task spec shared by every rank; state is rank-specific via make_state."""

    def make_state(api):
        return {"step": np.zeros(1, dtype="<i8"),
                "residual": np.zeros(1, dtype="<f8"),
                "block": init_block(cfg, api.rank)}

    def body(api, st):
        rank = api.rank
        n = cfg.ranks
        block = st["block"]
        app_level = cfg.ckpt_mode.startswith("l") or recover_level
        if app_level:
            api.protect(0, st["step"], elem_size=8)
            api.protect(1, block, elem_size=8)
        if recover_level:
            yield from api.recover(recover_level)
            block = st["block"]  # recovered in place

        zeros = np.zeros(cfg.cols, dtype="<f8")
        while int(st["step"][0]) < cfg.iterations:
            step = int(st["step"][0])
            api.fault_point(step)
            if cfg.ckpt_every and step > 0 and step % cfg.ckpt_every == 0:
                if cfg.ckpt_mode == "transparent":
                    result = yield from api.checkpoint()
                    api.report(f"ckpt@{step}", result.name)
                elif cfg.ckpt_mode.startswith("l"):
                    yield from api.checkpoint_app(step, cfg.level)

            # Ghost row exchange with rank neighbors; sends are eager so the
            # symmetric exchange cannot deadlock.
            if rank > 0:
                yield from api.send(rank - 1, TAG_UP, block[0].tobytes())
            if rank < n - 1:
                yield from api.send(rank + 1, TAG_DOWN, block[-1].tobytes())
            top = zeros
            bottom = zeros
            if rank > 0:
                msg = yield from api.recv(src=rank - 1, tag=TAG_DOWN)
                top = np.frombuffer(msg.payload, dtype="<f8")
            if rank < n - 1:
                msg = yield from api.recv(src=rank + 1, tag=TAG_UP)
                bottom = np.frombuffer(msg.payload, dtype="<f8")

            new = jacobi_block(block, top, bottom,
                               rank * cfg.block_rows, cfg.rows)
            residual = float(np.abs(new - block).max())
            block[:, :] = new
            yield from api.compute(block.size)

            # Chain reduce of the residual to rank 0, in rank order.
            if rank < n - 1:
                msg = yield from api.recv(src=rank + 1, tag=TAG_RESID)
                residual = max(residual, struct.unpack("<d", msg.payload)[0])
            if rank > 0:
                yield from api.send(rank - 1, TAG_RESID, struct.pack("<d", residual))
            st["residual"][0] = residual
            st["step"][0] = step + 1

        # Chain gather of raw blocks to rank 0 for the digest.
        gathered = block.tobytes()
        if rank < n - 1:
            msg = yield from api.recv(src=rank + 1, tag=TAG_GATHER)
            gathered = gathered + msg.payload
        if rank > 0:
            yield from api.send(rank - 1, TAG_GATHER, gathered)
        else:
            api.report("digest", hashlib.sha256(gathered).hexdigest())
            api.report("residual", float(st["residual"][0]))
            api.report("grid", gathered)

    return TaskSpec(body=body, make_state=make_state,
                    save=_save_state, load=_load_state)


@dataclass
class HeatdisResult:
    residual: float
    digest: str
    virtual_walltime: float
    counters: dict
    outcome: object
    grid_bytes: bytes = b""

    def grid(self, cfg: HeatdisConfig) -> np.ndarray:
        return np.frombuffer(self.grid_bytes, dtype="<f8").reshape(
            cfg.rows, cfg.cols)


def run_heatdis(cfg: HeatdisConfig, seed: int = 0, ckpt_dir: Optional[str] = None,
                net_option: str = "fti_mix", cost: Optional[CostModel] = None,
                options: Optional[RuntimeOptions] = None,
                fault_plan=None, recover_level: Optional[int] = None,
                helper_mode: str = "inline", tasks_per_process: int = 1,
                group=None, runtime: Optional[Runtime] = None):
    """Build a job for the stencil, run it, and collect the result."""
    if cfg.ranks % tasks_per_process:
        raise ConfigSyntaxError("ranks must divide evenly into processes")
    jobspec = JobSpec(n_processes=cfg.ranks // tasks_per_process,
                      tasks_per_process=tasks_per_process,
                      lanes_per_process=1, seed=seed,
                      cost_model=cost or CostModel(),
                      ckpt_dir=ckpt_dir, net_option=net_option)
    rt = runtime or Runtime(jobspec, options=options)
    rt.start()
    if cfg.ckpt_mode.startswith("l") or recover_level:
        from .ckpt_multilevel import GroupConfig, fti_init
        fti_init(rt, group or GroupConfig(min(4, cfg.ranks), 2 if cfg.ranks > 4 else 0),
                 helper_mode)
    if cfg.ckpt_mode == "transparent":
        from .ckpt_transparent import CheckpointCoordinator
        coord = CheckpointCoordinator(rt)
        coord.app_meta = {"bench": "heatdis", "cfg": cfg.__dict__}
    if fault_plan is not None:
        from . import faults
        faults.install(rt, fault_plan, cfg.iterations)
    app = heatdis_app(cfg, recover_level)
    for rank in range(cfg.ranks):
        rt.spawn_app(rank, app)
    outcome = rt.run()
    return _collect(cfg, rt, outcome), rt


def resume_heatdis(manifest_path: str, options: Optional[RuntimeOptions] = None):
    """Restart a transparently checkpointed stencil run from its manifest."""
    from .ckpt_transparent import restore

    def spec_for(rank, meta):
        return heatdis_app(HeatdisConfig(**meta["cfg"]))

    rt = restore(manifest_path, spec_for, options=options)
    cfg = HeatdisConfig(**rt.coordinator.app_meta["cfg"])
    outcome = rt.run()
    return _collect(cfg, rt, outcome), rt


def _collect(cfg: HeatdisConfig, rt: Runtime, outcome) -> HeatdisResult:
    results = outcome.results
    counters = {
        "sent": sum(sum(p.sent_counts.values()) for p in rt.procs),
        "consumed": sum(sum(p.consumed_counts.values()) for p in rt.procs),
        "reconnects": rt.reconnects,
        "status": outcome.status,
    }
    if rt.coordinator is not None:
        counters["ckpt_sections"] = len(rt.coordinator.sections)
        counters["ckpt_ticks"] = sum(b - a for a, b in rt.coordinator.sections)
    return HeatdisResult(
        residual=results.get((0, "residual"), float("nan")),
        digest=results.get((0, "digest"), ""),
        virtual_walltime=rt.virtual_makespan(),
        counters=counters,
        outcome=outcome,
        grid_bytes=results.get((0, "grid"), b""),
    )
