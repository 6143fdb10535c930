"""Transparent collective checkpoint/restart.

The collective runs in two levels: a counting barrier inside each process
elects a master task, then the masters synchronize across processes with
barrier tokens chained over the signaling network (gather to rank 0,
release outward). Rank 0 verifies quiescence from the gathered send/consume
counters before anything is closed or written. Each master then closes the
non-checkpointable rails, writes exactly one binary process image, lazily
reopens rails (re-bootstrapping ring static routes through the KVS when the
ring itself had to close), and rank 0 seals the epoch with a manifest.

A job restored from a manifest re-enters the application at the saved
checkpoint boundary and the first collective call returns RESTART. Process
images of generator-based tasks cannot be re-entered mid-frame the way a
memory dump can, so the runtime re-creates each task from its registered
state blob and hands it the RESTART status at that same call site.

Image layout (little-endian), CRC-32 (polynomial 0xEDB88320, reflected)
over everything before the trailing checksum:

    "MCRIMG01" | u32 version | u64 epoch | u64 process | u32 n_tasks
    { u64 task_id | u8 kind | u32 lane | u32 blob_len | blob } * n_tasks
    u32 n_endpoints
    { u16 rail_len | rail | u64 remote | u8 static } * n_endpoints
    u32 crc
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import struct
import time
import zlib
from dataclasses import dataclass
from enum import Enum
from typing import Optional

from .config import JobSpec
from .errors import (
    ConfigMismatch,
    CrcMismatch,
    DomainError,
    McrError,
    MissingImage,
)
from .multirail import Endpoint
from .runtime import Runtime, RuntimeOptions, TaskApi
from .sched import IoWrite, TaskKind

IMAGE_MAGIC = b"MCRIMG01"
IMAGE_VERSION = 1

_IMG_HEAD = struct.Struct("<IQQI")      # version, epoch, pid, n_tasks
_IMG_TASK = struct.Struct("<QBII")      # task_id, kind, lane, blob_len
_IMG_EP = struct.Struct("<H")           # rail name length


class CkptState(Enum):
    ERROR = 0
    CHECKPOINT = 1
    RESTART = 2
    IGNORE = 3


# --- budget algebra ----------------------------------------------------------

@dataclass
class BudgetParams:
    """Checkpoint budget bookkeeping: D = Ts * (1 + f * Tc), f = 1/tau."""

    Ts: float
    Tc: float
    tau: float

    def __post_init__(self):
        if self.Ts <= 0 or self.Tc < 0 or self.tau <= 0:
            raise DomainError("budget parameters must be positive")

    @property
    def f(self) -> float:
        return 1.0 / self.tau

    @property
    def D(self) -> float:
        return self.Ts + (self.Ts / self.tau) * self.Tc

    @property
    def Ovh(self) -> float:
        return 1.0 + self.Tc / self.tau


def checkpoint_period(Tc: float, budget: float) -> float:
    """Period tau yielding the requested overhead fraction: tau = Tc / budget."""
    if Tc <= 0 or budget <= 0:
        raise DomainError("Tc and budget must be > 0")
    return Tc / budget


def overhead(Ts: float, Tc: float, tau: float) -> tuple[float, float]:
    """Total duration and overhead ratio for a checkpointed run."""
    if Ts <= 0 or Tc < 0 or tau <= 0:
        raise DomainError("Ts and tau must be > 0, Tc >= 0")
    p = BudgetParams(Ts, Tc, tau)
    return p.D, p.Ovh


# --- process image codec -------------------------------------------------------

def encode_image(epoch: int, pid: int, tasks: list[tuple[int, int, int, bytes]],
                 endpoints: list[tuple[str, int, bool]]) -> bytes:
    parts = [IMAGE_MAGIC, _IMG_HEAD.pack(IMAGE_VERSION, epoch, pid, len(tasks))]
    for task_id, kind, lane, blob in tasks:
        parts.append(_IMG_TASK.pack(task_id, kind, lane, len(blob)))
        parts.append(blob)
    parts.append(struct.pack("<I", len(endpoints)))
    for rail, remote, static in endpoints:
        rail_b = rail.encode("utf-8")
        parts.append(_IMG_EP.pack(len(rail_b)))
        parts.append(rail_b)
        parts.append(struct.pack("<QB", remote, 1 if static else 0))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_image(buf: bytes) -> dict:
    if len(buf) < len(IMAGE_MAGIC) + _IMG_HEAD.size + 4:
        raise CrcMismatch("image truncated")
    body, crc_bytes = buf[:-4], buf[-4:]
    (crc,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CrcMismatch("image checksum mismatch")
    if body[:len(IMAGE_MAGIC)] != IMAGE_MAGIC:
        raise CrcMismatch("bad image magic")
    off = len(IMAGE_MAGIC)
    version, epoch, pid, n_tasks = _IMG_HEAD.unpack_from(body, off)
    off += _IMG_HEAD.size
    tasks = []
    for _ in range(n_tasks):
        task_id, kind, lane, blob_len = _IMG_TASK.unpack_from(body, off)
        off += _IMG_TASK.size
        tasks.append((task_id, kind, lane, body[off:off + blob_len]))
        off += blob_len
    (n_eps,) = struct.unpack_from("<I", body, off)
    off += 4
    endpoints = []
    for _ in range(n_eps):
        (rail_len,) = _IMG_EP.unpack_from(body, off)
        off += _IMG_EP.size
        rail = body[off:off + rail_len].decode("utf-8")
        off += rail_len
        remote, static = struct.unpack_from("<QB", body, off)
        off += 9
        endpoints.append((rail, remote, bool(static)))
    return {"version": version, "epoch": epoch, "pid": pid,
            "tasks": tasks, "endpoints": endpoints}


# --- manifest / snapshot ----------------------------------------------------------

def config_digest(config_text: str, jobspec: JobSpec) -> str:
    blob = json.dumps({
        "config": config_text,
        "n_processes": jobspec.n_processes,
        "tasks_per_process": jobspec.tasks_per_process,
        "lanes_per_process": jobspec.lanes_per_process,
        "net_option": jobspec.net_option,
    }, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def job_dir(ckpt_dir: str, job_id: str) -> str:
    return os.path.join(ckpt_dir, job_id)


def epoch_dir(ckpt_dir: str, job_id: str, epoch: int) -> str:
    return os.path.join(job_dir(ckpt_dir, job_id), f"epoch-{epoch}")


def write_snapshot(rt: Runtime, app_meta: dict) -> None:
    """Persist everything a restart needs to rebuild the job shell."""
    jd = job_dir(rt.jobspec.ckpt_dir, rt.job_id)
    os.makedirs(jd, exist_ok=True)
    snap = {
        "config_text": rt.config_text,
        "jobspec": {
            "n_processes": rt.jobspec.n_processes,
            "tasks_per_process": rt.jobspec.tasks_per_process,
            "lanes_per_process": rt.jobspec.lanes_per_process,
            "seed": rt.jobspec.seed,
            "net_option": rt.jobspec.net_option,
            "ckpt_dir": rt.jobspec.ckpt_dir,
        },
        "cost_model": rt.cost.__dict__,
        "app": app_meta,
    }
    with open(os.path.join(jd, "config.snapshot"), "w", encoding="utf-8") as f:
        json.dump(snap, f, sort_keys=True, indent=1)


def read_snapshot(manifest_path: str) -> dict:
    path = os.path.join(os.path.dirname(os.path.dirname(manifest_path)),
                        "config.snapshot")
    if not os.path.exists(path):
        raise ConfigMismatch(f"missing config snapshot next to {manifest_path}")
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def write_manifest(path: str, job_id: str, epoch: int, n_processes: int,
                   config_sha: str, images: list[str], virtual_ts: float) -> None:
    lines = [
        f"job_id={job_id}",
        f"epoch={epoch}",
        f"n_processes={n_processes}",
        f"config_sha256={config_sha}",
        f"virtual_ts={virtual_ts:g}",
        f"wall_ts={time.time():.3f}",
    ]
    for name in images:
        lines.append(f"image={name}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def read_manifest(path: str) -> dict:
    if not os.path.exists(path):
        raise MissingImage(f"manifest {path} not found")
    meta = {"images": []}
    with open(path, encoding="utf-8") as f:
        for line in f:
            key, _, val = line.strip().partition("=")
            if key == "image":
                meta["images"].append(val)
            elif key:
                meta[key] = val
    for req in ("job_id", "epoch", "n_processes", "config_sha256"):
        if req not in meta:
            raise ConfigMismatch(f"manifest missing {req}")
    return meta


# --- the collective ------------------------------------------------------------------

class CheckpointCoordinator:
    """Per-runtime implementation of the collective checkpoint call."""

    def __init__(self, rt: Runtime):
        self.rt = rt
        rt.coordinator = self
        self.seq = 0
        self.app_meta: dict = {}
        self.last_epoch: Optional[int] = None
        self.sections: list[tuple[float, float]] = []   # rank0 master in-collective spans
        self._wave_inv: dict[int, int] = {}
        self._wave_entered: dict[int, int] = {}

    # Entry point, called from TaskApi.checkpoint in every task.
    def collective(self, api: TaskApi):
        rt = self.rt
        task = api.task
        if api.rank in rt.pending_restart:
            rt.pending_restart.discard(api.rank)
            api.trace_event("ckpt_exit:RESTART")
            return CkptState.RESTART
        if not rt.options.ckpt_enabled or not rt.jobspec.ckpt_dir:
            api.trace_event("ckpt_exit:IGNORE")
            return CkptState.IGNORE

        proc = api.proc
        api.trace_event("ckpt_enter")
        invocation = self._enter_wave(proc)
        master = yield from api.intra_barrier(("ckpt", invocation))
        if task.id != master:
            state = yield from self._await_result(api, invocation)
        else:
            state = yield from self._master(api, invocation)
            proc.ckpt_results[invocation] = state
            cond = proc.ckpt_result_conds.pop(invocation, None)
            if cond is not None:
                cond.signal_all(task.lane.now, state)
        api.trace_event(f"ckpt_exit:{state.name}")
        return state

    def _enter_wave(self, proc) -> int:
        # Arrival counting per process: once every live task has entered the
        # current wave, the next entry starts a new one. The intra barrier
        # keeps fast tasks from racing a wave ahead.
        pid = proc.pid
        inv = self._wave_inv.setdefault(pid, 0)
        entered = self._wave_entered.get(pid, 0) + 1
        if entered >= len(proc.alive_tasks()):
            self._wave_inv[pid] = inv + 1
            self._wave_entered[pid] = 0
        else:
            self._wave_entered[pid] = entered
        return inv

    def _await_result(self, api: TaskApi, invocation: int):
        proc = api.proc
        if invocation in proc.ckpt_results:
            return proc.ckpt_results[invocation]
        from .sched import BlockOn, Condition, TaskState
        cond = proc.ckpt_result_conds.get(invocation)
        if cond is None:
            cond = Condition(proc.sched, f"ckpt_result:{invocation}")
            proc.ckpt_result_conds[invocation] = cond
        state = yield BlockOn(cond, state=TaskState.BLOCKED_RECV)
        return state

    # Master-task protocol: chain barriers over the signaling network.
    def _master(self, api: TaskApi, invocation: int):
        rt = self.rt
        pid = api.proc.pid
        n = rt.n
        started_at = api.now

        # Phase 1: gather (sent, consumed) counters toward rank 0.
        counters = {"sent": dict(api.proc.sent_counts),
                    "recv": dict(api.proc.consumed_counts)}
        if pid < n - 1:
            upstream = yield from api.barrier_recv("gather", invocation)
            counters = _merge_counters(upstream, counters)
        if pid > 0:
            api.barrier_send(pid - 1, "gather", invocation, counters)

        # Phase 2: release with the quiescence verdict and epoch number.
        if pid == 0:
            quiesced = _quiescent(counters)
            epoch = self._next_epoch() if quiesced else -1
            release = {"ok": quiesced, "epoch": epoch}
        else:
            release = yield from api.barrier_recv("release", invocation)
        if pid < n - 1:
            api.barrier_send(pid + 1, "release", invocation, release)
        if not release["ok"]:
            api.trace_event("quiesce_fail")
            return CkptState.ERROR
        epoch = release["epoch"]
        api.trace_event("quiesce_ok")

        # Phase 3: close every non-checkpointable rail, then write the image.
        closed_ring = False
        for name, st in api.proc.rails.items():
            if st.open and not st.spec.checkpointable:
                api.proc.close_rail_local(name)
                if st.spec.topology == "ring":
                    closed_ring = True
        ok, image_name = yield from self._write_image(api, epoch)

        # Phase 4: reopen lazily. A closed ring rail must get its static
        # routes back through a fresh KVS exchange before the job resumes.
        for name, st in api.proc.rails.items():
            if not st.open:
                st.allocate()
        if closed_ring:
            yield from self._rewire_ring(api, epoch)

        # Phase 5: confirm every image landed, then seal or roll back.
        status = {"ok": ok, "images": [image_name] if ok else []}
        if pid < n - 1:
            upstream = yield from api.barrier_recv("status", invocation)
            status = {"ok": status["ok"] and upstream["ok"],
                      "images": status["images"] + upstream["images"]}
        if pid > 0:
            api.barrier_send(pid - 1, "status", invocation, status)
            final = yield from api.barrier_recv("final", invocation)
        else:
            if status["ok"]:
                yield from self._write_manifest(api, epoch, status["images"])
                self._retire_old_epochs(epoch)
                final = {"state": CkptState.CHECKPOINT.value}
            else:
                final = {"state": CkptState.ERROR.value}
        if pid < n - 1:
            api.barrier_send(pid + 1, "final", invocation, final)
        state = CkptState(final["state"])
        if state is CkptState.ERROR:
            self._discard_partial(api, epoch)
        if pid == 0:
            self.sections.append((started_at, api.now))
            self.last_epoch = epoch if state is CkptState.CHECKPOINT else self.last_epoch
        return state

    def _next_epoch(self) -> int:
        self.seq += 1
        return self.seq

    def _write_image(self, api: TaskApi, epoch: int):
        rt = self.rt
        proc = api.proc
        tasks = []
        for rank in sorted(t.id for t in proc.sched.tasks.values()):
            spec = rt.task_specs.get(rank)
            if spec is None or spec.save is None:
                raise McrError(
                    f"task {rank} has no state codec; transparent checkpoint "
                    "requires save/load registered at spawn")
            blob = spec.save(rt.task_states[rank])
            task = proc.sched.tasks[rank]
            kind = 0 if task.kind is TaskKind.APP else 1
            tasks.append((rank, kind, task.lane.id, blob))
        endpoints = [(ep.rail, ep.remote, ep.static)
                     for ep in proc.table.all_endpoints()
                     if rt.net.rail(ep.rail).checkpointable]
        image = encode_image(epoch, proc.pid, tasks, endpoints)
        ed = epoch_dir(rt.jobspec.ckpt_dir, rt.job_id, epoch)
        os.makedirs(ed, exist_ok=True)
        name = f"rank-{proc.pid}.img"
        ok = True
        if proc.pid in rt.fail_image_write:
            ok = False
        else:
            with open(os.path.join(ed, name), "wb") as f:
                f.write(image)
        yield IoWrite(len(image) * rt.cost.local_write_per_byte, label="image")
        api.trace_event(f"image_write:{epoch}:{'ok' if ok else 'fail'}")
        return ok, name

    def _write_manifest(self, api: TaskApi, epoch: int, images: list[str]):
        rt = self.rt
        ed = epoch_dir(rt.jobspec.ckpt_dir, rt.job_id, epoch)
        sha = config_digest(rt.config_text, rt.jobspec)
        write_manifest(os.path.join(ed, "manifest.txt"), rt.job_id, epoch,
                       rt.n, sha, sorted(images), api.now)
        write_snapshot(rt, self.app_meta)
        yield IoWrite(256 * rt.cost.local_write_per_byte, label="manifest")
        api.trace_event(f"manifest_write:{epoch}")

    def _retire_old_epochs(self, epoch: int) -> None:
        # Keep the two most recent epochs so a failed write never destroys
        # the only good checkpoint.
        jd = job_dir(self.rt.jobspec.ckpt_dir, self.rt.job_id)
        for entry in sorted(os.listdir(jd)):
            if not entry.startswith("epoch-"):
                continue
            n = int(entry.split("-")[1])
            if n <= epoch - 2:
                shutil.rmtree(os.path.join(jd, entry), ignore_errors=True)

    def _discard_partial(self, api: TaskApi, epoch: int) -> None:
        ed = epoch_dir(self.rt.jobspec.ckpt_dir, self.rt.job_id, epoch)
        path = os.path.join(ed, f"rank-{api.proc.pid}.img")
        if os.path.exists(path):
            os.remove(path)

    def _rewire_ring(self, api: TaskApi, epoch: int):
        rt = self.rt
        proc = api.proc
        tag = f"ck{epoch}"
        for name, st in proc.rails.items():
            if st.spec.topology == "ring":
                rt.kvs.put(f"rail.{name}.{tag}.rank.{proc.pid}", st.conn_string())
        yield from api.kvs_fence()
        for name, st in proc.rails.items():
            if st.spec.topology != "ring":
                continue
            if proc.pid > 0:
                rt._wire_edge(st.spec, proc.pid - 1, proc.pid, tag)
            if proc.pid < rt.n - 1:
                rt._wire_edge(st.spec, proc.pid, proc.pid + 1, tag)


def _merge_counters(a: dict, b: dict) -> dict:
    out = {"sent": dict(a["sent"]), "recv": dict(a["recv"])}
    for field in ("sent", "recv"):
        for key, val in b[field].items():
            out[field][key] = out[field].get(key, 0) + val
    return out


def _quiescent(counters: dict) -> bool:
    keys = set(counters["sent"]) | set(counters["recv"])
    return all(counters["sent"].get(k, 0) == counters["recv"].get(k, 0)
               for k in keys)


# --- restore ---------------------------------------------------------------------------

def restore(manifest_path: str, task_spec_for: callable,
            options: Optional[RuntimeOptions] = None) -> Runtime:
    """Rebuild a runtime from a manifest; its tasks resume at the checkpoint
    boundary and observe RESTART from the collective call.

    ``task_spec_for(rank, app_meta)`` supplies the TaskSpec for each rank,
    mirroring what the original run registered at spawn.
    """
    meta = read_manifest(manifest_path)
    snap = read_snapshot(manifest_path)
    sj = snap["jobspec"]
    from .sched import CostModel
    jobspec = JobSpec(n_processes=int(sj["n_processes"]),
                      tasks_per_process=int(sj["tasks_per_process"]),
                      lanes_per_process=int(sj["lanes_per_process"]),
                      seed=int(sj["seed"]),
                      cost_model=CostModel(**snap["cost_model"]),
                      ckpt_dir=sj["ckpt_dir"],
                      net_option=sj["net_option"])
    sha = config_digest(snap["config_text"], jobspec)
    if sha != meta["config_sha256"]:
        raise ConfigMismatch("config hash differs from checkpoint")
    if int(meta["n_processes"]) != jobspec.n_processes:
        raise ConfigMismatch(
            f"manifest lists {meta['n_processes']} processes, "
            f"config says {jobspec.n_processes}")
    if len(meta["images"]) != jobspec.n_processes:
        raise ConfigMismatch("manifest image list does not cover every process")

    images = []
    base = os.path.dirname(manifest_path)
    for name in meta["images"]:
        path = os.path.join(base, name)
        if not os.path.exists(path):
            raise MissingImage(path)
        with open(path, "rb") as f:
            images.append(decode_image(f.read()))
    images.sort(key=lambda im: im["pid"])

    rt = Runtime(jobspec, config_text=snap["config_text"], options=options)
    rt.job_id = meta["job_id"]
    rt.start()
    coord = CheckpointCoordinator(rt)
    coord.seq = int(meta["epoch"])
    coord.app_meta = snap.get("app", {})

    # Respawn every task from its saved blob; the pending RESTART flag makes
    # the first collective call return RESTART at the same call site.
    for image in images:
        for task_id, kind, lane, blob in image["tasks"]:
            spec = task_spec_for(task_id, coord.app_meta)
            if spec.load is None:
                raise McrError(f"task {task_id} has no load codec")
            state = spec.load(blob)
            rt.spawn_app(task_id, spec, state=state, restarted=True, lane=lane)

    # Checkpointable dynamic routes come back from the images; static ring
    # edges were already re-bootstrapped through the KVS by start().
    pairs = set()
    for image in images:
        for rail, remote, static in image["endpoints"]:
            if static:
                continue
            pairs.add((rail, min(image["pid"], remote), max(image["pid"], remote)))
    for rail, p, q in sorted(pairs):
        spec = rt.net.rail(rail)
        a, b = rt.procs[p], rt.procs[q]
        rt._driver_connect(a, b, spec, b.rail_state(rail).conn_string())
        a.table.insert(Endpoint(rail, q), spec.priority)
        b.table.insert(Endpoint(rail, p), spec.priority)
    rt.reconnects = 0
    return rt
