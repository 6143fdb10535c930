"""Application-level multilevel checkpointing.

Four additive levels over explicitly protected regions:

    L1  serialize the regions to node-local storage
    L2  push a copy of the blob onto a partner node in the group
    L3  Reed-Solomon parity over the group's blobs, parity shards placed
        on the following group's nodes
    L4  flush the blob to the shared store (never lost to node failures)

Redundancy phases beyond L1 can run inline on the application task or be
handed to a per-process helper task oversubscribed onto an existing lane;
the application resumes as soon as the local write finishes. The group
leader gathers member blobs as ordinary messages (which is what prices the
gather in virtual time), encodes, and places parity files directly.

On-storage layout:

    <ckpt_dir>/<job>/l<level>/epoch-<n>/rank-<r>.blob
    <ckpt_dir>/<job>/l3/epoch-<n>/rank-<holder>.shard<i>

Every file carries a 24-byte little-endian header:

    [u32 magic 0x4D43534B][u8 level][u8 shard_idx][u16 group]
    [u32 epoch][u64 orig_len][u32 crc]
"""

from __future__ import annotations

import os
import struct
import zlib
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional

from .errors import (
    ConfigError,
    CrcMismatch,
    DuplicateId,
    HelperBacklog,
    InsufficientShards,
    StorageFull,
    Unrecoverable,
)
from .gf256 import rs_decode, rs_encode
from .sched import BlockOn, Condition, TaskState

SHARD_MAGIC = 0x4D43534B
_HEADER = struct.Struct("<IBBHIQI")
HEADER_SIZE = _HEADER.size  # 24 bytes

_PROTO_TAG = -0x46544900_00000000  # tag space reserved for replication traffic


def _proto_tag(epoch: int, member: int) -> int:
    # Unique per (epoch, member): a helper serving several ranks sends one
    # blob per rank and the leader must match them unambiguously.
    return _PROTO_TAG - (epoch << 20) - member


class CkptLevel(IntEnum):
    L1_local = 1
    L2_partner = 2
    L3_rs = 3
    L4_pfs = 4


@dataclass
class GroupConfig:
    k: int = 4
    m: int = 2
    partner_offset: int = 1

    def __post_init__(self):
        if self.k < 1 or self.m < 0 or self.k + self.m > 255:
            raise ConfigError(f"bad group config k={self.k} m={self.m}")
        if self.partner_offset % self.k == 0:
            raise ConfigError("partner_offset must not map a rank onto itself")

    def group_of(self, rank: int) -> int:
        return rank // self.k

    def members(self, group: int) -> list[int]:
        return list(range(group * self.k, (group + 1) * self.k))

    def leader(self, group: int) -> int:
        return group * self.k

    def partner(self, rank: int) -> int:
        g = self.group_of(rank)
        local = rank - g * self.k
        return g * self.k + (local + self.partner_offset) % self.k

    def parity_holder(self, group: int, j: int, n_ranks: int) -> int:
        # Parity lands on the next group's nodes so that losses inside one
        # group cost at most one shard per lost node.
        return ((group + 1) * self.k + j) % n_ranks


@dataclass
class ProtectedRegion:
    id: int
    buf: object            # anything with the buffer protocol, e.g. memoryview
    elem_size: int = 1
    count: Optional[int] = None

    def __post_init__(self):
        view = memoryview(self.buf).cast("B")
        if self.count is None:
            if len(view) % self.elem_size:
                raise ConfigError("region length not a multiple of elem_size")
            self.count = len(view) // self.elem_size
        self.length = self.elem_size * self.count
        if self.length != len(view):
            raise ConfigError(
                f"region {self.id}: length {len(view)} != "
                f"elem_size*count {self.length}")

    def read(self) -> bytes:
        return bytes(memoryview(self.buf).cast("B"))

    def write(self, data: bytes) -> None:
        view = memoryview(self.buf).cast("B")
        if len(data) != len(view):
            raise Unrecoverable(
                f"region {self.id}: stored {len(data)} bytes, need {len(view)}")
        view[:] = data


@dataclass
class EncodedShard:
    group: int
    shard_idx: int          # 0..k-1 data, k..k+m-1 parity
    epoch: int
    payload: bytes
    orig_len: int           # padded group length shared by all shards

    def encode(self) -> bytes:
        return encode_file(3, self.shard_idx, self.group, self.epoch,
                           self.payload, orig_len=self.orig_len)

    @classmethod
    def decode(cls, buf: bytes) -> "EncodedShard":
        hdr, payload = decode_file(buf)
        return cls(group=hdr["group"], shard_idx=hdr["shard_idx"],
                   epoch=hdr["epoch"], payload=payload,
                   orig_len=hdr["orig_len"])


@dataclass
class AppWorld:
    """The application's communicator: helper ranks are not members."""

    app_ranks: list[int]
    helpers: dict[int, int] = field(default_factory=dict)  # pid -> helper task id

    def assert_member(self, rank: int) -> None:
        if rank not in self.app_ranks:
            raise ConfigError(f"rank {rank} is not an application rank")

    @property
    def size(self) -> int:
        return len(self.app_ranks)


# --- region blob codec --------------------------------------------------------

_REGION_HDR = struct.Struct("<IQ")


def pack_regions(regions: dict[int, ProtectedRegion]) -> bytes:
    parts = []
    for rid in sorted(regions):
        data = regions[rid].read()
        parts.append(_REGION_HDR.pack(rid, len(data)))
        parts.append(data)
    return b"".join(parts)


def unpack_regions(blob: bytes) -> dict[int, bytes]:
    out = {}
    off = 0
    while off < len(blob):
        rid, length = _REGION_HDR.unpack_from(blob, off)
        off += _REGION_HDR.size
        out[rid] = blob[off:off + length]
        off += length
    return out


# --- storage ---------------------------------------------------------------------

def encode_file(level: int, shard_idx: int, group: int, epoch: int,
                payload: bytes, orig_len: Optional[int] = None) -> bytes:
    if orig_len is None:
        orig_len = len(payload)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    return _HEADER.pack(SHARD_MAGIC, level, shard_idx, group, epoch,
                        orig_len, crc) + payload


def decode_file(buf: bytes) -> tuple[dict, bytes]:
    if len(buf) < HEADER_SIZE:
        raise CrcMismatch("file shorter than header")
    magic, level, shard_idx, group, epoch, orig_len, crc = _HEADER.unpack_from(buf, 0)
    if magic != SHARD_MAGIC:
        raise CrcMismatch("bad shard magic")
    payload = buf[HEADER_SIZE:]
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CrcMismatch("shard checksum mismatch")
    return ({"level": level, "shard_idx": shard_idx, "group": group,
             "epoch": epoch, "orig_len": orig_len}, payload)


class MultilevelStore:
    """Filesystem backend modeling node-local disks plus a shared store.

    Residency (whose node holds a file) is derivable from the path: l1 and
    l3 files live with the rank in the name, an l2 file holds rank r's data
    on partner(r)'s node, and l4 survives every node loss.
    """

    def __init__(self, root: str, job_id: str, quota_bytes: Optional[int] = None):
        self.base = os.path.join(root, job_id)
        self.quota = quota_bytes
        self.written = 0

    def path(self, level: int, epoch: int, name: str) -> str:
        return os.path.join(self.base, f"l{level}", f"epoch-{epoch}", name)

    def write(self, level: int, epoch: int, name: str, buf: bytes) -> str:
        if self.quota is not None and self.written + len(buf) > self.quota:
            raise StorageFull(
                f"quota {self.quota} exceeded writing {name} ({len(buf)} bytes)")
        path = self.path(level, epoch, name)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, "wb") as f:
            f.write(buf)
        self.written += len(buf)
        return path

    def read(self, level: int, epoch: int, name: str) -> tuple[dict, bytes]:
        path = self.path(level, epoch, name)
        if not os.path.exists(path):
            raise FileNotFoundError(path)
        with open(path, "rb") as f:
            return decode_file(f.read())

    def exists(self, level: int, epoch: int, name: str) -> bool:
        return os.path.exists(self.path(level, epoch, name))

    def remove(self, level: int, epoch: int, name: str) -> None:
        path = self.path(level, epoch, name)
        if os.path.exists(path):
            os.remove(path)

    def epochs(self) -> list[int]:
        found = set()
        for lvl in (1, 2, 3, 4):
            d = os.path.join(self.base, f"l{lvl}")
            if not os.path.isdir(d):
                continue
            for entry in os.listdir(d):
                if entry.startswith("epoch-"):
                    found.add(int(entry.split("-")[1]))
        return sorted(found)


# --- manager -------------------------------------------------------------------------

@dataclass
class ReplicationJob:
    rank: int
    epoch: int
    level: int
    blob: bytes
    data_len: int


class Multilevel:
    """Per-runtime multilevel checkpoint engine (one instance per job)."""

    def __init__(self, rt, group: GroupConfig, helper_mode: str,
                 store: Optional[MultilevelStore] = None):
        self.rt = rt
        self.group = group
        self.helper_mode = helper_mode
        self.store = store or MultilevelStore(
            rt.jobspec.ckpt_dir, rt.job_id, rt.options.storage_quota)
        self.regions: dict[int, dict[int, ProtectedRegion]] = {}
        self.queues: dict[int, deque] = {}
        self.idle_conds: dict[int, Condition] = {}
        self.world: Optional[AppWorld] = None
        self.n_app = rt.jobspec.n_tasks
        self.completions: list[dict] = []
        rt.multilevel = self

    # -- registration ------------------------------------------------------------

    def protect(self, rank: int, region_id: int, buf, elem_size: int = 1,
                count: Optional[int] = None) -> None:
        regs = self.regions.setdefault(rank, {})
        if region_id in regs:
            raise DuplicateId(f"rank {rank}: region id {region_id} already protected")
        regs[region_id] = ProtectedRegion(region_id, buf, elem_size, count)

    # -- checkpoint -----------------------------------------------------------------

    def executor_of(self, member_rank: int) -> int:
        """Task id performing post-L1 phases for that member."""
        if self.helper_mode == "helper_task":
            return self.world.helpers[self.rt.host_of(member_rank)]
        return member_rank

    def checkpoint_app(self, api, ckpt_id: int, level: int):
        rank = api.rank
        self.world.assert_member(rank)
        level = int(level)
        regs = self.regions.get(rank, {})
        blob = pack_regions(regs)
        data_len = sum(r.length for r in regs.values())

        # Stage 1: the local checkpoint, always synchronous for the caller.
        buf = encode_file(1, rank - self.group.group_of(rank) * self.group.k,
                          self.group.group_of(rank), ckpt_id, blob)
        self.store.write(1, ckpt_id, f"rank-{rank}.blob", buf)
        yield from api.write_bytes(data_len, kind="local")
        api.trace_event(f"l1_write:{ckpt_id}")

        job = ReplicationJob(rank, ckpt_id, level, blob, data_len)
        if level <= 1:
            self.completions.append({"rank": rank, "epoch": ckpt_id,
                                     "level": level, "done_at": api.now})
            return {"epoch": ckpt_id, "level": level, "async": False,
                    "returned_at": api.now}

        if self.helper_mode == "helper_task":
            # Stage 2 runs in the background; the app continues right away.
            queue = self.queues[api.proc.pid]
            if len(queue) >= self.rt.options.helper_queue_depth:
                raise HelperBacklog(
                    f"helper queue on process {api.proc.pid} is full")
            queue.append(job)
            self.idle_conds[api.proc.pid].signal_one(api.now)
            return {"epoch": ckpt_id, "level": level, "async": True,
                    "returned_at": api.now}
        yield from self._post_phases(api, job)
        self.completions.append({"rank": rank, "epoch": ckpt_id,
                                 "level": level, "done_at": api.now})
        return {"epoch": ckpt_id, "level": level, "async": False,
                "returned_at": api.now}

    def _post_phases(self, api, job: ReplicationJob):
        """Redundancy phases beyond L1, run by the app task or a helper."""
        g = self.group
        rank, epoch = job.rank, job.epoch
        group = g.group_of(rank)

        if job.level >= 2:
            partner = g.partner(rank)
            buf = encode_file(2, rank - group * g.k, group, epoch, job.blob)
            self.store.write(2, epoch, f"rank-{rank}.blob", buf)
            yield from api.charge(self.rt.cost.net_per_byte * job.data_len)
            yield from api.write_bytes(job.data_len, kind="local")
            api.trace_event(f"l2_copy:{epoch}:to{partner}")

        if job.level >= 3:
            yield from self._rs_phase(api, job, group)

        if job.level >= 4:
            buf = encode_file(4, rank - group * g.k, group, epoch, job.blob)
            self.store.write(4, epoch, f"rank-{rank}.blob", buf)
            yield from api.write_bytes(job.data_len, kind="pfs")
            api.trace_event(f"l4_flush:{epoch}")

    def _rs_phase(self, api, job: ReplicationJob, group: int):
        """Members stream their blobs to the group leader, which encodes and
        places the parity shards."""
        g = self.group
        leader = g.leader(group)
        if job.rank != leader:
            yield from api.send(self.executor_of(leader),
                                tag=_proto_tag(job.epoch, job.rank),
                                payload=job.blob)
            return
        blobs = {leader: job.blob}
        for member in g.members(group):
            if member == leader:
                continue
            msg = yield from api.recv(src=self.executor_of(member),
                                      tag=_proto_tag(job.epoch, member))
            blobs[member] = msg.payload
        padded = max(len(b) for b in blobs.values())
        data = [blobs[m].ljust(padded, b"\0") for m in g.members(group)]
        parity = rs_encode(data, g.m)
        yield from api.write_bytes(padded * g.m, kind="encode")
        api.trace_event(f"l3_encode:{job.epoch}:g{group}")
        for j, payload in enumerate(parity):
            shard = EncodedShard(group=group, shard_idx=g.k + j,
                                 epoch=job.epoch, payload=payload,
                                 orig_len=padded)
            holder = g.parity_holder(group, j, self.n_app)
            self.store.write(3, job.epoch,
                             f"rank-{holder}.shard{shard.shard_idx}",
                             shard.encode())
            yield from api.charge(self.rt.cost.net_per_byte * padded)
            yield from api.write_bytes(padded, kind="local")

    # -- recovery ----------------------------------------------------------------------

    def recover(self, api, level: int):
        """Restore this rank's protected regions from the best surviving
        source, strongest-local first.

        Recovery targets the newest epoch present on storage, so every rank
        restores a mutually consistent state; there is no fallback to older
        epochs. A crash that lands inside the asynchronous replication
        window can therefore leave the newest epoch unrecoverable, which is
        the inherent exposure of deferring redundancy work.
        """
        rank = api.rank
        level = int(level)
        regs = self.regions.get(rank, {})
        if not regs:
            raise Unrecoverable(f"rank {rank}: no regions protected")
        epochs = self.store.epochs()
        if not epochs:
            raise Unrecoverable("no checkpoint epoch on storage")
        epoch = epochs[-1]
        data_len = sum(r.length for r in regs.values())
        blob_len = data_len + _REGION_HDR.size * len(regs)

        blob = None
        if self.store.exists(1, epoch, f"rank-{rank}.blob"):
            _, blob = self.store.read(1, epoch, f"rank-{rank}.blob")
            yield from api.write_bytes(data_len, kind="local")
            api.trace_event(f"recover_l1:{epoch}")
        elif level >= 2 and self.store.exists(2, epoch, f"rank-{rank}.blob"):
            _, blob = self.store.read(2, epoch, f"rank-{rank}.blob")
            yield from api.charge(self.rt.cost.net_per_byte * data_len)
            yield from api.write_bytes(data_len, kind="local")
            api.trace_event(f"recover_l2:{epoch}")
        elif level >= 3:
            blob = yield from self._rs_reconstruct(api, rank, epoch, blob_len)
            if blob is not None:
                api.trace_event(f"recover_l3:{epoch}")
        if blob is None and level >= 4 and self.store.exists(4, epoch, f"rank-{rank}.blob"):
            _, blob = self.store.read(4, epoch, f"rank-{rank}.blob")
            yield from api.write_bytes(data_len, kind="pfs")
            api.trace_event(f"recover_l4:{epoch}")
        if blob is None:
            raise Unrecoverable(
                f"rank {rank}: no surviving source for epoch {epoch} at level {level}")

        payloads = unpack_regions(blob[:blob_len])
        for rid, reg in regs.items():
            if rid not in payloads:
                raise Unrecoverable(f"rank {rank}: region {rid} missing from blob")
            reg.write(payloads[rid])
        return epoch

    def _rs_reconstruct(self, api, rank: int, epoch: int, blob_len: int):
        """Decode this rank's blob from surviving member blobs plus parity.

        Only L1 blobs count as data shards here; partner copies belong to
        the L2 level and keep the erasure-tolerance boundary exact.
        """
        g = self.group
        group = g.group_of(rank)
        members = g.members(group)
        shards: dict[int, bytes] = {}
        padded = None
        for j in range(g.m):
            holder = g.parity_holder(group, j, self.n_app)
            name = f"rank-{holder}.shard{g.k + j}"
            if self.store.exists(3, epoch, name):
                hdr, payload = self.store.read(3, epoch, name)
                shards[g.k + j] = payload
                padded = hdr["orig_len"]
        if padded is None:
            return None  # no parity survived; nothing to decode with
        for i, member in enumerate(members):
            if self.store.exists(1, epoch, f"rank-{member}.blob"):
                _, payload = self.store.read(1, epoch, f"rank-{member}.blob")
                shards[i] = payload.ljust(padded, b"\0")
        if len(shards) < g.k:
            return None
        # Gathering remote shards and inverting the matrix both cost time.
        yield from api.charge(self.rt.cost.net_per_byte * padded * (g.k - 1))
        yield from api.write_bytes(padded * g.k, kind="encode")
        try:
            originals = rs_decode(shards, g.k, g.m)
        except InsufficientShards:
            return None
        return originals[rank - group * g.k][:blob_len]

    # -- faults ---------------------------------------------------------------------

    def mark_lost(self, pids) -> None:
        """Node loss: every file resident on a victim disappears. The shared
        store (l4) survives by construction."""
        victims = set(pids)

        def rank_on_victim(r: int) -> bool:
            return self.rt.host_of(r) in victims

        for epoch in self.store.epochs():
            for rank in range(self.n_app):
                if rank_on_victim(rank):
                    self.store.remove(1, epoch, f"rank-{rank}.blob")
                if rank_on_victim(self.group.partner(rank)):
                    self.store.remove(2, epoch, f"rank-{rank}.blob")
            n_groups = max(1, self.n_app // self.group.k)
            for group in range(n_groups):
                for j in range(self.group.m):
                    holder = self.group.parity_holder(group, j, self.n_app)
                    if rank_on_victim(holder):
                        self.store.remove(3, epoch,
                                          f"rank-{holder}.shard{self.group.k + j}")


def fti_init(rt, group: Optional[GroupConfig] = None,
             helper_mode: str = "helper_task",
             quota_bytes: Optional[int] = None) -> AppWorld:
    """Initialize multilevel checkpointing for a running job.

    helper_task mode steals no core: one helper task per process is
    oversubscribed onto lane 0 next to the application ranks. The returned
    AppWorld spans application ranks only.
    """
    if helper_mode not in ("inline", "helper_task"):
        raise ConfigError(f"unknown helper mode {helper_mode!r}")
    group = group or GroupConfig()
    n_app = rt.jobspec.n_tasks
    if n_app < group.k or n_app % group.k:
        raise ConfigError(
            f"{n_app} app ranks cannot form groups of k={group.k}")
    if group.m and group.k + group.m > n_app:
        raise ConfigError(
            f"k+m={group.k + group.m} exceeds the {n_app} ranks available per group")
    ml = Multilevel(rt, group, helper_mode)
    if quota_bytes is not None:
        ml.store.quota = quota_bytes
    world = AppWorld(app_ranks=list(range(n_app)))
    ml.world = world
    if helper_mode == "helper_task":
        for proc in rt.procs:
            helper_id = n_app + proc.pid
            ml.queues[proc.pid] = deque()
            ml.idle_conds[proc.pid] = Condition(proc.sched, "idle", idle_ok=True)
            rt.spawn_helper(helper_id, proc.pid, _helper_body(ml, proc.pid))
            world.helpers[proc.pid] = helper_id
    return world


def _helper_body(ml: Multilevel, pid: int):
    def body(api, state):
        queue = ml.queues[pid]
        while True:
            while not queue:
                yield BlockOn(ml.idle_conds[pid], state=TaskState.BLOCKED_IO)
            job = queue.popleft()
            api.trace_event(f"helper_job_start:{job.epoch}")
            yield from ml._post_phases(api, job)
            ml.completions.append({"rank": job.rank, "epoch": job.epoch,
                                   "level": job.level, "done_at": api.now})
            api.trace_event(f"helper_job_done:{job.epoch}")

    return body
