"""Signaling network: greedy 1D-distance routing of control messages over
whatever routes currently exist.

The bootstrap wires static routes between rank-adjacent processes, so a
path that strictly reduces ``abs(current - target)`` always exists and
greedy forwarding terminates in at most ``abs(origin - target)`` hops.
Shortcut endpoints created on demand can only shorten that.

Control payload encoding (little-endian), carried inside frame_type=1
rail frames:

    [u8 kind][u64 origin][u64 target][u32 hops][u32 ttl][u32 len][bytes]
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

from .errors import NoProgress

_CTRL = struct.Struct("<BQQIII")


class ControlKind(IntEnum):
    CONN_REQUEST = 0
    CONN_ACK = 1
    BARRIER_TOKEN = 2
    PROBE = 3


@dataclass
class ControlMessage:
    kind: ControlKind
    origin: int
    target: int
    hops: int
    ttl: int
    payload: bytes

    def encode(self) -> bytes:
        return _CTRL.pack(int(self.kind), self.origin, self.target,
                          self.hops, self.ttl, len(self.payload)) + self.payload

    @classmethod
    def decode(cls, buf: bytes) -> "ControlMessage":
        kind, origin, target, hops, ttl, length = _CTRL.unpack_from(buf, 0)
        payload = buf[_CTRL.size:_CTRL.size + length]
        if len(payload) != length:
            raise ValueError("truncated control payload")
        return cls(ControlKind(kind), origin, target, hops, ttl, payload)


@dataclass
class RouteView:
    """Neighbors currently reachable from one process by any connected
    endpoint."""

    neighbors: set[int]


def route_next_hop(current: int, target: int, view: RouteView) -> int:
    """Neighbor minimizing ``abs(n - target)``; ties go to the smaller rank.

    Raises NoProgress when no neighbor strictly reduces the distance, which
    can only happen if the static chain invariant was violated.
    """
    if current == target:
        raise ValueError("already at target")
    if not view.neighbors:
        raise NoProgress(f"process {current} has no neighbors")
    best = min(view.neighbors, key=lambda n: (abs(n - target), n))
    if abs(best - target) >= abs(current - target):
        raise NoProgress(
            f"no neighbor of {current} improves distance to {target}")
    return best


def greedy_path(origin: int, target: int, views: dict[int, RouteView],
                ttl: int | None = None) -> list[int]:
    """Full hop sequence from origin to target over static views.

    Pure helper used by routing tests and diagnostics; the live runtime
    forwards hop by hop with each process's own view.
    """
    path = [origin]
    current = origin
    budget = ttl if ttl is not None else abs(origin - target) + len(views)
    while current != target:
        if len(path) - 1 >= budget:
            raise NoProgress(f"ttl exhausted routing {origin} -> {target}")
        current = route_next_hop(current, target, views[current])
        path.append(current)
    return path


def chain_views(n: int) -> dict[int, RouteView]:
    """Static bootstrap views: each rank sees its rank-adjacent neighbors."""
    views = {}
    for p in range(n):
        nb = set()
        if p > 0:
            nb.add(p - 1)
        if p < n - 1:
            nb.add(p + 1)
        views[p] = RouteView(nb)
    return views
