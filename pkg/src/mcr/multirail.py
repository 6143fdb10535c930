"""Multi-rail endpoint management: ordered per-peer endpoint lists, gate and
priority based election, on-demand route creation hooks, and the wire frame
codec shared by every driver.

Frame layout (little-endian), frame_len counting everything after itself:

    [u32 frame_len][u8 frame_type][u64 src_process][u64 dst_process]
    [u64 src_task][u64 dst_task][i64 tag][payload bytes]

frame_type: 0 = data, 1 = control, 2 = connection handshake.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .config import RailSpec
from .errors import NoRouteToProcess, RailClosed

FRAME_DATA = 0
FRAME_CONTROL = 1
FRAME_HANDSHAKE = 2

_HDR = struct.Struct("<BQQQQq")   # after the u32 length prefix
_LEN = struct.Struct("<I")


@dataclass
class Message:
    src_task: int
    dst_task: int
    src_process: int
    dst_process: int
    tag: int
    payload: bytes

    @property
    def size(self) -> int:
        return len(self.payload)


def encode_frame(frame_type: int, src_process: int, dst_process: int,
                 src_task: int, dst_task: int, tag: int, payload: bytes) -> bytes:
    body = _HDR.pack(frame_type, src_process, dst_process, src_task, dst_task, tag)
    return _LEN.pack(len(body) + len(payload)) + body + payload


def decode_frame(buf: bytes):
    """Decode one frame, returning (frame_type, message)."""
    (length,) = _LEN.unpack_from(buf, 0)
    if length != len(buf) - 4:
        raise ValueError(f"frame length {length} does not match buffer {len(buf) - 4}")
    ftype, src_p, dst_p, src_t, dst_t, tag = _HDR.unpack_from(buf, 4)
    payload = buf[4 + _HDR.size:]
    return ftype, Message(src_t, dst_t, src_p, dst_p, tag, payload)


class EndpointState(Enum):
    CONNECTED = "connected"
    PENDING = "pending"
    CLOSED = "closed"


@dataclass
class Endpoint:
    rail: str
    remote: int
    state: EndpointState = EndpointState.CONNECTED
    conn_info: object = None
    static: bool = False      # part of the bootstrap ring, not an on-demand route
    created_seq: int = 0


class EndpointTable:
    """Per-process table: remote pid -> endpoints ordered by rail priority
    (descending) then creation order."""

    def __init__(self):
        self._by_remote: dict[int, list[Endpoint]] = {}
        self._seq = 0

    def insert(self, ep: Endpoint, priority: int) -> None:
        if self.find(ep.rail, ep.remote) is not None:
            return  # no duplicate (rail, remote) pairs
        ep.created_seq = self._seq
        self._seq += 1
        ep._priority = priority
        lst = self._by_remote.setdefault(ep.remote, [])
        lst.append(ep)
        lst.sort(key=lambda e: (-e._priority, e.created_seq))

    def find(self, rail: str, remote: int) -> Optional[Endpoint]:
        for ep in self._by_remote.get(remote, []):
            if ep.rail == rail:
                return ep
        return None

    def endpoints_for(self, remote: int) -> list[Endpoint]:
        return list(self._by_remote.get(remote, []))

    def all_endpoints(self) -> list[Endpoint]:
        out = []
        for remote in sorted(self._by_remote):
            out.extend(self._by_remote[remote])
        return out

    def remove_rail(self, rail: str) -> int:
        """Drop every endpoint of a rail; returns how many were removed."""
        removed = 0
        for remote in list(self._by_remote):
            keep = []
            for ep in self._by_remote[remote]:
                if ep.rail == rail:
                    ep.state = EndpointState.CLOSED
                    removed += 1
                else:
                    keep.append(ep)
            if keep:
                self._by_remote[remote] = keep
            else:
                del self._by_remote[remote]
        return removed

    def remove(self, rail: str, remote: int) -> None:
        lst = self._by_remote.get(remote, [])
        lst[:] = [ep for ep in lst if ep.rail != rail]
        if not lst:
            self._by_remote.pop(remote, None)


def select_endpoint(table: EndpointTable, msg: Message,
                    rails: list[RailSpec]) -> Optional[Endpoint]:
    """First connected endpoint, in priority order, whose rail gates pass.

    Returns None when no existing endpoint qualifies; the caller then walks
    the rails for on-demand creation.
    """
    open_rails = {r.name: r for r in rails}
    for ep in table.endpoints_for(msg.dst_process):
        rail = open_rails.get(ep.rail)
        if rail is None:
            continue
        if ep.state is not EndpointState.CONNECTED:
            continue
        if rail.gates_pass(msg.size):
            return ep
    return None


def creation_candidates(msg: Message, rails: list[RailSpec]) -> list[RailSpec]:
    """Rails eligible for on-demand creation for this message, best first.

    A failed gate on a higher-priority rail falls through to the next
    passing rail.
    """
    return [r for r in rails if r.on_demand and r.gates_pass(msg.size)]


def elect_endpoint(table: EndpointTable, msg: Message, rails: list[RailSpec],
                   connector=None) -> Endpoint:
    """Elect an endpoint for a message, creating one on demand if permitted.

    ``connector(rail, remote)`` performs the connection exchange and returns
    the new endpoint; tests can elect purely by passing connector=None.
    """
    if msg.dst_process == msg.src_process:
        raise ValueError("intra-process delivery bypasses rails")
    ep = select_endpoint(table, msg, rails)
    if ep is not None:
        return ep
    for rail in creation_candidates(msg, rails):
        if connector is None:
            continue
        ep = connector(rail, msg.dst_process)
        if ep is not None:
            return ep
    raise NoRouteToProcess(
        f"no route to process {msg.dst_process} for {msg.size}-byte message")


# --- drivers -----------------------------------------------------------------

@dataclass
class MockRdmaState:
    """Device-side state a real HCA would hold: pinned memory regions and
    queue-pair tokens. Never serialized; must be empty once the rail closes."""

    pinned_regions: set = field(default_factory=set)
    qp_tokens: set = field(default_factory=set)

    def clear(self):
        self.pinned_regions.clear()
        self.qp_tokens.clear()


class InprocChannel:
    """Loopback channel; frames ride the event queue, the channel only
    carries identity so endpoints can be matched up after a restore."""

    _next_id = 0

    def __init__(self):
        InprocChannel._next_id += 1
        self.channel_id = InprocChannel._next_id
        self.open = True

    def close(self):
        self.open = False


class TcpRailPort:
    """Real localhost listener for one (process, rail) pair."""

    def __init__(self, pid: int):
        self.pid = pid
        self.listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.listener.bind(("127.0.0.1", 0))
        self.listener.listen(64)
        self.address = self.listener.getsockname()
        self.conns: dict[int, socket.socket] = {}   # remote pid -> socket

    def conn_string(self) -> str:
        return f"{self.address[0]}:{self.address[1]}"

    def connect_to(self, remote_pid: int, conn_string: str) -> None:
        host, port = conn_string.rsplit(":", 1)
        s = socket.create_connection((host, int(port)))
        _tune(s)
        # Identify ourselves so the acceptor can file the socket under the
        # right peer.
        s.sendall(encode_frame(FRAME_HANDSHAKE, self.pid, remote_pid, 0, 0, 0, b""))
        self.conns[remote_pid] = s

    def accept_from(self) -> int:
        """Accept one pending connection; returns the remote pid."""
        s, _ = self.listener.accept()
        _tune(s)
        frame = read_frame(s)
        ftype, msg = decode_frame(frame)
        if ftype != FRAME_HANDSHAKE:
            raise RailClosed("expected handshake frame on new connection")
        self.conns[msg.src_process] = s
        return msg.src_process

    def send_bytes(self, remote_pid: int, data: bytes) -> None:
        sock = self.conns.get(remote_pid)
        if sock is None:
            raise RailClosed(f"no socket to process {remote_pid}")
        sock.sendall(data)

    def recv_frame(self, remote_pid: int) -> bytes:
        sock = self.conns.get(remote_pid)
        if sock is None:
            raise RailClosed(f"no socket from process {remote_pid}")
        return read_frame(sock)

    def close_conn(self, remote_pid: int) -> None:
        sock = self.conns.pop(remote_pid, None)
        if sock is not None:
            try:
                sock.close()
            except OSError:
                pass

    def close(self) -> None:
        for pid in list(self.conns):
            self.close_conn(pid)
        try:
            self.listener.close()
        except OSError:
            pass


def _tune(sock: socket.socket) -> None:
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, 1 << 20)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 1 << 20)


def read_frame(sock: socket.socket) -> bytes:
    head = _read_exact(sock, 4)
    (length,) = _LEN.unpack(head)
    return head + _read_exact(sock, length)


def _read_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        b = sock.recv(n - got)
        if not b:
            raise ConnectionError("peer closed mid-frame")
        chunks.append(b)
        got += len(b)
    return b"".join(chunks)
