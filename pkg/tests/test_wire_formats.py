"""Byte-exact checks of every external format: rail frames, control
payloads, shard headers, process images."""

import struct

from mcr.ckpt_multilevel import HEADER_SIZE, decode_file, encode_file
from mcr.multirail import FRAME_DATA, decode_frame, encode_frame
from mcr.signaling import ControlKind, ControlMessage


def test_rail_frame_layout():
    frame = encode_frame(FRAME_DATA, 1, 2, 3, 4, -5, b"ab")
    # u32 frame_len counts everything after itself: 1+8*4+8 header + payload
    assert frame[:4] == struct.pack("<I", 41 + 2)
    assert frame[4] == 0                                   # frame_type data
    assert frame[5:13] == struct.pack("<Q", 1)             # src_process
    assert frame[13:21] == struct.pack("<Q", 2)            # dst_process
    assert frame[21:29] == struct.pack("<Q", 3)            # src_task
    assert frame[29:37] == struct.pack("<Q", 4)            # dst_task
    assert frame[37:45] == struct.pack("<q", -5)           # i64 tag
    assert frame[45:] == b"ab"
    ftype, msg = decode_frame(frame)
    assert ftype == FRAME_DATA
    assert (msg.src_process, msg.dst_process, msg.src_task, msg.dst_task,
            msg.tag, msg.payload) == (1, 2, 3, 4, -5, b"ab")


def test_control_payload_layout():
    cm = ControlMessage(ControlKind.CONN_ACK, 6, 7, 2, 16, b"xyz")
    buf = cm.encode()
    assert buf[0] == 1                                     # kind u8
    assert buf[1:9] == struct.pack("<Q", 6)                # origin
    assert buf[9:17] == struct.pack("<Q", 7)               # target
    assert buf[17:21] == struct.pack("<I", 2)              # hops
    assert buf[21:25] == struct.pack("<I", 16)             # ttl
    assert buf[25:29] == struct.pack("<I", 3)              # len
    assert buf[29:] == b"xyz"


def test_shard_header_layout():
    buf = encode_file(2, 1, 3, 9, b"DATA", orig_len=100)
    assert HEADER_SIZE == 24
    assert buf[:4] == struct.pack("<I", 0x4D43534B)
    assert buf[4] == 2          # level
    assert buf[5] == 1          # shard index
    assert buf[6:8] == struct.pack("<H", 3)     # group
    assert buf[8:12] == struct.pack("<I", 9)    # epoch
    assert buf[12:20] == struct.pack("<Q", 100)  # original length
    hdr, payload = decode_file(buf)
    assert payload == b"DATA"


def test_image_magic():
    from mcr.ckpt_transparent import encode_image

    buf = encode_image(1, 0, [], [])
    assert buf[:8] == b"MCRIMG01"
