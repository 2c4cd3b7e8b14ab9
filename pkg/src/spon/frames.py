"""Overlay frame wire format.

Layout, all integers big-endian:
  version(1) kind(1) service(1) k(1)
  src-len(1) src  dst-len(1) dst
  seq(8) priority(1) deadline(8, microseconds, 0 = none)
  route-count(1) { hop-count(1) { hop-len(1) hop }* }*
  payload-len(4) payload

Frames are passed as objects inside the simulator; encode/decode exist so the
format stays stable and testable byte for byte.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Tuple

VERSION = 1

KIND_DATA = 1
KIND_ACK = 2
KIND_NACK = 3
KIND_HOP_DATA = 4
KIND_HOP_NACK = 5
KIND_NAMES = {
    KIND_DATA: "data",
    KIND_ACK: "ack",
    KIND_NACK: "nack",
    KIND_HOP_DATA: "hop-data",
    KIND_HOP_NACK: "hop-nack",
}

SERVICE_NONE = 0
SERVICE_PRI = 1
SERVICE_REL = 2

MAX_PAYLOAD = 1 << 20


class FrameError(ValueError):
    """Frame violates the wire format."""


def _check_id(name: str, value: str) -> bytes:
    raw = value.encode("utf-8")
    if len(raw) > 255:
        raise FrameError(f"{name} id longer than 255 bytes")
    return raw


@dataclass
class Frame:
    kind: int
    service: int = SERVICE_NONE
    k: int = 0
    src: str = ""
    dst: str = ""
    seq: int = 0
    priority: int = 0
    deadline_us: int = 0
    routes: Tuple[Tuple[str, ...], ...] = ()
    payload: bytes = b""
    # hop-data carries another frame; kept as an object in-process and only
    # serialized into payload on encode.
    inner: Optional["Frame"] = None

    def wire_size(self) -> int:
        size = 4 + 1 + len(self.src.encode()) + 1 + len(self.dst.encode()) + 8 + 1 + 8
        size += 1
        for route in self.routes:
            size += 1 + sum(1 + len(h.encode()) for h in route)
        size += 4 + self._payload_size()
        return size

    def _payload_size(self) -> int:
        if self.inner is not None:
            return self.inner.wire_size()
        return len(self.payload)

    def encode(self) -> bytes:
        if self.kind not in KIND_NAMES:
            raise FrameError(f"unknown kind {self.kind}")
        if not 0 <= self.k <= 255 or not 0 <= self.priority <= 255:
            raise FrameError("k and priority must fit one byte")
        if not 0 <= self.seq < 1 << 64 or not 0 <= self.deadline_us < 1 << 64:
            raise FrameError("seq and deadline must fit eight bytes")
        if len(self.routes) > 255:
            raise FrameError("too many routes")
        payload = self.inner.encode() if self.inner is not None else self.payload
        if len(payload) > MAX_PAYLOAD:
            raise FrameError("payload too large")
        src = _check_id("src", self.src)
        dst = _check_id("dst", self.dst)
        out = bytearray()
        out += struct.pack(">BBBB", VERSION, self.kind, self.service, self.k)
        out += struct.pack(">B", len(src)) + src
        out += struct.pack(">B", len(dst)) + dst
        out += struct.pack(">QBQ", self.seq, self.priority, self.deadline_us)
        out += struct.pack(">B", len(self.routes))
        for route in self.routes:
            if len(route) > 255:
                raise FrameError("route longer than 255 hops")
            out += struct.pack(">B", len(route))
            for hop in route:
                raw = _check_id("hop", hop)
                out += struct.pack(">B", len(raw)) + raw
        out += struct.pack(">I", len(payload)) + payload
        return bytes(out)


def decode(data: bytes) -> Frame:
    """Parse one frame; hop-data payloads are decoded recursively."""
    try:
        return _decode(memoryview(data))
    except (struct.error, IndexError, UnicodeDecodeError) as exc:
        raise FrameError(f"truncated or malformed frame: {exc}") from None


def _decode(view: memoryview) -> Frame:
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FrameError("frame truncated")
        out = view[pos:pos + n]
        pos += n
        return out

    version, kind, service, k = struct.unpack(">BBBB", take(4))
    if version != VERSION:
        raise FrameError(f"unsupported version {version}")
    if kind not in KIND_NAMES:
        raise FrameError(f"unknown kind {kind}")
    src = bytes(take(take(1)[0])).decode("utf-8")
    dst = bytes(take(take(1)[0])).decode("utf-8")
    seq, priority, deadline_us = struct.unpack(">QBQ", take(17))
    routes = []
    for _ in range(take(1)[0]):
        hops = []
        for _ in range(take(1)[0]):
            hops.append(bytes(take(take(1)[0])).decode("utf-8"))
        routes.append(tuple(hops))
    (plen,) = struct.unpack(">I", take(4))
    payload = bytes(take(plen))
    if pos != len(view):
        raise FrameError("trailing bytes after frame")
    frame = Frame(kind=kind, service=service, k=k, src=src, dst=dst, seq=seq,
                  priority=priority, deadline_us=deadline_us,
                  routes=tuple(routes), payload=payload)
    if kind == KIND_HOP_DATA and payload:
        frame.inner = decode(payload)
    return frame
