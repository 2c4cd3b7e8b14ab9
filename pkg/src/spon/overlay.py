"""Overlay node state machine.

Nodes are pure event machines: every operation takes the current virtual time
and returns a list of effects (transmit intents, deliveries, timer requests,
drops).  The simulation engine owns the clock, the links and the timers; a
node never blocks and never draws randomness.

Two delivery services ride the same links: PRIORITY (timely, fair-queued per
source, no end-to-end retransmission) and RELIABLE (per-flow fair queuing,
end-to-end acks with doubling RTO).  k = 0 selects flooding, k >= 1 selects
that many node-disjoint source routes.

Each link direction additionally runs a small negative-ack recovery protocol:
frames carry per-link sequence numbers, receivers nack gaps, senders keep a
bounded replay cache and announce their high-water sequence number when the
link goes idle so trailing losses are detected without new traffic.
"""

from __future__ import annotations

import struct
from collections import OrderedDict, deque
from dataclasses import dataclass, field, replace
from typing import Deque, Dict, List, Optional, Tuple

from .config import Config, DEFAULT_CONFIG
from .frames import (
    Frame,
    KIND_ACK,
    KIND_DATA,
    KIND_HOP_DATA,
    KIND_HOP_NACK,
    SERVICE_PRI,
    SERVICE_REL,
)
from .topology import (
    NoPath,
    NodeId,
    Path,
    TopologyError,
    TopologyView,
    k_disjoint_paths,
    shortest_path,
)

PRI = "PRI"
REL = "REL"
_SERVICE_CODE = {PRI: SERVICE_PRI, REL: SERVICE_REL}
_SERVICE_NAME = {v: k for k, v in _SERVICE_CODE.items()}

FLOODING = 0


class PayloadTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class ServiceClass:
    kind: str            # PRI | REL
    k: int = FLOODING    # 0 = flooding, otherwise disjoint path count

    def __post_init__(self):
        if self.kind not in (PRI, REL):
            raise ValueError(f"unknown service kind {self.kind!r}")
        if self.k < 0:
            raise ValueError("k must be >= 0")


# --- effects ------------------------------------------------------------------

@dataclass
class Transmit:
    """A frame was queued toward `neighbor`; the engine services the port."""
    neighbor: NodeId
    frame: Frame


@dataclass
class Deliver:
    src: NodeId
    seq: int
    service: str
    payload: bytes
    wire_bytes: int


@dataclass
class SetTimer:
    timer_id: tuple
    delay_ms: float
    data: object = None


@dataclass
class CancelTimer:
    timer_id: tuple


@dataclass
class Drop:
    reason: str
    frame: Optional[Frame] = None


@dataclass
class ClientError:
    reason: str
    dst: NodeId
    seq: int
    frame: Optional[Frame] = None


Effects = List[object]


# --- adversary ----------------------------------------------------------------

@dataclass(frozen=True)
class Behavior:
    kind: str = "honest"                 # honest | drop_all | drop_flow | delay
    flow: Optional[Tuple[NodeId, NodeId]] = None
    delay_ms: float = 0.0

    @classmethod
    def honest(cls) -> "Behavior":
        return cls()

    @classmethod
    def drop_all(cls) -> "Behavior":
        return cls("drop_all")

    @classmethod
    def drop_flow(cls, src: NodeId, dst: NodeId) -> "Behavior":
        return cls("drop_flow", flow=(src, dst))

    @classmethod
    def delay(cls, delay_ms: float) -> "Behavior":
        return cls("delay", delay_ms=delay_ms)


# --- scheduler ----------------------------------------------------------------

class OutPort:
    """Per-neighbor output buffers: fair-queued data partitions plus a strict
    priority control queue for recovery traffic."""

    def __init__(self, capacity: int, control_capacity: int):
        self.capacity = capacity
        self.control_capacity = control_capacity
        self.queues: "OrderedDict[tuple, Dict[int, Deque[Frame]]]" = OrderedDict()
        self.sizes: Dict[tuple, int] = {}
        self.ring: List[tuple] = []
        self.ring_idx = 0
        self.control: Deque[Frame] = deque()

    @staticmethod
    def partition(frame: Frame) -> tuple:
        if frame.service == SERVICE_REL:
            return ("r", frame.src, frame.dst)
        return ("p", frame.src)

    def enqueue(self, frame: Frame) -> bool:
        key = self.partition(frame)
        if key not in self.queues:
            self.queues[key] = {}
            self.sizes[key] = 0
            self.ring.append(key)
        if self.sizes[key] >= self.capacity:
            return False
        self.queues[key].setdefault(frame.priority, deque()).append(frame)
        self.sizes[key] += 1
        return True

    def enqueue_control(self, frame: Frame) -> bool:
        if len(self.control) >= self.control_capacity:
            return False
        self.control.append(frame)
        return True

    def _pop_partition(self, key: tuple, now_us: int,
                       dropped: List[Frame]) -> Optional[Frame]:
        levels = self.queues[key]
        for level in sorted(levels, reverse=True):
            q = levels[level]
            while q:
                frame = q.popleft()
                self.sizes[key] -= 1
                if (frame.service == SERVICE_PRI and frame.deadline_us
                        and now_us > frame.deadline_us):
                    dropped.append(frame)
                    continue
                return frame
        return None

    def dequeue(self, now_ms: float) -> Tuple[Optional[Frame], List[Frame]]:
        """Next frame for the wire plus any frames dropped past deadline.
        Control first, then round-robin over the data partitions."""
        dropped: List[Frame] = []
        if self.control:
            return self.control.popleft(), dropped
        n = len(self.ring)
        now_us = int(now_ms * 1000.0)
        for step in range(n):
            pos = (self.ring_idx + step) % n
            frame = self._pop_partition(self.ring[pos], now_us, dropped)
            if frame is not None:
                self.ring_idx = (pos + 1) % n
                return frame, dropped
        return None, dropped

    def drain(self) -> List[Frame]:
        """Remove and return every queued data frame (control included)."""
        out: List[Frame] = list(self.control)
        self.control.clear()
        for key, levels in self.queues.items():
            for level in sorted(levels, reverse=True):
                out.extend(levels[level])
            levels.clear()
            self.sizes[key] = 0
        return out

    def __len__(self) -> int:
        return len(self.control) + sum(self.sizes.values())


# --- hop-by-hop recovery --------------------------------------------------------

class _HopTx:
    def __init__(self):
        self.next_seq = 0
        self.cache: "OrderedDict[int, Tuple[Frame, float]]" = OrderedDict()
        self.announce_round = 0

    def store(self, seq: int, frame: Frame, now: float, cfg: Config) -> None:
        self.cache[seq] = (frame, now)
        while len(self.cache) > cfg.hop_cache_frames:
            self.cache.popitem(last=False)
        self._expire(now, cfg)

    def lookup(self, seq: int, now: float, cfg: Config) -> Optional[Frame]:
        self._expire(now, cfg)
        entry = self.cache.get(seq)
        return entry[0] if entry else None

    def _expire(self, now: float, cfg: Config) -> None:
        horizon = now - cfg.hop_cache_expiry_ms
        while self.cache:
            seq, (_frame, stamp) = next(iter(self.cache.items()))
            if stamp >= horizon:
                break
            del self.cache[seq]


class _HopRx:
    def __init__(self):
        self.expected = 0
        self.missing: Dict[int, float] = {}
        self.nack_armed = False


class _SeqWindow:
    """Sliding membership window, bounded to `limit` entries."""

    def __init__(self, limit: int):
        self.limit = limit
        self.entries: "OrderedDict[tuple, int]" = OrderedDict()

    def seen(self, entry: tuple) -> bool:
        return entry in self.entries

    def add(self, entry: tuple) -> None:
        self.entries[entry] = 1
        while len(self.entries) > self.limit:
            self.entries.popitem(last=False)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class _RelPending:
    frame: Frame
    service: ServiceClass
    attempts: int = 0
    rto_ms: float = 0.0


def _pack_seqs(seqs: List[int]) -> bytes:
    return b"".join(struct.pack(">Q", s) for s in seqs)


def _unpack_seqs(payload: bytes) -> List[int]:
    if len(payload) % 8:
        return []
    return [struct.unpack(">Q", payload[i:i + 8])[0] for i in range(0, len(payload), 8)]


# --- node ----------------------------------------------------------------------

class NodeState:
    """One overlay relay.  See the module docstring for the contract."""

    def __init__(self, node_id: NodeId, view: TopologyView,
                 config: Config = DEFAULT_CONFIG):
        self.id = node_id
        self.view = view
        self.config = config
        self.behavior = Behavior.honest()
        self.ports: Dict[NodeId, OutPort] = {}
        self.hop_tx: Dict[NodeId, _HopTx] = {}
        self.hop_rx: Dict[NodeId, _HopRx] = {}
        self.seq_counters: Dict[Tuple[NodeId, str], int] = {}
        self.dedup_window: Dict[Tuple[NodeId, str], _SeqWindow] = {}
        self.rel_pending: Dict[Tuple[NodeId, int], _RelPending] = {}
        self.parked: Deque[Frame] = deque()   # REL transit frames awaiting a route
        self.ack_rotation: "OrderedDict[Tuple[NodeId, int], int]" = OrderedDict()
        self._delay_counter = 0
        self.counters: Dict[str, int] = {}

    # -- helpers --

    def _count(self, reason: str) -> None:
        self.counters[reason] = self.counters.get(reason, 0) + 1

    def _port(self, neighbor: NodeId) -> OutPort:
        if neighbor not in self.ports:
            self.ports[neighbor] = OutPort(self.config.buffer_capacity,
                                           self.config.control_capacity)
        return self.ports[neighbor]

    def _window(self, src: NodeId, service: int) -> _SeqWindow:
        key = (src, _SERVICE_NAME.get(service, str(service)))
        if key not in self.dedup_window:
            self.dedup_window[key] = _SeqWindow(self.config.dedup_window)
        return self.dedup_window[key]

    def _next_seq(self, dst: NodeId, kind: str) -> int:
        key = (dst, kind)
        self.seq_counters[key] = self.seq_counters.get(key, 0) + 1
        return self.seq_counters[key]

    def _enqueue_data(self, neighbor: NodeId, frame: Frame, out: Effects) -> None:
        if self._port(neighbor).enqueue(frame):
            out.append(Transmit(neighbor, frame))
        else:
            self._count("buffer_full")
            out.append(Drop("buffer_full", frame))

    def _enqueue_control(self, neighbor: NodeId, frame: Frame, out: Effects) -> None:
        if self._port(neighbor).enqueue_control(frame):
            out.append(Transmit(neighbor, frame))
        else:
            self._count("control_overflow")
            out.append(Drop("control_overflow", frame))

    def _route_pool(self, dst: NodeId) -> List[Path]:
        try:
            return k_disjoint_paths(self.view, self.id, dst, self.config.rel_route_pool)
        except NoPath:
            return []

    def _best_rtt_ms(self, dst: NodeId) -> float:
        try:
            return 2.0 * shortest_path(self.view, self.id, dst).total_latency_ms
        except NoPath:
            return self.config.default_rtt_ms

    # -- client entry point --

    def client_send(self, dst: NodeId, payload: bytes, service: ServiceClass,
                    now: float, deadline_ms: Optional[float] = None,
                    priority: int = 0) -> Effects:
        if len(payload) > self.config.max_payload_bytes:
            raise PayloadTooLarge(f"{len(payload)} bytes")
        out: Effects = []
        if dst == self.id:
            out.append(Deliver(self.id, 0, service.kind, payload, len(payload)))
            return out

        seq = self._next_seq(dst, service.kind)
        deadline_us = 0
        if service.kind == PRI:
            if deadline_ms is None:
                try:
                    deadline_ms = (self.config.deadline_factor *
                                   shortest_path(self.view, self.id, dst).total_latency_ms)
                except NoPath:
                    deadline_ms = None
            if deadline_ms is not None:
                deadline_us = int((now + deadline_ms) * 1000.0)

        frame = Frame(kind=KIND_DATA, service=_SERVICE_CODE[service.kind],
                      k=service.k, src=self.id, dst=dst, seq=seq,
                      priority=priority, deadline_us=deadline_us, payload=payload)

        self._launch(frame, service.k, out)
        # registered only once the first transmission is actually queued
        if service.kind == REL:
            pending = _RelPending(frame=frame, service=service,
                                  rto_ms=2.0 * self._best_rtt_ms(dst))
            self.rel_pending[(dst, seq)] = pending
            out.append(SetTimer(("rel", dst, seq), pending.rto_ms))
        return out

    def _launch(self, frame: Frame, k: int, out: Effects) -> None:
        """First transmission: flood or stamp disjoint routes."""
        if k == FLOODING:
            neighbors = self.view.up_neighbors(self.id)
            if not neighbors:
                raise NoPath(self.id, frame.dst, "no up neighbor")
            # suppress copies echoed back to us
            self._window(frame.src, frame.service).add((frame.dst, frame.seq, frame.kind))
            flooded = replace(frame, k=FLOODING, routes=())
            for nbr in neighbors:
                self._enqueue_data(nbr, flooded, out)
        else:
            paths = k_disjoint_paths(self.view, self.id, frame.dst, k)
            routed = replace(frame, k=len(paths),
                             routes=tuple(p.hops for p in paths))
            for path in paths:
                self._enqueue_data(path.hops[1], routed, out)

    # -- frame arrival --

    def handle_frame(self, from_nbr: NodeId, wire: Frame, now: float) -> Effects:
        out: Effects = []
        if wire.kind == KIND_HOP_NACK:
            self._handle_hop_nack(from_nbr, wire, now, out)
            return out
        if wire.kind == KIND_HOP_DATA:
            inner = self._hop_receive(from_nbr, wire, now, out)
            if inner is not None:
                self._process(from_nbr, inner, now, out)
            return out
        # unwrapped frames only occur in unit tests; process directly
        self._process(from_nbr, wire, now, out)
        return out

    def _hop_receive(self, from_nbr: NodeId, wire: Frame, now: float,
                     out: Effects) -> Optional[Frame]:
        rx = self.hop_rx.setdefault(from_nbr, _HopRx())
        seq = wire.seq
        if seq == rx.expected:
            rx.expected += 1
        elif seq > rx.expected:
            start = max(rx.expected, seq - self.config.hop_cache_frames)
            for s in range(start, seq):
                rx.missing[s] = now
            rx.expected = seq + 1
            self._arm_nack(from_nbr, rx, out, self.config.nack_delay_ms)
        else:
            if seq in rx.missing:
                del rx.missing[seq]
            else:
                self._count("hop_duplicate")
                out.append(Drop("hop_duplicate", wire))
                return None
        return wire.inner

    def _handle_hop_nack(self, from_nbr: NodeId, wire: Frame, now: float,
                         out: Effects) -> None:
        if wire.payload:
            # neighbor requests retransmission of the listed link seqs
            tx = self.hop_tx.setdefault(from_nbr, _HopTx())
            for seq in _unpack_seqs(wire.payload):
                cached = tx.lookup(seq, now, self.config)
                if cached is None:
                    # evicted or expired: send an empty fill so the neighbor
                    # stops asking; the data is gone at this layer
                    self._count("hop_unrecoverable")
                    out.append(Drop("hop_unrecoverable", wire))
                    tomb = Frame(kind=KIND_HOP_DATA, src=self.id, dst=from_nbr,
                                 seq=seq)
                    self._enqueue_control(from_nbr, tomb, out)
                else:
                    self._enqueue_control(from_nbr, cached, out)
        else:
            # high-water announce: anything below wire.seq we never saw is lost
            rx = self.hop_rx.setdefault(from_nbr, _HopRx())
            high = wire.seq
            if high >= rx.expected:
                start = max(rx.expected, high + 1 - self.config.hop_cache_frames)
                for s in range(start, high + 1):
                    rx.missing[s] = now
                rx.expected = high + 1
            if rx.missing:
                self._arm_nack(from_nbr, rx, out, self.config.nack_delay_ms)

    def _arm_nack(self, nbr: NodeId, rx: _HopRx, out: Effects, delay: float) -> None:
        if not rx.nack_armed:
            rx.nack_armed = True
            out.append(SetTimer(("nack", nbr), delay))

    # -- data plane --

    def _adversarial(self, frame: Frame) -> bool:
        b = self.behavior
        if b.kind == "drop_all":
            return True
        if b.kind == "drop_flow" and b.flow == (frame.src, frame.dst):
            return True
        return False

    def _process(self, from_nbr: NodeId, frame: Frame, now: float, out: Effects,
                 delayed: bool = False) -> None:
        if frame.kind not in (KIND_DATA, KIND_ACK):
            self._count("unhandled_kind")
            out.append(Drop("unhandled_kind", frame))
            return
        if self._adversarial(frame):
            self._count("adversarial")
            out.append(Drop("adversarial", frame))
            return
        if self.behavior.kind == "delay" and not delayed:
            self._delay_counter += 1
            out.append(SetTimer(("delay", self._delay_counter),
                                self.behavior.delay_ms, data=(from_nbr, frame)))
            return

        if frame.k == FLOODING:
            self._process_flood(from_nbr, frame, now, out)
        else:
            self._process_routed(from_nbr, frame, now, out)

    def _process_flood(self, from_nbr: NodeId, frame: Frame, now: float,
                       out: Effects) -> None:
        window = self._window(frame.src, frame.service)
        entry = (frame.dst, frame.seq, frame.kind)
        if window.seen(entry):
            self._count("duplicate")
            out.append(Drop("duplicate", frame))
            if frame.dst == self.id and frame.kind == KIND_DATA \
                    and frame.service == SERVICE_REL:
                self._send_ack(frame, from_nbr, now, out, duplicate=True)
            return
        window.add(entry)
        if frame.dst == self.id:
            self._consume(frame, from_nbr, now, out)
        for nbr in self.view.up_neighbors(self.id):
            if nbr != from_nbr:
                self._enqueue_data(nbr, frame, out)

    def _process_routed(self, from_nbr: NodeId, frame: Frame, now: float,
                        out: Effects) -> None:
        if frame.dst == self.id:
            window = self._window(frame.src, frame.service)
            entry = (frame.dst, frame.seq, frame.kind)
            if window.seen(entry):
                self._count("duplicate")
                out.append(Drop("duplicate", frame))
                if frame.kind == KIND_DATA and frame.service == SERVICE_REL:
                    self._send_ack(frame, from_nbr, now, out, duplicate=True)
                return
            window.add(entry)
            self._consume(frame, from_nbr, now, out)
            return
        nxt = self._next_hop(frame)
        if nxt is None:
            self._count("not_on_route")
            out.append(Drop("not_on_route", frame))
            return
        if self.view.node_is_up(nxt) and self.view.link_is_up(self.id, nxt):
            self._enqueue_data(nxt, frame, out)
            return
        self._reroute(frame, now, out)

    def _next_hop(self, frame: Frame) -> Optional[NodeId]:
        for route in frame.routes:
            try:
                idx = route.index(self.id)
            except ValueError:
                continue
            if idx + 1 < len(route):
                return route[idx + 1]
        return None

    def _reroute(self, frame: Frame, now: float, out: Effects) -> None:
        """Next hop is down: restamp the tail of the route from here."""
        try:
            path = shortest_path(self.view, self.id, frame.dst)
        except NoPath:
            if frame.service == SERVICE_REL:
                self.parked.append(frame)
                self._count("parked")
            else:
                self._count("no_route")
                out.append(Drop("no_route", frame))
            return
        restamped = replace(frame, routes=(path.hops,))
        self._enqueue_data(path.hops[1], restamped, out)

    def _consume(self, frame: Frame, from_nbr: NodeId, now: float,
                 out: Effects) -> None:
        if frame.kind == KIND_ACK:
            pending = self.rel_pending.pop((frame.src, frame.seq), None)
            if pending is not None:
                out.append(CancelTimer(("rel", frame.src, frame.seq)))
            return
        out.append(Deliver(frame.src, frame.seq, _SERVICE_NAME[frame.service],
                           frame.payload, frame.wire_size()))
        if frame.service == SERVICE_REL:
            self._send_ack(frame, from_nbr, now, out, duplicate=False)

    def _send_ack(self, data: Frame, from_nbr: NodeId, now: float, out: Effects,
                  duplicate: bool) -> None:
        ack = Frame(kind=KIND_ACK, service=SERVICE_REL, src=self.id, dst=data.src,
                    seq=data.seq)
        key = (data.src, data.seq)
        attempt = self.ack_rotation.get(key, 0)
        self.ack_rotation[key] = attempt + 1
        while len(self.ack_rotation) > self.config.dedup_window:
            self.ack_rotation.popitem(last=False)
        if not duplicate and data.k == FLOODING:
            # first ack for a flooded message floods back
            try:
                self._launch(replace(ack, k=FLOODING), FLOODING, out)
            except NoPath:
                self._count("ack_no_route")
            return
        arrival = self._arrival_route(data, from_nbr)
        if arrival is not None and attempt == 0:
            route = tuple(reversed(arrival))
            if self.view.usable(Path(route, 0.0)):
                self._enqueue_data(route[1],
                                   replace(ack, k=1, routes=(route,)), out)
                return
        pool = self._route_pool(data.src)
        if pool:
            path = pool[attempt % len(pool)]
            self._enqueue_data(path.hops[1],
                               replace(ack, k=1, routes=(path.hops,)), out)
        else:
            try:
                self._launch(replace(ack, k=FLOODING), FLOODING, out)
            except NoPath:
                self._count("ack_no_route")

    def _arrival_route(self, frame: Frame, from_nbr: NodeId) -> Optional[Tuple[NodeId, ...]]:
        for route in frame.routes:
            if route and route[-1] == self.id and len(route) > 1 \
                    and route[-2] == from_nbr:
                return route
        return None

    # -- wire side, driven by the engine --

    def scheduler_dequeue(self, neighbor: NodeId, now: float) -> Tuple[Optional[Frame], Effects]:
        """Pick the next frame for the neighbor-facing link."""
        out: Effects = []
        port = self.ports.get(neighbor)
        if port is None:
            return None, out
        frame, expired = port.dequeue(now)
        for late in expired:
            self._count("deadline_expired")
            out.append(Drop("deadline_expired", late))
        return frame, out

    def wrap_for_link(self, frame: Frame, neighbor: NodeId, now: float,
                      out: Effects) -> Frame:
        """Assign the per-link sequence number and remember the frame for
        nack-driven retransmission.  Recovery frames pass through as-is."""
        if frame.kind in (KIND_HOP_DATA, KIND_HOP_NACK):
            return frame
        tx = self.hop_tx.setdefault(neighbor, _HopTx())
        seq = tx.next_seq
        tx.next_seq += 1
        wire = Frame(kind=KIND_HOP_DATA, src=self.id, dst=neighbor, seq=seq,
                     inner=frame)
        tx.store(seq, wire, now, self.config)
        tx.announce_round = 0
        out.append(SetTimer(("ann", neighbor), self.config.announce_delay_ms))
        return wire

    def port_pending(self, neighbor: NodeId) -> bool:
        port = self.ports.get(neighbor)
        return port is not None and len(port) > 0

    # -- timers --

    def handle_timer(self, timer_id: tuple, data: object, now: float) -> Effects:
        out: Effects = []
        kind = timer_id[0]
        if kind == "rel":
            self._rel_timeout(timer_id, now, out)
        elif kind == "nack":
            self._nack_timer(timer_id[1], now, out)
        elif kind == "ann":
            self._announce_timer(timer_id[1], now, out)
        elif kind == "delay":
            from_nbr, frame = data
            self._process(from_nbr, frame, now, out, delayed=True)
        return out

    def _rel_timeout(self, timer_id: tuple, now: float, out: Effects) -> None:
        _tag, dst, seq = timer_id
        pending = self.rel_pending.get((dst, seq))
        if pending is None:
            return
        pending.attempts += 1
        if pending.attempts > self.config.rel_max_retries:
            del self.rel_pending[(dst, seq)]
            self._count("rel_failed")
            out.append(ClientError("retries_exhausted", dst, seq, pending.frame))
            return
        pending.rto_ms *= 2.0
        out.append(SetTimer(timer_id, pending.rto_ms))
        pool = self._route_pool(dst)
        originally_flooded = pending.service.k == FLOODING
        flood_turn = (not originally_flooded) and pending.attempts % 3 == 0
        if pool and not flood_turn:
            path = pool[(pending.attempts - 1) % len(pool)]
            frame = replace(pending.frame, k=1, routes=(path.hops,))
            self._enqueue_data(path.hops[1], frame, out)
            self._count("rel_retransmit")
            return
        if originally_flooded:
            # the first flood marked every window; only routed copies can help
            if pool:
                path = pool[(pending.attempts - 1) % len(pool)]
                frame = replace(pending.frame, k=1, routes=(path.hops,))
                self._enqueue_data(path.hops[1], frame, out)
                self._count("rel_retransmit")
            return
        try:
            frame = replace(pending.frame, k=FLOODING, routes=())
            self._launch(frame, FLOODING, out)
            self._count("rel_reflood")
        except NoPath:
            self._count("rel_stranded")

    def _nack_timer(self, nbr: NodeId, now: float, out: Effects) -> None:
        rx = self.hop_rx.get(nbr)
        if rx is None:
            return
        rx.nack_armed = False
        horizon = now - self.config.hop_cache_expiry_ms
        for seq in [s for s, t in rx.missing.items() if t < horizon]:
            del rx.missing[seq]
            self._count("hop_gave_up")
        if not rx.missing:
            return
        want = sorted(rx.missing)[: self.config.nack_batch]
        nack = Frame(kind=KIND_HOP_NACK, src=self.id, dst=nbr,
                     payload=_pack_seqs(want))
        self._enqueue_control(nbr, nack, out)
        try:
            link_lat = self.view.base.link(self.id, nbr).latency_ms
        except TopologyError:
            link_lat = 1.0
        rx.nack_armed = True
        out.append(SetTimer(("nack", nbr),
                            max(self.config.renack_min_ms, 2.5 * link_lat)))

    def _announce_timer(self, nbr: NodeId, now: float, out: Effects) -> None:
        tx = self.hop_tx.get(nbr)
        if tx is None or tx.next_seq == 0:
            return
        announce = Frame(kind=KIND_HOP_NACK, src=self.id, dst=nbr,
                         seq=tx.next_seq - 1, payload=b"")
        self._enqueue_control(nbr, announce, out)
        tx.announce_round += 1
        if tx.announce_round < self.config.announce_retries:
            delay = self.config.announce_delay_ms * (2 ** tx.announce_round)
            out.append(SetTimer(("ann", nbr), delay))

    # -- topology updates --

    def recompute_routes(self, new_view: TopologyView, now: float) -> Effects:
        """Adopt a new view; purge or restamp traffic aimed at dead elements."""
        self.view = new_view
        out: Effects = []
        # rerouting may open ports toward new neighbors; iterate a snapshot
        for nbr, port in list(self.ports.items()):
            if self._link_known(nbr) and new_view.link_is_up(self.id, nbr):
                continue
            for frame in port.drain():
                if frame.kind in (KIND_HOP_DATA, KIND_HOP_NACK):
                    continue   # link-layer traffic dies with the link
                if frame.k == FLOODING:
                    self._count("flood_purged")
                    out.append(Drop("link_down", frame))
                elif frame.dst == self.id:
                    continue
                else:
                    self._reroute(frame, now, out)
        parked = list(self.parked)
        self.parked.clear()
        for frame in parked:
            self._reroute(frame, now, out)
        return out

    def _link_known(self, nbr: NodeId) -> bool:
        try:
            self.view.base.link(self.id, nbr)
            return True
        except TopologyError:
            return False
