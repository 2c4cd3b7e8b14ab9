"""Deterministic discrete-event network harness.

The engine owns physical truth: link occupancy, serialization, propagation,
loss sampling, and fault timing.  Overlay nodes are pure state machines
(`spon.overlay.NodeState`); clients are actors attached to nodes that react to
deliveries, errors, and timers through a narrow `EngineApi`.

Determinism contract: a run is a pure function of (inputs, seed).  The event
heap orders by (time_ms, insertion seq); every per-link-direction loss stream
has its own RNG derived from the seed and the direction label, so reordering
elsewhere cannot perturb it.
"""

import csv
import hashlib
import heapq
import random
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Tuple

from .config import Config, DEFAULT_CONFIG
from .frames import Frame
from .overlay import (
    CancelTimer,
    ClientError,
    Deliver,
    Drop,
    NodeState,
    ServiceClass,
    SetTimer,
    Transmit,
)
from .topology import (
    Change,
    NoPath,
    NodeId,
    Topology,
    TopologyError,
    TopologyView,
    apply_fault,
    link_key,
    shortest_path,
)


class EngineOverrun(RuntimeError):
    """The run exceeded the configured event budget."""


# --- client-layer envelope ------------------------------------------------------

# Overlay payloads are opaque; clients address each other by client id.  The
# envelope prefixes the body with destination and source client ids so the
# engine can hand deliveries and error notices to the right actor.

def pack_client(dst_client: str, src_client: str, body: bytes) -> bytes:
    d = dst_client.encode("utf-8")
    s = src_client.encode("utf-8")
    if len(d) > 255 or len(s) > 255:
        raise ValueError("client id too long")
    return bytes([len(d)]) + d + bytes([len(s)]) + s + body


def unpack_client(payload: bytes) -> Tuple[str, str, bytes]:
    if not payload:
        raise ValueError("empty envelope")
    dlen = payload[0]
    pos = 1 + dlen
    if len(payload) < pos + 1:
        raise ValueError("truncated envelope")
    dst = payload[1:pos].decode("utf-8")
    slen = payload[pos]
    body_at = pos + 1 + slen
    if len(payload) < body_at:
        raise ValueError("truncated envelope")
    src = payload[pos + 1:body_at].decode("utf-8")
    return dst, src, payload[body_at:]


# --- actors ---------------------------------------------------------------------

class Client:
    """Base actor.  Subclasses override the callbacks they care about."""

    def __init__(self, client_id: str):
        self.client_id = client_id

    def on_start(self, api: "EngineApi") -> None:
        pass

    def on_deliver(self, src_client: str, body: bytes, wire_bytes: int,
                   api: "EngineApi") -> None:
        pass

    def on_raw(self, src_client: str, body: bytes, api: "EngineApi") -> None:
        pass

    def on_error(self, reason: str, dst_client: str, body: bytes,
                 api: "EngineApi") -> None:
        pass

    def on_timer(self, timer_id: tuple, data: object, api: "EngineApi") -> None:
        pass


# --- physical aids ----------------------------------------------------------------

@dataclass
class _LinkDir:
    """One direction of an overlay link: at most one frame serializing at a time."""
    rng: random.Random
    inflight: bool = False


@dataclass
class RawLink:
    """A direct client-to-client pipe following a fixed underlay path.

    Latency, loss, bandwidth, and up/down state are read from the ground view
    at each send, so faults and loss overrides on the path apply to raw
    traffic exactly as they do to overlay traffic crossing the same links.
    """
    a_client: str
    b_client: str
    path: Tuple[NodeId, ...]
    as_pair: Optional[Tuple[int, int]] = None
    overhead_bytes: int = 28


@dataclass
class _RawDir:
    rng: random.Random
    busy_until: float = 0.0


@dataclass(frozen=True)
class AsUnderlay:
    """Inter-domain reachability: AS adjacency plus hijack pair bans.

    An overlay link is usable while at least one (home AS, home AS) pair of
    its endpoints is mutually reachable and not banned.
    """
    as_edges: Tuple[Tuple[int, int], ...]

    def reachable(self, x: int, y: int, bans: frozenset) -> bool:
        if (x, y) in bans or (y, x) in bans:
            return False
        if x == y:
            return True
        adj: Dict[int, List[int]] = {}
        for a, b in self.as_edges:
            adj.setdefault(a, []).append(b)
            adj.setdefault(b, []).append(a)
        seen = {x}
        queue = [x]
        while queue:
            cur = queue.pop()
            for nxt in adj.get(cur, ()):
                if nxt == y:
                    return True
                if nxt not in seen:
                    seen.add(nxt)
                    queue.append(nxt)
        return False

    def link_usable(self, homing_a: Tuple[int, ...], homing_b: Tuple[int, ...],
                    bans: frozenset) -> bool:
        if not homing_a or not homing_b:
            return True          # unhomed nodes are not subject to the underlay
        for x in homing_a:
            for y in homing_b:
                if self.reachable(x, y, bans):
                    return True
        return False


# --- faults -------------------------------------------------------------------------

@dataclass(frozen=True)
class FaultEvent:
    time_ms: float
    change: Optional[Change] = None
    hijack: Optional[Tuple[int, int]] = None   # ban this AS pair
    restore: Optional[Tuple[int, int]] = None  # lift a prior ban


def meltdown_schedule(nodes: Iterable[NodeId], start_ms: float, down_ms: float,
                      up_ms: float, cycles: int) -> List[FaultEvent]:
    """Periodically cut and restore a fixed set of relays."""
    events: List[FaultEvent] = []
    t = start_ms
    for _ in range(cycles):
        for n in sorted(nodes):
            events.append(FaultEvent(t, change=Change.node_down(n)))
        for n in sorted(nodes):
            events.append(FaultEvent(t + down_ms, change=Change.node_up(n)))
        t += down_ms + up_ms
    return events


# --- event kinds ----------------------------------------------------------------------

_EV_CLIENT_START = 0
_EV_ARRIVAL = 1
_EV_TX_DONE = 2
_EV_TIMER = 3
_EV_FAULT = 4
_EV_VIEW = 5
_EV_RAW_ARRIVAL = 6


class EngineApi:
    """The surface clients are allowed to touch."""

    def __init__(self, engine: "Engine"):
        self._engine = engine

    @property
    def now(self) -> float:
        return self._engine.now

    def send(self, src_client: str, dst_client: str, body: bytes,
             service: ServiceClass, priority: int = 0,
             deadline_ms: Optional[float] = None) -> bool:
        return self._engine.client_send(src_client, dst_client, body, service,
                                        priority, deadline_ms)

    def raw_send(self, src_client: str, dst_client: str, body: bytes) -> None:
        self._engine.raw_send(src_client, dst_client, body)

    def set_timer(self, client_id: str, timer_id: tuple, delay_ms: float,
                  data: object = None) -> None:
        self._engine.set_timer(("c", client_id), timer_id, delay_ms, data)

    def cancel_timer(self, client_id: str, timer_id: tuple) -> None:
        self._engine.cancel_timer(("c", client_id), timer_id)

    def record(self, client_id: str, key: str, value: float) -> None:
        self._engine.metrics.append((self._engine.now, client_id, key, value))

    def rtt_hint(self, src_client: str, dst_client: str) -> float:
        return self._engine.rtt_hint(src_client, dst_client)

    def raw_rtt_hint(self, src_client: str, dst_client: str) -> float:
        return self._engine.raw_rtt_hint(src_client, dst_client)

    def stop(self) -> None:
        self._engine.running = False


class Engine:
    """Builds the world and runs it to a horizon."""

    def __init__(self, topology: Topology, clients: List[Client], seed: int,
                 config: Config = DEFAULT_CONFIG,
                 faults: Iterable[FaultEvent] = (),
                 raw_links: Iterable[RawLink] = (),
                 underlay: Optional[AsUnderlay] = None,
                 behaviors: Optional[Dict[NodeId, object]] = None,
                 trace: bool = False):
        self.topology = topology
        self.config = config
        self.seed = seed
        self.underlay = underlay
        self.bans: frozenset = frozenset()
        self.trace_enabled = trace
        self.now = 0.0
        self.running = True

        self.ground = TopologyView.all_up(topology)
        if underlay is not None:
            for change in self._underlay_changes():
                self.ground = apply_fault(self.ground, change)

        self.behaviors = dict(behaviors or {})
        self.nodes: Dict[NodeId, NodeState] = {}
        for n in topology.nodes:
            self._spawn_node(n)

        self.clients: Dict[str, Client] = {}
        for c in clients:
            if c.client_id in self.clients:
                raise ValueError(f"duplicate client id {c.client_id}")
            if c.client_id not in topology.attachments:
                raise TopologyError(f"client {c.client_id} has no attachment")
            self.clients[c.client_id] = c
        self.api = EngineApi(self)

        self.link_dirs: Dict[Tuple[NodeId, NodeId], _LinkDir] = {}
        for spec in topology.links:
            for a, b in ((spec.a, spec.b), (spec.b, spec.a)):
                self.link_dirs[(a, b)] = _LinkDir(self._derive_rng(f"{a}>{b}"))
        self.link_epoch: Dict[Tuple[NodeId, NodeId], int] = {
            link_key(s.a, s.b): 0 for s in topology.links}

        self.raw_links: Dict[Tuple[str, str], RawLink] = {}
        self.raw_dirs: Dict[Tuple[str, str], _RawDir] = {}
        for rl in raw_links:
            key = tuple(sorted((rl.a_client, rl.b_client)))
            self.raw_links[key] = rl
            for a, b in ((rl.a_client, rl.b_client), (rl.b_client, rl.a_client)):
                self.raw_dirs[(a, b)] = _RawDir(self._derive_rng(f"raw:{a}>{b}"))

        self._heap: List[tuple] = []
        self._seq = 0
        self._timer_gen: Dict[Tuple[tuple, tuple], int] = {}
        self._view_serial = 0
        self._node_view_serial: Dict[NodeId, int] = {n: 0 for n in topology.nodes}
        self.pops = 0
        self.counters: Dict[str, int] = {}
        self.retired_counters: Dict[str, int] = {}
        self.metrics: List[Tuple[float, str, str, float]] = []
        self.trace_rows: List[Tuple[float, str, str, str]] = []

        # same-instant ties break by insertion: the world changes state before
        # actors scheduled at the same time get to act
        for fe in sorted(faults, key=lambda f: f.time_ms):
            self._push(fe.time_ms, _EV_FAULT, fe)
        for cid in sorted(self.clients):
            self._push(0.0, _EV_CLIENT_START, cid)

    # -- construction helpers --

    def _derive_rng(self, label: str) -> random.Random:
        digest = hashlib.sha256(f"{self.seed}:{label}".encode()).digest()
        return random.Random(int.from_bytes(digest[:8], "big"))

    def _spawn_node(self, node_id: NodeId) -> None:
        state = NodeState(node_id, self.ground, self.config)
        if node_id in self.behaviors:
            state.behavior = self.behaviors[node_id]
        self.nodes[node_id] = state

    def _underlay_changes(self) -> List[Change]:
        """Diff overlay link usability against the current ground view."""
        out: List[Change] = []
        homing = self.topology.as_homing
        for spec in self.topology.links:
            usable = self.underlay.link_usable(
                homing.get(spec.a, ()), homing.get(spec.b, ()), self.bans)
            if usable != self.ground.link_is_up(spec.a, spec.b):
                if usable:
                    out.append(Change.link_up(spec.a, spec.b))
                else:
                    out.append(Change.link_down(spec.a, spec.b))
        return out

    # -- bookkeeping --

    def _push(self, time_ms: float, kind: int, data: object) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (time_ms, self._seq, kind, data))

    def _count(self, key: str, n: int = 1) -> None:
        self.counters[key] = self.counters.get(key, 0) + n

    def trace(self, event: str, node: str, detail: str) -> None:
        if self.trace_enabled:
            self.trace_rows.append((self.now, event, node, detail))

    def set_timer(self, owner: tuple, timer_id: tuple, delay_ms: float,
                  data: object = None) -> None:
        key = (owner, timer_id)
        gen = self._timer_gen.get(key, 0) + 1
        self._timer_gen[key] = gen
        self._push(self.now + delay_ms, _EV_TIMER, (owner, timer_id, gen, data))

    def cancel_timer(self, owner: tuple, timer_id: tuple) -> None:
        key = (owner, timer_id)
        self._timer_gen[key] = self._timer_gen.get(key, 0) + 1

    def _retire_node(self, node_id: NodeId) -> None:
        state = self.nodes.pop(node_id, None)
        if state is not None:
            for k, v in state.counters.items():
                self.retired_counters[k] = self.retired_counters.get(k, 0) + v
        # orphan every timer the dead process owned
        owner = ("n", node_id)
        for key in list(self._timer_gen):
            if key[0] == owner:
                self._timer_gen[key] += 1

    def node_counters(self) -> Dict[str, int]:
        merged = dict(self.retired_counters)
        for state in self.nodes.values():
            for k, v in state.counters.items():
                merged[k] = merged.get(k, 0) + v
        return merged

    # -- client operations --

    def client_send(self, src_client: str, dst_client: str, body: bytes,
                    service: ServiceClass, priority: int = 0,
                    deadline_ms: Optional[float] = None) -> bool:
        src_node = self.topology.attachments[src_client]
        dst_node = self.topology.attachments[dst_client]
        state = self.nodes.get(src_node)
        if state is None or not self.ground.node_is_up(src_node):
            self._count("send_node_down")
            return False
        payload = pack_client(dst_client, src_client, body)
        try:
            fx = state.client_send(dst_node, payload, service, self.now,
                                   deadline_ms=deadline_ms, priority=priority)
        except NoPath:
            self._count("send_no_path")
            return False
        self._process_effects(src_node, fx)
        return True

    def raw_send(self, src_client: str, dst_client: str, body: bytes) -> None:
        key = tuple(sorted((src_client, dst_client)))
        link = self.raw_links.get(key)
        if link is None:
            raise TopologyError(f"no raw link between {src_client} and {dst_client}")
        dirn = self.raw_dirs[(src_client, dst_client)]
        latency = 0.0
        loss_pass = 1.0
        bw = None
        up = True
        for a, b in zip(link.path, link.path[1:]):
            spec = self.topology.link(a, b)
            latency += spec.latency_ms
            loss_pass *= 1.0 - self.ground.loss(a, b)
            bw = spec.bw_mbps if bw is None else min(bw, spec.bw_mbps)
            if not self.ground.link_is_up(a, b):
                up = False
        if link.as_pair is not None and not self._as_pair_usable(link.as_pair):
            up = False
        size = len(body) + link.overhead_bytes
        ser = size * 8.0 / (bw * 1000.0)
        depart = max(self.now, dirn.busy_until)
        dirn.busy_until = depart + ser
        self._count("raw_tx")
        if not up:
            self._count("raw_down_drop")
            self.trace("raw_drop", src_client, "path_down")
            return
        if dirn.rng.random() < 1.0 - loss_pass:
            self._count("raw_lost")
            self.trace("raw_drop", src_client, "loss")
            return
        self._push(depart + ser + latency, _EV_RAW_ARRIVAL,
                   (src_client, dst_client, body, tuple(link.path)))

    def _as_pair_usable(self, pair: Tuple[int, int]) -> bool:
        if self.underlay is None:
            return True
        return self.underlay.reachable(pair[0], pair[1], self.bans)

    def rtt_hint(self, src_client: str, dst_client: str) -> float:
        a = self.topology.attachments[src_client]
        b = self.topology.attachments[dst_client]
        try:
            return 2.0 * shortest_path(self.ground, a, b).total_latency_ms
        except (NoPath, TopologyError):
            return self.config.default_rtt_ms

    def raw_rtt_hint(self, src_client: str, dst_client: str) -> float:
        key = tuple(sorted((src_client, dst_client)))
        link = self.raw_links.get(key)
        if link is None:
            return self.config.default_rtt_ms
        latency = sum(self.topology.link(a, b).latency_ms
                      for a, b in zip(link.path, link.path[1:]))
        return 2.0 * latency

    # -- effect processing --

    def _process_effects(self, node_id: NodeId, effects: List[object]) -> None:
        for eff in effects:
            if isinstance(eff, Transmit):
                self._kick(node_id, eff.neighbor)
            elif isinstance(eff, Deliver):
                self._deliver(node_id, eff)
            elif isinstance(eff, SetTimer):
                self.set_timer(("n", node_id), eff.timer_id, eff.delay_ms, eff.data)
            elif isinstance(eff, CancelTimer):
                self.cancel_timer(("n", node_id), eff.timer_id)
            elif isinstance(eff, Drop):
                self._count(f"drop_{eff.reason}")
                self.trace("drop", node_id, eff.reason)
            elif isinstance(eff, ClientError):
                self._client_error(node_id, eff)

    def _deliver(self, node_id: NodeId, eff: Deliver) -> None:
        try:
            dst_client, src_client, body = unpack_client(eff.payload)
        except ValueError:
            self._count("deliver_malformed")
            return
        if self.topology.attachments.get(dst_client) != node_id:
            self._count("deliver_misrouted")
            return
        client = self.clients.get(dst_client)
        if client is None:
            self._count("deliver_no_client")
            return
        self._count("delivered")
        self.trace("deliver", node_id, f"{src_client}->{dst_client}")
        client.on_deliver(src_client, body, eff.wire_bytes, self.api)

    def _client_error(self, node_id: NodeId, eff: ClientError) -> None:
        self._count(f"client_error_{eff.reason}")
        if eff.frame is None:
            return
        try:
            dst_client, src_client, body = unpack_client(eff.frame.payload)
        except ValueError:
            return
        client = self.clients.get(src_client)
        if client is not None:
            self.trace("client_error", node_id, f"{eff.reason}:{dst_client}")
            client.on_error(eff.reason, dst_client, body, self.api)

    # -- overlay link service --

    def _kick(self, a: NodeId, b: NodeId) -> None:
        """Start serializing the next frame on direction a->b if idle."""
        dirn = self.link_dirs.get((a, b))
        state = self.nodes.get(a)
        if dirn is None or state is None or dirn.inflight:
            return
        if not self.ground.link_is_up(a, b):
            return            # queue is purged once the view change propagates
        frame, fx = state.scheduler_dequeue(b, self.now)
        if fx:
            self._process_effects(a, fx)
        if frame is None:
            return
        wrap_fx: List[object] = []
        wire = state.wrap_for_link(frame, b, self.now, wrap_fx)
        if wrap_fx:
            self._process_effects(a, wrap_fx)
        spec = self.topology.link(a, b)
        ser = wire.wire_size() * 8.0 / (spec.bw_mbps * 1000.0)
        dirn.inflight = True
        self._count("wire_tx")
        self._push(self.now + ser, _EV_TX_DONE, (a, b))
        loss = self.ground.loss(a, b)
        if loss > 0.0 and dirn.rng.random() < loss:
            self._count("wire_lost")
            self.trace("wire_loss", a, f"->{b}")
            return
        arrive = self.now + ser + spec.latency_ms + self.config.hop_processing_ms
        epoch = self.link_epoch[link_key(a, b)]
        self._push(arrive, _EV_ARRIVAL, (a, b, wire, epoch))

    # -- faults --

    def _apply_fault(self, fe: FaultEvent) -> None:
        changes: List[Change] = []
        if fe.change is not None:
            changes.append(fe.change)
        if fe.hijack is not None or fe.restore is not None:
            bans = set(self.bans)
            if fe.hijack is not None:
                bans.add(tuple(fe.hijack))
                self.trace("hijack", "-", f"{fe.hijack[0]}>{fe.hijack[1]}")
            if fe.restore is not None:
                bans.discard(tuple(fe.restore))
                self.trace("hijack_lifted", "-", f"{fe.restore[0]}>{fe.restore[1]}")
            self.bans = frozenset(bans)
            if self.underlay is not None:
                changes.extend(self._underlay_changes())
        for change in changes:
            self._apply_change(change)
        self._view_serial += 1
        self._push(self.now + self.config.view_propagation_ms, _EV_VIEW,
                   (self._view_serial, self.ground))

    def _apply_change(self, change: Change) -> None:
        label = change.node if change.node is not None else "-".join(change.link)
        self.trace("fault", label, change.kind)
        before = self.ground
        self.ground = apply_fault(self.ground, change)
        if change.kind == "link_down":
            key = change.link
            if key in self.link_epoch and before.link_is_up(*key):
                self.link_epoch[key] += 1
        elif change.kind == "node_down":
            node = change.node
            for nbr in self.topology.neighbors(node):
                key = link_key(node, nbr)
                if before.link_is_up(node, nbr):
                    self.link_epoch[key] += 1
            self._retire_node(node)
        elif change.kind == "node_up":
            # a restarted daemon comes back empty, with the current ground view
            if change.node not in self.nodes:
                self._spawn_node(change.node)
            self._node_view_serial[change.node] = self._view_serial + 1

    def _adopt_view(self, serial: int, view: TopologyView) -> None:
        for node_id in sorted(self.nodes):
            if self._node_view_serial.get(node_id, 0) >= serial:
                continue
            self._node_view_serial[node_id] = serial
            state = self.nodes[node_id]
            self._reset_restarted_links(state, view)
            fx = state.recompute_routes(view, self.now)
            if fx:
                self._process_effects(node_id, fx)

    def _reset_restarted_links(self, state: NodeState, view: TopologyView) -> None:
        """Forget per-link seq state across a down/up cycle of the link."""
        for nbr in self.topology.neighbors(state.id):
            was_up = state.view.link_is_up(state.id, nbr)
            now_up = view.link_is_up(state.id, nbr)
            if now_up and not was_up:
                state.hop_tx.pop(nbr, None)
                state.hop_rx.pop(nbr, None)
                self.cancel_timer(("n", state.id), ("ann", nbr))
                self.cancel_timer(("n", state.id), ("nack", nbr))

    # -- main loop --

    def run(self, horizon_ms: float) -> None:
        while self._heap and self.running:
            if self._heap[0][0] > horizon_ms:
                break
            time_ms, _, kind, data = heapq.heappop(self._heap)
            self.pops += 1
            if self.pops > self.config.event_cap:
                raise EngineOverrun(f"exceeded {self.config.event_cap} events")
            self.now = time_ms
            if kind == _EV_CLIENT_START:
                self.clients[data].on_start(self.api)
            elif kind == _EV_ARRIVAL:
                self._on_arrival(*data)
            elif kind == _EV_TX_DONE:
                a, b = data
                dirn = self.link_dirs[(a, b)]
                dirn.inflight = False
                self._kick(a, b)
            elif kind == _EV_TIMER:
                self._on_timer(*data)
            elif kind == _EV_FAULT:
                self._apply_fault(data)
            elif kind == _EV_VIEW:
                self._adopt_view(*data)
            elif kind == _EV_RAW_ARRIVAL:
                self._on_raw_arrival(*data)

    def _on_arrival(self, a: NodeId, b: NodeId, wire: Frame, epoch: int) -> None:
        if epoch != self.link_epoch.get(link_key(a, b)):
            self._count("inflight_lost")
            return
        if not self.ground.link_is_up(a, b):
            self._count("inflight_lost")
            return
        state = self.nodes.get(b)
        if state is None:
            self._count("inflight_lost")
            return
        fx = state.handle_frame(a, wire, self.now)
        self._process_effects(b, fx)

    def _on_timer(self, owner: tuple, timer_id: tuple, gen: int, data: object) -> None:
        if self._timer_gen.get((owner, timer_id), 0) != gen:
            return
        scope, name = owner
        if scope == "n":
            state = self.nodes.get(name)
            if state is None:
                return
            fx = state.handle_timer(timer_id, data, self.now)
            self._process_effects(name, fx)
        else:
            client = self.clients.get(name)
            if client is not None:
                client.on_timer(timer_id, data, self.api)

    def _on_raw_arrival(self, src_client: str, dst_client: str, body: bytes,
                        path: Tuple[NodeId, ...]) -> None:
        for a, b in zip(path, path[1:]):
            if not self.ground.link_is_up(a, b):
                self._count("raw_inflight_lost")
                return
        client = self.clients.get(dst_client)
        if client is None:
            self._count("raw_no_client")
            return
        self._count("raw_delivered")
        client.on_raw(src_client, body, self.api)

    # -- reporting --

    def export_trace(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time_ms", "event", "node", "detail"])
            for row in self.trace_rows:
                writer.writerow([f"{row[0]:.6f}", row[1], row[2], row[3]])

    def summary_block(self) -> str:
        lines = []
        merged = dict(self.counters)
        for k, v in self.node_counters().items():
            merged[f"node_{k}"] = merged.get(f"node_{k}", 0) + v
        for key in sorted(merged):
            lines.append(f"{key}={merged[key]}")
        return "\n".join(lines)
