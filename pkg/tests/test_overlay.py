from dataclasses import replace

import pytest

from helpers import build_view
from spon.config import Config
from spon.frames import (
    Frame,
    KIND_ACK,
    KIND_DATA,
    KIND_HOP_DATA,
    KIND_HOP_NACK,
    SERVICE_PRI,
    SERVICE_REL,
)
from spon.overlay import (
    PRI,
    REL,
    Behavior,
    CancelTimer,
    ClientError,
    Deliver,
    Drop,
    NodeState,
    OutPort,
    PayloadTooLarge,
    ServiceClass,
    SetTimer,
    Transmit,
)
from spon.topology import Change, NoPath, TopologyView, apply_fault, load_topology

CHAIN = "/root/pkg/src/spon/data/chain.topo"


def chain_view():
    return TopologyView.all_up(load_topology(CHAIN))


def node(node_id, view=None, config=Config()):
    return NodeState(node_id, view or chain_view(), config)


def transmits(effects):
    return [e for e in effects if isinstance(e, Transmit)]


def drops(effects, reason=None):
    return [e for e in effects if isinstance(e, Drop)
            and (reason is None or e.reason == reason)]


# --- client_send ---------------------------------------------------------------

def test_send_two_disjoint_routes():
    n1 = node("1")
    fx = n1.client_send("5", b"x", ServiceClass(PRI, 2), now=0.0)
    tx = transmits(fx)
    assert sorted(t.neighbor for t in tx) == ["12", "9"]
    frame = tx[0].frame
    assert frame.routes == (("1", "12", "13", "14", "5"),
                            ("1", "9", "10", "11", "5"))
    assert frame.k == 2
    assert frame.service == SERVICE_PRI


def test_send_flooding_hits_every_up_neighbor():
    n1 = node("1")
    fx = n1.client_send("5", b"x", ServiceClass(PRI, 0), now=0.0)
    assert sorted(t.neighbor for t in transmits(fx)) == ["12", "2", "6", "9"]


def test_send_loopback_delivers_directly():
    n1 = node("1")
    fx = n1.client_send("1", b"self", ServiceClass(PRI, 1), now=0.0)
    assert len(fx) == 1 and isinstance(fx[0], Deliver)
    assert fx[0].payload == b"self"


def test_send_rejects_oversized_payload():
    n1 = node("1", config=Config(max_payload_bytes=4))
    with pytest.raises(PayloadTooLarge):
        n1.client_send("5", b"12345", ServiceClass(PRI, 1), now=0.0)


def test_send_no_route_raises():
    view = chain_view()
    for a, b in [("1", "12"), ("1", "9"), ("1", "6"), ("1", "2")]:
        view = apply_fault(view, Change.link_down(a, b))
    n1 = node("1", view)
    with pytest.raises(NoPath):
        n1.client_send("5", b"x", ServiceClass(PRI, 1), now=0.0)
    with pytest.raises(NoPath):
        n1.client_send("5", b"x", ServiceClass(PRI, 0), now=0.0)


def test_seq_increases_per_dst_and_service():
    n1 = node("1")
    seqs = []
    for _ in range(3):
        fx = n1.client_send("5", b"x", ServiceClass(PRI, 1), now=0.0)
        seqs.append(transmits(fx)[0].frame.seq)
    assert seqs == [1, 2, 3]
    other = transmits(n1.client_send("7", b"x", ServiceClass(PRI, 1), now=0.0))
    assert other[0].frame.seq == 1
    rel = transmits(n1.client_send("5", b"x", ServiceClass(REL, 1), now=0.0))
    assert rel[0].frame.seq == 1


def test_pri_deadline_defaults_to_path_multiple():
    n1 = node("1")
    fx = n1.client_send("5", b"x", ServiceClass(PRI, 1), now=100.0)
    frame = transmits(fx)[0].frame
    assert frame.deadline_us == int((100.0 + 10 * 16.0) * 1000)


# --- forwarding ------------------------------------------------------------------

def routed_frame(src, dst, route, service=SERVICE_PRI, seq=1, payload=b"p"):
    return Frame(kind=KIND_DATA, service=service, k=1, src=src, dst=dst,
                 seq=seq, routes=(route,), payload=payload)


def test_forward_follows_stamped_route():
    n12 = node("12")
    frame = routed_frame("1", "5", ("1", "12", "13", "14", "5"))
    fx = n12.handle_frame("1", frame, now=1.0)
    tx = transmits(fx)
    assert [t.neighbor for t in tx] == ["13"]


def test_forward_reroutes_around_dead_next_hop():
    view = apply_fault(chain_view(), Change.node_down("13"))
    n12 = node("12", view)
    frame = routed_frame("1", "5", ("1", "12", "13", "14", "5"))
    fx = n12.handle_frame("1", frame, now=1.0)
    tx = transmits(fx)
    assert len(tx) == 1
    # restamped from 12: only way onward is back through 1
    assert tx[0].frame.routes[0][0] == "12"
    assert tx[0].frame.routes[0][-1] == "5"


def test_forward_rel_parks_when_no_route():
    view = chain_view()
    for a, b in [("12", "13"), ("1", "12")]:
        view = apply_fault(view, Change.link_down(a, b))
    n12 = node("12", view)
    frame = routed_frame("1", "5", ("1", "12", "13", "14", "5"),
                         service=SERVICE_REL)
    fx = n12.handle_frame("1", frame, now=1.0)
    assert not transmits(fx)
    assert len(n12.parked) == 1
    # the link comes back: parked frame is restamped and sent
    fx = n12.recompute_routes(chain_view(), now=2.0)
    assert len(transmits(fx)) == 1
    assert not n12.parked


def test_delivery_and_duplicate_suppression():
    n5 = node("5")
    frame = routed_frame("1", "5", ("1", "12", "13", "14", "5"))
    fx = n5.handle_frame("14", frame, now=2.0)
    delivered = [e for e in fx if isinstance(e, Deliver)]
    assert len(delivered) == 1
    assert delivered[0].payload == b"p"
    dup = n5.handle_frame("11", replace(frame, routes=(("1", "9", "10", "11", "5"),)),
                          now=3.0)
    assert not [e for e in dup if isinstance(e, Deliver)]
    assert drops(dup, "duplicate")


def test_flood_delivers_once_and_respreads():
    n13 = node("13")
    flood = Frame(kind=KIND_DATA, service=SERVICE_PRI, k=0, src="1", dst="5",
                  seq=4, payload=b"f")
    fx = n13.handle_frame("12", flood, now=1.0)
    assert [t.neighbor for t in transmits(fx)] == ["14"]
    again = n13.handle_frame("14", flood, now=2.0)
    assert not transmits(again)
    assert drops(again, "duplicate")


def test_flood_total_transmissions_bounded():
    view = chain_view()
    topo = view.base
    nodes = {n: node(n, view) for n in topo.nodes}
    src = nodes["1"]
    fx = src.client_send("5", b"x", ServiceClass(PRI, 0), now=0.0)
    pending = [("1", t.neighbor, t.frame) for t in transmits(fx)]
    sends = len(pending)
    deliveries = 0
    while pending:
        frm, to, frame = pending.pop(0)
        fx = nodes[to].handle_frame(frm, frame, now=1.0)
        for eff in fx:
            if isinstance(eff, Transmit):
                pending.append((to, eff.neighbor, eff.frame))
                sends += 1
            elif isinstance(eff, Deliver):
                deliveries += 1
    assert deliveries == 1
    assert sends <= 2 * len(topo.links)


# --- scheduler -------------------------------------------------------------------

def pri_frame(src, seq, priority=0, deadline_us=0):
    return Frame(kind=KIND_DATA, service=SERVICE_PRI, k=0, src=src, dst="z",
                 seq=seq, priority=priority, deadline_us=deadline_us)


def test_round_robin_alternates_sources():
    port = OutPort(capacity=2000, control_capacity=10)
    for i in range(1000):
        port.enqueue(pri_frame("A", i))
    for i in range(10):
        port.enqueue(pri_frame("B", i))
    order = []
    while True:
        frame, _ = port.dequeue(0.0)
        if frame is None:
            break
        order.append(frame.src)
    assert order[:20] == ["A", "B"] * 10
    assert order[20:] == ["A"] * 990


def test_round_robin_share_within_one():
    port = OutPort(capacity=5000, control_capacity=10)
    sources = ["s1", "s2", "s3"]
    for src in sources:
        for i in range(200):
            port.enqueue(pri_frame(src, i))
    counts = {s: 0 for s in sources}
    for _ in range(150):
        frame, _ = port.dequeue(0.0)
        counts[frame.src] += 1
    assert max(counts.values()) - min(counts.values()) <= 1


def test_priority_levels_within_partition():
    port = OutPort(capacity=100, control_capacity=10)
    port.enqueue(pri_frame("A", 1, priority=0))
    port.enqueue(pri_frame("A", 2, priority=2))
    port.enqueue(pri_frame("A", 3, priority=0))
    got = [port.dequeue(0.0)[0].seq for _ in range(3)]
    assert got == [2, 1, 3]


def test_buffer_full_drops_only_own_partition():
    n13 = node("13", config=Config(buffer_capacity=2))
    f1 = routed_frame("1", "5", ("1", "12", "13", "14", "5"), seq=1)
    f2 = routed_frame("1", "5", ("1", "12", "13", "14", "5"), seq=2)
    f3 = routed_frame("1", "5", ("1", "12", "13", "14", "5"), seq=3)
    other = routed_frame("9", "5", ("9", "12", "13", "14", "5"), seq=1)
    assert transmits(n13.handle_frame("12", f1, 0.0))
    assert transmits(n13.handle_frame("12", f2, 0.0))
    fx = n13.handle_frame("12", f3, 0.0)
    assert drops(fx, "buffer_full")
    fx = n13.handle_frame("12", other, 0.0)
    assert transmits(fx)          # different source partition still has room


def test_expired_priority_dropped_at_dequeue():
    n12 = node("12")
    live = routed_frame("1", "5", ("1", "12", "13", "14", "5"), seq=1)
    stale = replace(routed_frame("1", "5", ("1", "12", "13", "14", "5"), seq=2),
                    deadline_us=5_000)
    n12.handle_frame("1", stale, 0.0)
    n12.handle_frame("1", live, 0.0)
    frame, fx = n12.scheduler_dequeue("13", now=6.0)
    assert frame.seq == 1
    assert drops(fx, "deadline_expired")


# --- hop-by-hop recovery ----------------------------------------------------------

def pair():
    view = build_view("AB", [("A", "B", 2.0)])
    return node("A", view), node("B", view)


def wire_frames(sender, neighbor, count, start_payload=0):
    """Wrap `count` data frames exactly like the engine would."""
    out = []
    for i in range(count):
        inner = Frame(kind=KIND_DATA, service=SERVICE_PRI, k=1, src="A", dst="B",
                      seq=i + 1, routes=(("A", "B"),),
                      payload=bytes([start_payload + i]))
        fx = []
        out.append(sender.wrap_for_link(inner, neighbor, now=float(i), out=fx))
    return out


def test_gap_triggers_nack_and_recovery():
    a, b = pair()
    wires = wire_frames(a, "B", 3)
    assert [w.seq for w in wires] == [0, 1, 2]

    fx0 = b.handle_frame("A", wires[0], 0.0)
    assert [e for e in fx0 if isinstance(e, Deliver)]
    # wire 1 lost; wire 2 arrives and exposes the gap
    fx2 = b.handle_frame("A", wires[2], 1.0)
    timers = [e for e in fx2 if isinstance(e, SetTimer) and e.timer_id == ("nack", "A")]
    assert timers and timers[0].delay_ms == 1.0
    assert [e for e in fx2 if isinstance(e, Deliver)]

    fx = b.handle_timer(("nack", "A"), None, 2.0)
    nacks = transmits(fx)
    assert nacks and nacks[0].frame.kind == KIND_HOP_NACK
    assert nacks[0].frame.payload != b""

    fx = a.handle_frame("B", nacks[0].frame, 2.5)
    retx = transmits(fx)
    assert retx and retx[0].frame.seq == 1 and retx[0].frame.kind == KIND_HOP_DATA

    fx = b.handle_frame("A", retx[0].frame, 3.0)
    assert [e for e in fx if isinstance(e, Deliver)]
    assert not b.hop_rx["A"].missing
    # replaying the recovered frame again is a duplicate
    fx = b.handle_frame("A", retx[0].frame, 3.5)
    assert drops(fx, "hop_duplicate")


def test_announce_detects_trailing_loss():
    a, b = pair()
    wires = wire_frames(a, "B", 1)
    # the only frame is lost; idle-link announce must expose it
    fx = a.handle_timer(("ann", "B"), None, 2.0)
    ann = transmits(fx)
    assert ann and ann[0].frame.kind == KIND_HOP_NACK and ann[0].frame.payload == b""
    assert ann[0].frame.seq == 0

    fx = b.handle_frame("A", ann[0].frame, 4.0)
    nt = [e for e in fx if isinstance(e, SetTimer) and e.timer_id == ("nack", "A")]
    assert nt
    fx = b.handle_timer(("nack", "A"), None, 5.0)
    nack = transmits(fx)[0].frame
    fx = a.handle_frame("B", nack, 5.5)
    retx = transmits(fx)
    assert retx and retx[0].frame.seq == 0
    fx = b.handle_frame("A", retx[0].frame, 6.0)
    assert [e for e in fx if isinstance(e, Deliver)]


def test_announce_backoff_stops():
    a, _b = pair()
    wire_frames(a, "B", 1)
    fx = a.handle_timer(("ann", "B"), None, 2.0)
    rearms = [e for e in fx if isinstance(e, SetTimer)]
    assert rearms and rearms[0].delay_ms == 4.0      # doubled
    for i in range(2, 7):
        fx = a.handle_timer(("ann", "B"), None, 2.0 + i)
    assert not [e for e in fx if isinstance(e, SetTimer)]


def test_evicted_cache_entry_yields_empty_fill():
    cfg = Config(hop_cache_frames=3)
    view = build_view("AB", [("A", "B", 2.0)])
    a = NodeState("A", view, cfg)
    b = NodeState("B", view, cfg)
    wires = wire_frames(a, "B", 4)      # cache keeps seqs 1..3, evicting 0
    # only the last wire frame arrives; 0..2 are marked missing
    fx = b.handle_frame("A", wires[3], 1.0)
    assert set(b.hop_rx["A"].missing) == {0, 1, 2}
    nack = Frame(kind=KIND_HOP_NACK, src="B", dst="A",
                 payload=b"\x00" * 7 + b"\x00")      # request seq 0
    fx = a.handle_frame("B", nack, 10.0)
    assert drops(fx, "hop_unrecoverable")
    tombs = transmits(fx)
    assert len(tombs) == 1
    tomb = tombs[0].frame
    assert tomb.kind == KIND_HOP_DATA and tomb.inner is None and tomb.seq == 0
    # the fill closes the hole so the neighbor stops asking for seq 0
    fx = b.handle_frame("A", tomb, 10.5)
    assert not [e for e in fx if isinstance(e, Deliver)]
    assert set(b.hop_rx["A"].missing) == {1, 2}


# --- reliable service ---------------------------------------------------------------

def test_rel_ack_roundtrip_cancels_timer():
    view = chain_view()
    n1, n5 = node("1", view), node("5", view)
    fx = n1.client_send("5", b"m", ServiceClass(REL, 1), now=0.0)
    assert ("5", 1) in n1.rel_pending
    timer = [e for e in fx if isinstance(e, SetTimer)][0]
    assert timer.timer_id == ("rel", "5", 1)
    assert timer.delay_ms == 2 * 32.0
    data = transmits(fx)[0].frame

    fx5 = n5.handle_frame("14", data, 16.0)
    acks = [t.frame for t in transmits(fx5) if t.frame.kind == KIND_ACK]
    assert acks and acks[0].routes == (("5", "14", "13", "12", "1"),)

    fx1 = n1.handle_frame("12", acks[0], 32.0)
    assert [e for e in fx1 if isinstance(e, CancelTimer)]
    assert not n1.rel_pending


def test_rel_duplicate_data_reacked_via_rotation():
    view = chain_view()
    n5 = node("5", view)
    data = routed_frame("1", "5", ("1", "12", "13", "14", "5"),
                        service=SERVICE_REL)
    first = n5.handle_frame("14", data, 0.0)
    assert [t for t in transmits(first) if t.frame.kind == KIND_ACK]
    dup = n5.handle_frame("14", data, 10.0)
    re_acks = [t for t in transmits(dup) if t.frame.kind == KIND_ACK]
    assert re_acks       # sender clearly missed the first ack


def test_rel_retransmit_rotates_routes_then_floods():
    n1 = node("1")
    n1.client_send("5", b"m", ServiceClass(REL, 1), now=0.0)
    fx = n1.handle_timer(("rel", "5", 1), None, 100.0)
    tx1 = transmits(fx)
    assert len(tx1) == 1 and tx1[0].neighbor == "12"
    fx = n1.handle_timer(("rel", "5", 1), None, 200.0)
    tx2 = transmits(fx)
    assert len(tx2) == 1 and tx2[0].neighbor == "9"   # rotated to 2nd path
    fx = n1.handle_timer(("rel", "5", 1), None, 400.0)
    tx3 = transmits(fx)
    assert sorted(t.neighbor for t in tx3) == ["12", "2", "6", "9"]   # flood turn
    # rto doubles every attempt
    timers = [e for e in fx if isinstance(e, SetTimer) and e.timer_id[0] == "rel"]
    assert timers[0].delay_ms == 2 * 32.0 * 2 ** 3


def test_rel_gives_up_after_max_retries():
    cfg = Config(rel_max_retries=2)
    n1 = NodeState("1", chain_view(), cfg)
    n1.client_send("5", b"m", ServiceClass(REL, 1), now=0.0)
    n1.handle_timer(("rel", "5", 1), None, 1.0)
    n1.handle_timer(("rel", "5", 1), None, 2.0)
    fx = n1.handle_timer(("rel", "5", 1), None, 3.0)
    errors = [e for e in fx if isinstance(e, ClientError)]
    assert errors and errors[0].reason == "retries_exhausted"
    assert not n1.rel_pending
    assert not transmits(fx)


# --- adversaries ---------------------------------------------------------------------

def test_drop_all_behavior_blackholes():
    n13 = node("13")
    n13.behavior = Behavior.drop_all()
    frame = routed_frame("1", "5", ("1", "12", "13", "14", "5"))
    fx = n13.handle_frame("12", frame, 0.0)
    assert not transmits(fx)
    assert drops(fx, "adversarial")


def test_drop_flow_is_selective():
    n13 = node("13")
    n13.behavior = Behavior.drop_flow("1", "5")
    hit = routed_frame("1", "5", ("1", "12", "13", "14", "5"))
    miss = routed_frame("9", "5", ("9", "12", "13", "14", "5"))
    assert drops(n13.handle_frame("12", hit, 0.0), "adversarial")
    assert transmits(n13.handle_frame("12", miss, 0.0))


def test_delay_behavior_defers_processing():
    n13 = node("13")
    n13.behavior = Behavior.delay(50.0)
    frame = routed_frame("1", "5", ("1", "12", "13", "14", "5"))
    fx = n13.handle_frame("12", frame, 0.0)
    assert not transmits(fx)
    timers = [e for e in fx if isinstance(e, SetTimer)]
    assert timers and timers[0].delay_ms == 50.0
    fx = n13.handle_timer(timers[0].timer_id, timers[0].data, 50.0)
    assert transmits(fx)


# --- view updates --------------------------------------------------------------------

def test_recompute_purges_flood_copies_on_dead_link():
    n1 = node("1")
    n1.client_send("5", b"x", ServiceClass(PRI, 0), now=0.0)
    assert n1.port_pending("12")
    down = apply_fault(chain_view(), Change.link_down("1", "12"))
    fx = n1.recompute_routes(down, now=1.0)
    assert drops(fx, "link_down")
    assert not n1.port_pending("12")


def test_recompute_restamps_routed_frames():
    n1 = node("1")
    n1.client_send("5", b"x", ServiceClass(PRI, 1), now=0.0)
    assert n1.port_pending("12")
    down = apply_fault(chain_view(), Change.link_down("1", "12"))
    fx = n1.recompute_routes(down, now=1.0)
    tx = transmits(fx)
    assert len(tx) == 1 and tx[0].neighbor == "9"
    assert tx[0].frame.routes[0] == ("1", "9", "10", "11", "5")
