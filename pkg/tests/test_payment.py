import hashlib

import pytest

from spon.netsim import Client, Engine, FaultEvent, RawLink
from spon.overlay import PRI, REL, ServiceClass
from spon.payment import (
    DirectTransport,
    FULFILL,
    HOLD_EXECUTED,
    HOLD_VOID,
    IlpNode,
    IlpPacket,
    Ledger,
    LedgerError,
    OverlayTransport,
    PREPARE,
    PacketError,
    PeerLink,
    R_EXPIRED,
    R_NO_HOLD,
    R_WRONG_CONDITION,
    REJECT,
    STREAM_COMPLETE,
    STREAM_FAILED,
    TxLog,
    condition_of,
    decode_packet,
    derive_preimage,
    settle_check,
)
from spon.topology import Change, load_topology, parse_topology

CHAIN = "/root/pkg/src/spon/data/chain.topo"


# --- packet encoding ---------------------------------------------------------------

PID = bytes(range(16))


def test_packet_roundtrip_all_kinds():
    prep = IlpPacket(PREPARE, PID, 7, amount=500, expiry_us=123456,
                     condition=b"\x11" * 32, address="g.dest.account",
                     data=b"pad")
    ful = IlpPacket(FULFILL, PID, 7, fulfillment=b"\x22" * 32)
    rej = IlpPacket(REJECT, PID, 7, code=R_EXPIRED)
    for pkt in (prep, ful, rej):
        back = decode_packet(pkt.encode())
        assert back == pkt


def test_packet_golden_bytes():
    pkt = IlpPacket(FULFILL, PID, 1, fulfillment=b"\xab" * 32)
    raw = pkt.encode()
    assert raw == (b"\x02" + PID + b"\x00\x00\x00\x01"
                   + b"\x00" * 8 + b"\x00" * 8 + b"\xab" * 32 + b"\x00\x00")


def test_packet_rejects_malformed():
    with pytest.raises(PacketError):
        decode_packet(b"")
    with pytest.raises(PacketError):
        decode_packet(b"\x09" + b"\x00" * 40)
    good = IlpPacket(PREPARE, PID, 1, amount=1, condition=b"\x00" * 32,
                     address="g.x").encode()
    with pytest.raises(PacketError):
        decode_packet(good[:-1])
    with pytest.raises(PacketError):
        decode_packet(good + b"\x00")
    with pytest.raises(PacketError):
        IlpPacket(PREPARE, b"short", 1, condition=b"\x00" * 32).encode()


def test_preimage_derivation_is_stable():
    pre = derive_preimage(b"secret", PID, 3)
    assert pre == hashlib.sha256(b"secret" + PID + b"\x00\x00\x00\x03").digest()
    assert condition_of(pre) == hashlib.sha256(pre).digest()


# --- ledger ------------------------------------------------------------------------

def make_ledger():
    return Ledger("L", {"a": 1000, "b": 0})


def test_hold_lifecycle_moves_value_once():
    led = make_ledger()
    pre = derive_preimage(b"s", PID, 0)
    led.place_hold("h0", "g", "a", "b", 300, condition_of(pre), 100.0, 0.0)
    assert led.balance("a") == 700 and led.balance("b") == 0
    assert led.escrow_total() == 300 and led.conserved()
    assert led.execute_hold("h0", pre, 50.0)
    assert led.balance("b") == 300 and led.escrow_total() == 0
    # idempotent: a replay neither fails nor double-credits
    assert led.execute_hold("h0", pre, 60.0)
    assert led.balance("b") == 300
    assert led.conserved()


def test_hold_rejects_wrong_preimage_and_expiry():
    led = make_ledger()
    pre = derive_preimage(b"s", PID, 0)
    led.place_hold("h0", "g", "a", "b", 300, condition_of(pre), 100.0, 0.0)
    assert not led.execute_hold("h0", b"\x00" * 32, 10.0)
    assert led.hold_state("h0") == "active"
    assert not led.execute_hold("h0", pre, 101.0)   # too late: voided
    assert led.hold_state("h0") == HOLD_VOID
    assert led.balance("a") == 1000
    assert led.conserved()


def test_hold_insufficient_funds_and_duplicate_id():
    led = make_ledger()
    with pytest.raises(LedgerError):
        led.place_hold("h0", "g", "a", "b", 2000, b"\x00" * 32, 10.0, 0.0)
    led.place_hold("h1", "g", "a", "b", 100, b"\x00" * 32, 10.0, 0.0)
    with pytest.raises(LedgerError):
        led.place_hold("h1", "g", "a", "b", 100, b"\x00" * 32, 10.0, 0.0)


def test_sweep_voids_expired_only():
    led = make_ledger()
    led.place_hold("h0", "g0", "a", "b", 100, b"\x00" * 32, 10.0, 0.0)
    led.place_hold("h1", "g1", "a", "b", 100, b"\x00" * 32, 99.0, 0.0)
    assert led.sweep(50.0) == 1
    assert led.hold_state("h0") == HOLD_VOID
    assert led.hold_state("h1") == "active"


def test_find_active_matches_condition_and_amount():
    led = make_ledger()
    cond = condition_of(b"\x01" * 32)
    led.place_hold("g:0", "g", "a", "b", 100, cond, 100.0, 0.0)
    assert led.find_active("g", cond, 100, 1.0) == "g:0"
    assert led.find_active("g", cond, 101, 1.0) is None
    assert led.find_active("g", b"\x00" * 32, 50, 1.0) is None
    assert led.find_active("g", cond, 100, 200.0) is None   # expired


def test_quote_math():
    led = make_ledger()
    assert PeerLink("p", led, "a", "b", fee_ppm=10_000).quote(200) == 198
    assert PeerLink("p", led, "a", "b", rate_num=3, rate_den=2).quote(200) == 300
    assert PeerLink("p", led, "a", "b", rate_num=97, rate_den=100,
                    fee_ppm=5_000).quote(1000) == 966


# --- party wiring (no engine) ----------------------------------------------------------

class FakeApi:
    def __init__(self):
        self.now = 0.0
        self.sent = []          # (src, dst, body)
        self.timers = {}

    def send(self, src, dst, body, service, priority=0, deadline_ms=None):
        self.sent.append((src, dst, body))
        return True

    def raw_send(self, src, dst, body):
        self.sent.append((src, dst, body))

    def set_timer(self, cid, tid, delay, data=None):
        self.timers[(cid, tid)] = self.now + delay

    def cancel_timer(self, cid, tid):
        self.timers.pop((cid, tid), None)

    def rtt_hint(self, a, b):
        return 32.0

    def raw_rtt_hint(self, a, b):
        return 32.0

    def record(self, cid, key, value):
        pass

    def stop(self):
        pass


def three_party():
    """Sender cs -> connector cc -> receiver cr across two ledgers."""
    txlog = TxLog()
    l1 = Ledger("L1", {"cs": 10_000, "cc": 10_000})
    l2 = Ledger("L2", {"cc": 10_000, "cr": 0})
    svc = ServiceClass(PRI, 1)

    s = IlpNode("cs", "g.s", OverlayTransport(svc), txlog=txlog)
    c = IlpNode("cc", "g.c", OverlayTransport(svc), txlog=txlog)
    r = IlpNode("cr", "g.r", OverlayTransport(svc), secret=b"shh", txlog=txlog)

    s.add_link(PeerLink("cc", l1, "cs", "cc"))
    s.add_route("g.r", "cc")
    c.add_link(PeerLink("cs", l1, "cc", "cs"))
    c.add_link(PeerLink("cr", l2, "cc", "cr", fee_ppm=10_000))
    c.add_route("g.r", "cr")
    c.add_route("g.s", "cs")
    r.add_link(PeerLink("cc", l2, "cr", "cc"))
    r.add_route("g.s", "cc")
    return s, c, r, l1, l2, txlog


def pump(api, nodes, drop=None):
    """Deliver queued packets until quiescent.  `drop` filters (src, dst, raw)."""
    hops = 0
    while api.sent:
        src, dst, body = api.sent.pop(0)
        hops += 1
        if hops > 500:
            raise AssertionError("packet storm")
        if drop is not None and drop(src, dst, body):
            continue
        nodes[dst].handle_packet(src, body, api)
    return hops


def test_single_payment_end_to_end():
    s, c, r, l1, l2, txlog = three_party()
    api = FakeApi()
    nodes = {"cs": s, "cc": c, "cr": r}
    sid = s.start_stream(api, "g.r.accounts.main", b"shh", 200, 200)
    pump(api, nodes)
    sess = s.sessions[sid]
    assert sess.state == STREAM_COMPLETE
    assert sess.packets_fulfilled == 1
    assert l1.balance("cs") == 9_800 and l1.balance("cc") == 10_200
    assert l2.balance("cc") == 9_802 and l2.balance("cr") == 198
    report = settle_check([l1, l2], api.now, txlog)
    assert report.ok, report.problems
    assert report.fees_by_connector == {"cc": 2}


def test_stream_splits_and_clamps_last_packet():
    s, c, r, l1, l2, txlog = three_party()
    api = FakeApi()
    nodes = {"cs": s, "cc": c, "cr": r}
    sid = s.start_stream(api, "g.r.x", b"shh", 1050, 100)
    pump(api, nodes)
    sess = s.sessions[sid]
    assert sess.state == STREAM_COMPLETE
    assert sess.packets_fulfilled == 11
    assert l1.balance("cs") == 10_000 - 1050
    # per packet quote(100) = 99; the 50 tail's fee floors to zero
    assert l2.balance("cr") == 10 * 99 + 50
    assert settle_check([l1, l2], api.now, txlog).ok


def test_wrong_secret_rejects_without_value_movement():
    s, c, r, l1, l2, txlog = three_party()
    api = FakeApi()
    nodes = {"cs": s, "cc": c, "cr": r}
    sid = s.start_stream(api, "g.r.x", b"wrong", 200, 200)
    pump(api, nodes)
    assert s.sessions[sid].state == STREAM_FAILED
    assert r.counters.get("wrong_condition") == 1
    report = settle_check([l1, l2], api.now, txlog)
    assert report.ok
    assert l1.balance("cs") == 10_000 and l2.balance("cr") == 0


def test_lost_fulfill_retry_does_not_double_pay():
    s, c, r, l1, l2, txlog = three_party()
    api = FakeApi()
    nodes = {"cs": s, "cc": c, "cr": r}
    state = {"dropped": False}

    def drop(src, dst, body):
        # swallow the first fulfill on its way back to the connector
        if not state["dropped"] and decode_packet(body).kind == FULFILL \
                and dst == "cc":
            state["dropped"] = True
            return True
        return False

    sid = s.start_stream(api, "g.r.x", b"shh", 200, 200)
    pump(api, nodes, drop=drop)
    sess = s.sessions[sid]
    assert sess.state != STREAM_COMPLETE      # fulfill never came back
    # the session timer fires and the sender retries the same packet
    api.now = 200.0
    s.on_timer(("sess", sid), None, api)
    pump(api, nodes)
    assert sess.state == STREAM_COMPLETE
    # the connector found its outgoing hold already executed and pulled
    # the preimage off the book instead of re-forwarding
    assert c.counters.get("preimage_recovered") == 1
    # exactly one incoming and one outgoing hold executed
    report = settle_check([l1, l2], api.now, txlog)
    assert report.ok, report.problems
    assert l1.balance("cs") == 9_800
    assert l2.balance("cr") == 198
    assert report.fees_by_connector == {"cc": 2}


def test_lost_prepare_retry_reuses_active_hold():
    s, c, r, l1, l2, txlog = three_party()
    api = FakeApi()
    nodes = {"cs": s, "cc": c, "cr": r}
    state = {"dropped": False}

    def drop(src, dst, body):
        if not state["dropped"] and decode_packet(body).kind == PREPARE \
                and dst == "cr":
            state["dropped"] = True
            return True
        return False

    sid = s.start_stream(api, "g.r.x", b"shh", 200, 200)
    pump(api, nodes, drop=drop)
    api.now = 200.0
    s.on_timer(("sess", sid), None, api)
    pump(api, nodes)
    assert s.sessions[sid].state == STREAM_COMPLETE
    # no second escrow was taken on either ledger for the retry
    assert sum(1 for h in l1.holds.values() if h.state == HOLD_EXECUTED) == 1
    assert sum(1 for h in l2.holds.values() if h.state == HOLD_EXECUTED) == 1
    assert settle_check([l1, l2], api.now, txlog).ok


def test_expired_prepare_is_rejected():
    s, c, r, l1, l2, txlog = three_party()
    api = FakeApi()
    preimage = derive_preimage(b"shh", PID, 0)
    pkt = IlpPacket(PREPARE, PID, 0, amount=100, expiry_us=5_000_000,
                    condition=condition_of(preimage), address="g.r.x")
    api.now = 6000.0           # past the 5 s expiry
    r.handle_packet("cc", pkt.encode(), api)
    assert len(api.sent) == 1
    reply = decode_packet(api.sent[0][2])
    assert reply.kind == REJECT and reply.code == R_EXPIRED


def test_prepare_without_hold_is_rejected():
    s, c, r, l1, l2, txlog = three_party()
    api = FakeApi()
    preimage = derive_preimage(b"shh", PID, 0)
    pkt = IlpPacket(PREPARE, PID, 0, amount=100,
                    expiry_us=int(30_000 * 1000),
                    condition=condition_of(preimage), address="g.r.x")
    r.handle_packet("cc", pkt.encode(), api)
    reply = decode_packet(api.sent[0][2])
    assert reply.kind == REJECT and reply.code == R_NO_HOLD


def test_settle_check_flags_tampered_log():
    s, c, r, l1, l2, txlog = three_party()
    api = FakeApi()
    nodes = {"cs": s, "cc": c, "cr": r}
    s.start_stream(api, "g.r.x", b"shh", 200, 200)
    pump(api, nodes)
    assert settle_check([l1, l2], api.now, txlog).ok
    txlog.rows = [row for row in txlog.rows
                  if not (row[1] == "cc" and row[2] == "fulfill")]
    report = settle_check([l1, l2], api.now, txlog)
    assert not report.ok
    assert any("logged" in p for p in report.problems)


def test_ping_never_touches_the_books():
    s, c, r, l1, l2, txlog = three_party()
    api = FakeApi()
    nodes = {"cs": s, "cc": c, "cr": r}
    probe_id = s.start_ping(api, "g.r.x", b"shh", count=1, interval_ms=100.0)
    pump(api, nodes)
    probe = s.pings[probe_id]
    assert len(probe.rtts) == 1 and probe.timeouts == 0
    assert not l1.holds and not l2.holds


# --- engine integration -----------------------------------------------------------------

def overlay_world(service, loss=None, count=1, total=200, packet=200,
                  seed=21, horizon=120_000.0, faults=(), pad_to=0):
    """Chain topology with the connector homed at relay 13."""
    text = open(CHAIN).read() + "attach cs 1\nattach cc 13\nattach cr 5\n"
    topo = parse_topology(text)
    txlog = TxLog()
    l1 = Ledger("L1", {"cs": 1_000_000, "cc": 1_000_000})
    l2 = Ledger("L2", {"cc": 1_000_000, "cr": 0})

    class Sender(IlpNode):
        def on_start(self, api):
            self.sid = self.start_stream(api, "g.r.main", b"shh", total, packet)

    s = Sender("cs", "g.s", OverlayTransport(service), txlog=txlog)
    c = IlpNode("cc", "g.c", OverlayTransport(service), txlog=txlog)
    r = IlpNode("cr", "g.r", OverlayTransport(service), secret=b"shh",
                txlog=txlog, pad_to=pad_to)
    s.add_link(PeerLink("cc", l1, "cs", "cc"))
    s.add_route("g.r", "cc")
    c.add_link(PeerLink("cs", l1, "cc", "cs"))
    c.add_link(PeerLink("cr", l2, "cc", "cr", fee_ppm=10_000))
    c.add_route("g.r", "cr")
    c.add_route("g.s", "cs")
    r.add_link(PeerLink("cc", l2, "cr", "cc"))
    r.add_route("g.s", "cc")

    all_faults = list(faults)
    if loss:
        all_faults.append(FaultEvent(0.0, change=Change.loss_override(
            "12", "13", loss)))
    eng = Engine(topo, [s, c, r], seed=seed, faults=all_faults)
    eng.run(horizon)
    return s, c, r, l1, l2, txlog, eng


def test_payment_over_overlay_completes():
    s, c, r, l1, l2, txlog, eng = overlay_world(ServiceClass(PRI, 2))
    assert s.sessions[s.sid].state == STREAM_COMPLETE
    assert l2.balance("cr") == 198
    assert settle_check([l1, l2], eng.now, txlog).ok


def test_stream_survives_heavy_loss_exactly_once():
    s, c, r, l1, l2, txlog, eng = overlay_world(
        ServiceClass(REL, 1), loss=0.25, total=1000, packet=100)
    sess = s.sessions[s.sid]
    assert sess.state == STREAM_COMPLETE
    assert sess.packets_fulfilled == 10
    assert l1.balance("cs") == 1_000_000 - 1000
    assert l2.balance("cr") == 10 * 99
    report = settle_check([l1, l2], eng.now, txlog)
    assert report.ok, report.problems


def test_ping_latency_over_chain():
    text = open(CHAIN).read() + "attach cs 1\nattach cr 5\n"
    topo = parse_topology(text)

    class Pinger(IlpNode):
        def on_start(self, api):
            self.probe = self.start_ping(api, "g.r.x", b"shh", count=5,
                                         interval_ms=200.0)

    s = Pinger("cs", "g.s", OverlayTransport(ServiceClass(PRI, 1)))
    s.add_route("g.r", "cr")
    r = IlpNode("cr", "g.r", OverlayTransport(ServiceClass(PRI, 1)),
                secret=b"shh")
    r.add_route("g.s", "cs")
    eng = Engine(topo, [s, r], seed=8)
    eng.run(10_000.0)
    probe = s.pings[s.probe]
    assert probe.timeouts == 0
    assert len(probe.rtts) == 5
    assert all(32.0 < rtt < 34.0 for rtt in probe.rtts)


def test_direct_transport_stalls_through_outage():
    text = open(CHAIN).read() + "attach cs 1\nattach cr 5\n"
    topo = parse_topology(text)

    class Pinger(IlpNode):
        def on_start(self, api):
            api.set_timer(self.client_id, ("go",), 150.0)

        def on_timer(self, timer_id, data, api):
            if timer_id == ("go",):
                self.probe = self.start_ping(api, "g.r.x", b"shh", count=1,
                                             interval_ms=100.0,
                                             timeout_ms=10_000.0)
                return
            super().on_timer(timer_id, data, api)

    s = Pinger("cs", "g.s", DirectTransport())
    s.add_route("g.r", "cr")
    r = IlpNode("cr", "g.r", DirectTransport(), secret=b"shh")
    r.add_route("g.s", "cs")
    raw = RawLink("cs", "cr", path=("1", "12", "13", "14", "5"))
    faults = [FaultEvent(100.0, change=Change.node_down("13")),
              FaultEvent(600.0, change=Change.node_up("13"))]
    eng = Engine(topo, [s, r], seed=8, raw_links=[raw], faults=faults)
    eng.run(20_000.0)
    probe = s.pings[s.probe]
    assert probe.timeouts == 0 and len(probe.rtts) == 1
    # the probe left at 150 ms and could not cross until the path returned
    assert probe.rtts[0] > 400.0
