"""Two-phase hashlocked payments across ledgers, carried by the overlay.

Value moves in two phases.  The payer of each ledger edge places a hold that
escrows funds against a hash condition; whoever presents the matching
preimage before expiry claims it.  Connectors bridge two ledgers, quoting an
outgoing amount reduced by their rate and fee, and claim their incoming hold
with the preimage learned from the outgoing one.  Every operation is
idempotent per (payment, packet seq, edge, attempt), so duplicate packets
caused by retransmission can never move value twice.

The module also carries the plumbing the experiments need: a streaming sender
that keeps one packet in flight, an RTT probe that skips the ledger entirely,
and a settlement audit that recomputes conservation and fees from the books.
"""

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .netsim import Client, EngineApi
from .overlay import ServiceClass

# --- wire encoding -----------------------------------------------------------------

PREPARE = 1
FULFILL = 2
REJECT = 3

R_NO_ROUTE = 1
R_WRONG_CONDITION = 2
R_EXPIRED = 3
R_NO_HOLD = 4
R_INSUFFICIENT_TIME = 5
R_INSUFFICIENT_FUNDS = 6
R_TRANSPORT = 7

REJECT_NAMES = {
    R_NO_ROUTE: "no_route",
    R_WRONG_CONDITION: "wrong_condition",
    R_EXPIRED: "expired",
    R_NO_HOLD: "no_hold",
    R_INSUFFICIENT_TIME: "insufficient_time",
    R_INSUFFICIENT_FUNDS: "insufficient_funds",
    R_TRANSPORT: "transport",
}


class PacketError(ValueError):
    pass


@dataclass
class IlpPacket:
    kind: int
    payment_id: bytes           # 16 bytes
    seq: int
    amount: int = 0
    expiry_us: int = 0
    condition: bytes = b""      # PREPARE: sha256 of the preimage
    fulfillment: bytes = b""    # FULFILL: the preimage
    address: str = ""           # PREPARE: destination address
    code: int = 0               # REJECT
    data: bytes = b""

    def encode(self) -> bytes:
        if self.kind not in (PREPARE, FULFILL, REJECT):
            raise PacketError(f"unknown kind {self.kind}")
        if len(self.payment_id) != 16:
            raise PacketError("payment id must be 16 bytes")
        out = bytearray()
        out += struct.pack(">B16sIQQ", self.kind, self.payment_id, self.seq,
                           self.amount, self.expiry_us)
        if self.kind == PREPARE:
            if len(self.condition) != 32:
                raise PacketError("condition must be 32 bytes")
            addr = self.address.encode("utf-8")
            if len(addr) > 255:
                raise PacketError("address too long")
            out += self.condition
            out += struct.pack(">B", len(addr)) + addr
        elif self.kind == FULFILL:
            if len(self.fulfillment) != 32:
                raise PacketError("fulfillment must be 32 bytes")
            out += self.fulfillment
        else:
            out += struct.pack(">B", self.code)
        out += struct.pack(">H", len(self.data)) + self.data
        return bytes(out)


def decode_packet(raw: bytes) -> IlpPacket:
    try:
        kind, pid, seq, amount, expiry = struct.unpack(">B16sIQQ", raw[:37])
        pos = 37
        pkt = IlpPacket(kind, pid, seq, amount, expiry)
        if kind == PREPARE:
            pkt.condition = raw[pos:pos + 32]
            if len(pkt.condition) != 32:
                raise PacketError("short condition")
            pos += 32
            alen = raw[pos]
            pos += 1
            pkt.address = raw[pos:pos + alen].decode("utf-8")
            if len(pkt.address.encode()) != alen:
                raise PacketError("short address")
            pos += alen
        elif kind == FULFILL:
            pkt.fulfillment = raw[pos:pos + 32]
            if len(pkt.fulfillment) != 32:
                raise PacketError("short fulfillment")
            pos += 32
        elif kind == REJECT:
            pkt.code = raw[pos]
            pos += 1
        else:
            raise PacketError(f"unknown kind {kind}")
        (dlen,) = struct.unpack(">H", raw[pos:pos + 2])
        pos += 2
        pkt.data = raw[pos:pos + dlen]
        if len(pkt.data) != dlen or pos + dlen != len(raw):
            raise PacketError("length mismatch")
        return pkt
    except (struct.error, IndexError, UnicodeDecodeError) as exc:
        raise PacketError(f"malformed packet: {exc}") from None


def derive_preimage(secret: bytes, payment_id: bytes, seq: int) -> bytes:
    return hashlib.sha256(secret + payment_id + struct.pack(">I", seq)).digest()


def condition_of(preimage: bytes) -> bytes:
    return hashlib.sha256(preimage).digest()


# --- ledger ----------------------------------------------------------------------------

HOLD_ACTIVE = "active"
HOLD_EXECUTED = "executed"
HOLD_VOID = "void"


class LedgerError(Exception):
    pass


@dataclass
class Hold:
    payer: str
    payee: str
    amount: int
    condition: bytes
    expiry_ms: float
    state: str = HOLD_ACTIVE
    preimage: bytes = b""


class Ledger:
    """Shared book for one bilateral (or multilateral) settlement domain.

    Placing a hold debits the payer immediately; the amount lives in the hold
    until it is executed (credited to the payee) or voided (returned).  The
    hashlock is enforced here, not by the parties.
    """

    def __init__(self, name: str, accounts: Dict[str, int]):
        self.name = name
        self.accounts = dict(accounts)
        self.initial_total = sum(accounts.values())
        self.holds: Dict[str, Hold] = {}
        self.groups: Dict[str, List[str]] = {}
        self.events: List[Tuple[float, str, str, int]] = []

    def balance(self, account: str) -> int:
        return self.accounts[account]

    def _log(self, now: float, op: str, hold_id: str, amount: int) -> None:
        self.events.append((now, op, hold_id, amount))

    def place_hold(self, hold_id: str, group: str, payer: str, payee: str,
                   amount: int, condition: bytes, expiry_ms: float,
                   now: float) -> None:
        if hold_id in self.holds:
            raise LedgerError(f"hold {hold_id} already exists")
        if amount <= 0:
            raise LedgerError("hold amount must be positive")
        if payer not in self.accounts or payee not in self.accounts:
            raise LedgerError("unknown account")
        if self.accounts[payer] < amount:
            raise LedgerError(f"insufficient funds in {payer}")
        self.accounts[payer] -= amount
        self.holds[hold_id] = Hold(payer, payee, amount, condition, expiry_ms)
        self.groups.setdefault(group, []).append(hold_id)
        self._log(now, "place", hold_id, amount)

    def execute_hold(self, hold_id: str, preimage: bytes, now: float) -> bool:
        hold = self.holds.get(hold_id)
        if hold is None:
            raise LedgerError(f"no hold {hold_id}")
        if hold.state == HOLD_EXECUTED:
            return hold.preimage == preimage   # idempotent, nothing moves
        if hold.state == HOLD_VOID:
            return False
        if now > hold.expiry_ms:
            self._void(hold_id, hold, now, "expired")
            return False
        if condition_of(preimage) != hold.condition:
            self._log(now, "bad_preimage", hold_id, 0)
            return False
        hold.state = HOLD_EXECUTED
        hold.preimage = preimage
        self.accounts[hold.payee] += hold.amount
        self._log(now, "execute", hold_id, hold.amount)
        return True

    def void_hold(self, hold_id: str, now: float) -> None:
        hold = self.holds.get(hold_id)
        if hold is None or hold.state != HOLD_ACTIVE:
            return
        self._void(hold_id, hold, now, "void")

    def void_group(self, group: str, now: float) -> int:
        """Refund every active hold in the group.  Returns the count voided."""
        voided = 0
        for hid in self.groups.get(group, ()):
            hold = self.holds[hid]
            if hold.state == HOLD_ACTIVE:
                self._void(hid, hold, now, "void")
                voided += 1
        return voided

    def _void(self, hold_id: str, hold: Hold, now: float, op: str) -> None:
        hold.state = HOLD_VOID
        self.accounts[hold.payer] += hold.amount
        self._log(now, op, hold_id, hold.amount)

    def sweep(self, now: float) -> int:
        expired = [hid for hid, h in self.holds.items()
                   if h.state == HOLD_ACTIVE and now > h.expiry_ms]
        for hid in expired:
            self._void(hid, self.holds[hid], now, "expired")
        return len(expired)

    def find_active(self, group: str, condition: bytes, min_amount: int,
                    now: float) -> Optional[str]:
        for hid in self.groups.get(group, ()):
            hold = self.holds[hid]
            if (hold.state == HOLD_ACTIVE and now <= hold.expiry_ms
                    and hold.condition == condition
                    and hold.amount >= min_amount):
                return hid
        return None

    def executed_preimage(self, hold_id: str) -> Optional[bytes]:
        hold = self.holds.get(hold_id)
        if hold is not None and hold.state == HOLD_EXECUTED:
            return hold.preimage
        return None

    def hold_state(self, hold_id: str) -> Optional[str]:
        hold = self.holds.get(hold_id)
        return hold.state if hold else None

    def hold_expiry(self, hold_id: str) -> Optional[float]:
        hold = self.holds.get(hold_id)
        return hold.expiry_ms if hold else None

    def escrow_total(self) -> int:
        return sum(h.amount for h in self.holds.values()
                   if h.state == HOLD_ACTIVE)

    def conserved(self) -> bool:
        return sum(self.accounts.values()) + self.escrow_total() == self.initial_total


# --- transaction log ----------------------------------------------------------------------

class TxLog:
    """Append-only record of packet-level outcomes, shared by all parties."""

    COLUMNS = ("time_ms", "actor", "kind", "payment_id", "seq", "amount", "result")

    def __init__(self):
        self.rows: List[Tuple[float, str, str, str, int, int, str]] = []

    def add(self, time_ms: float, actor: str, kind: str, payment_id: bytes,
            seq: int, amount: int, result: str) -> None:
        self.rows.append((time_ms, actor, kind, payment_id.hex(), seq,
                          amount, result))


# --- transports -----------------------------------------------------------------------------

class OverlayTransport:
    """Sends packets as overlay messages.  Fulfill responses ride at a higher
    priority level than prepares so they beat hold expiries under load."""

    def __init__(self, service: ServiceClass, prepare_priority: int = 1,
                 fulfill_priority: int = 2, deadline_ms: Optional[float] = None):
        self.service = service
        self.prepare_priority = prepare_priority
        self.fulfill_priority = fulfill_priority
        self.deadline_ms = deadline_ms

    def send_packet(self, node: "IlpNode", api: EngineApi, peer_client: str,
                    raw: bytes, kind: int) -> bool:
        prio = self.fulfill_priority if kind != PREPARE else self.prepare_priority
        return api.send(node.client_id, peer_client, raw, self.service,
                        priority=prio, deadline_ms=self.deadline_ms)

    def rtt_hint(self, node: "IlpNode", api: EngineApi, peer_client: str) -> float:
        return api.rtt_hint(node.client_id, peer_client)

    def on_deliver(self, node: "IlpNode", src_client: str, body: bytes,
                   api: EngineApi) -> Optional[bytes]:
        return body

    def on_raw(self, node: "IlpNode", src_client: str, body: bytes,
               api: EngineApi) -> Optional[bytes]:
        return None

    def on_timer(self, node: "IlpNode", timer_id: tuple, data: object,
                 api: EngineApi) -> bool:
        return False


_ARQ_DATA = 1
_ARQ_ACK = 2


@dataclass
class _ArqPending:
    raw: bytes
    peer: str
    attempts: int = 0
    rto_ms: float = 0.0


class DirectTransport:
    """Stop-and-repeat delivery over a raw point-to-point pipe.

    Mimics a plain transport connection: every message is retransmitted on a
    doubling timeout (capped) until acked, so effective latency inflates as
    path loss grows, and sends simply stall while the path is down.
    """

    def __init__(self, max_tries: int = 200, rto_cap_ms: float = 1000.0):
        self.max_tries = max_tries
        self.rto_cap_ms = rto_cap_ms
        self.next_seq = 0
        self.pending: Dict[int, _ArqPending] = {}
        self.seen: Dict[str, set] = {}
        self.failures = 0

    def send_packet(self, node: "IlpNode", api: EngineApi, peer_client: str,
                    raw: bytes, kind: int) -> bool:
        seq = self.next_seq
        self.next_seq += 1
        base = api.raw_rtt_hint(node.client_id, peer_client)
        entry = _ArqPending(raw=raw, peer=peer_client, rto_ms=2.0 * base)
        self.pending[seq] = entry
        self._transmit(node, api, seq, entry)
        return True

    def _transmit(self, node: "IlpNode", api: EngineApi, seq: int,
                  entry: _ArqPending) -> None:
        entry.attempts += 1
        frame = struct.pack(">BQ", _ARQ_DATA, seq) + entry.raw
        api.raw_send(node.client_id, entry.peer, frame)
        api.set_timer(node.client_id, ("arq", seq), entry.rto_ms)
        entry.rto_ms = min(entry.rto_ms * 2.0, self.rto_cap_ms)

    def rtt_hint(self, node: "IlpNode", api: EngineApi, peer_client: str) -> float:
        return api.raw_rtt_hint(node.client_id, peer_client)

    def on_deliver(self, node: "IlpNode", src_client: str, body: bytes,
                   api: EngineApi) -> Optional[bytes]:
        return None

    def on_raw(self, node: "IlpNode", src_client: str, body: bytes,
               api: EngineApi) -> Optional[bytes]:
        if len(body) < 9:
            return None
        kind, seq = struct.unpack(">BQ", body[:9])
        if kind == _ARQ_ACK:
            if seq in self.pending:
                del self.pending[seq]
                api.cancel_timer(node.client_id, ("arq", seq))
            return None
        api.raw_send(node.client_id, src_client,
                     struct.pack(">BQ", _ARQ_ACK, seq))
        window = self.seen.setdefault(src_client, set())
        if seq in window:
            return None
        window.add(seq)
        return body[9:]

    def on_timer(self, node: "IlpNode", timer_id: tuple, data: object,
                 api: EngineApi) -> bool:
        if timer_id[0] != "arq":
            return False
        seq = timer_id[1]
        entry = self.pending.get(seq)
        if entry is None:
            return True
        if entry.attempts >= self.max_tries:
            del self.pending[seq]
            self.failures += 1
            return True
        self._transmit(node, api, seq, entry)
        return True


# --- parties ------------------------------------------------------------------------------

@dataclass(frozen=True)
class PeerLink:
    """One adjacency: the ledger shared with the peer and my pricing toward it."""
    peer_client: str
    ledger: Ledger
    my_account: str
    peer_account: str
    rate_num: int = 1           # amount' = floor(amount * num / den) less fee
    rate_den: int = 1
    fee_ppm: int = 0
    expiry_margin_ms: float = 1000.0

    def quote(self, amount: int) -> int:
        converted = amount * self.rate_num // self.rate_den
        return converted - (converted * self.fee_ppm // 1_000_000)


STREAM_RUNNING = "running"
STREAM_COMPLETE = "complete"
STREAM_FAILED = "failed"


@dataclass
class StreamSession:
    session_id: int
    dst_addr: str
    secret: bytes
    total: int
    packet_amount: int
    payment_id: bytes
    state: str = STREAM_RUNNING
    next_seq: int = 0
    delivered: int = 0
    retries: int = 0
    attempts_current: int = 0
    rtt_ewma_ms: float = 0.0
    sent_at_ms: float = 0.0
    started_ms: float = 0.0
    finished_ms: float = 0.0
    packets_fulfilled: int = 0
    # (seq, completed_at_ms, rtt_ms) per fulfilled packet
    packet_rtts: List[Tuple[int, float, float]] = field(default_factory=list)

    def current_amount(self) -> int:
        return min(self.packet_amount, self.total - self.delivered)


@dataclass
class PingProbe:
    probe_id: int
    dst_addr: str
    secret: bytes
    count: int
    interval_ms: float
    timeout_ms: float
    sent: int = 0
    rtts: List[float] = field(default_factory=list)
    timeouts: int = 0
    outstanding: Dict[int, float] = field(default_factory=dict)
    # (seq, sent_ms, rtt_ms or -1, "ok" | "timeout") in completion order
    outcomes: List[Tuple[int, float, float, str]] = field(default_factory=list)


@dataclass
class _RelayState:
    upstream_peer: str
    upstream_hold: Optional[str]    # None for amount-0 probes
    downstream_peer: str
    downstream_hold: Optional[str]
    amount_in: int
    amount_out: int
    fulfilled: bool = False


class IlpNode(Client):
    """A payment party: terminal sender/receiver and, with two peer links,
    a connector.  All packet handling is driven by transport callbacks."""

    def __init__(self, client_id: str, address: str, transport,
                 secret: bytes = b"", txlog: Optional[TxLog] = None,
                 initial_expiry_ms: float = 30_000.0,
                 timeout_factor: float = 4.0,
                 stream_max_retries: int = 10,
                 ping_timeout_ms: float = 1000.0,
                 rtt_alpha: float = 0.125,
                 pad_to: int = 0):
        super().__init__(client_id)
        self.address = address
        self.transport = transport
        self.secret = secret
        self.txlog = txlog or TxLog()
        self.initial_expiry_ms = initial_expiry_ms
        self.timeout_factor = timeout_factor
        self.stream_max_retries = stream_max_retries
        self.ping_timeout_ms = ping_timeout_ms
        self.rtt_alpha = rtt_alpha
        self.pad_to = pad_to

        self.links: Dict[str, PeerLink] = {}
        self.routes: List[Tuple[str, str]] = []   # (prefix, peer_client)
        self.sessions: Dict[int, StreamSession] = {}
        self.pings: Dict[int, PingProbe] = {}
        self.relays: Dict[Tuple[bytes, int], _RelayState] = {}
        self.fulfilled_cache: Dict[Tuple[bytes, int], bytes] = {}
        self.hold_counters: Dict[str, int] = {}
        self.counters: Dict[str, int] = {}
        self._next_session = 0
        self._next_probe = 0

    # -- wiring --

    def add_link(self, link: PeerLink) -> None:
        self.links[link.peer_client] = link

    def add_route(self, prefix: str, peer_client: str) -> None:
        self.routes.append((prefix, peer_client))
        self.routes.sort(key=lambda r: (-len(r[0]), r[0]))

    def _route(self, address: str) -> Optional[str]:
        for prefix, peer in self.routes:
            if address.startswith(prefix):
                return peer
        return None

    def _count(self, key: str) -> None:
        self.counters[key] = self.counters.get(key, 0) + 1

    # -- hold naming --

    def _hold_group(self, pid: bytes, seq: int, payer_client: str,
                    payee_client: str) -> str:
        return f"{pid.hex()}:{seq}:{payer_client}>{payee_client}"

    def _new_hold_id(self, group: str) -> str:
        n = self.hold_counters.get(group, 0)
        self.hold_counters[group] = n + 1
        return f"{group}:{n}"

    # -- sending --

    def _send(self, api: EngineApi, peer_client: str, pkt: IlpPacket) -> bool:
        if self.pad_to and pkt.kind == PREPARE and len(pkt.data) < self.pad_to:
            pkt.data = pkt.data + b"\x00" * (self.pad_to - len(pkt.data))
        ok = self.transport.send_packet(self, api, peer_client, pkt.encode(),
                                        pkt.kind)
        if not ok:
            self._count("transport_refused")
        return ok

    def start_stream(self, api: EngineApi, dst_addr: str, secret: bytes,
                     total: int, packet_amount: int) -> int:
        sid = self._next_session
        self._next_session += 1
        pid = hashlib.sha256(
            f"{self.address}:{dst_addr}:{sid}".encode()).digest()[:16]
        peer = self._route(dst_addr)
        sess = StreamSession(sid, dst_addr, secret, total, packet_amount, pid,
                             started_ms=api.now)
        if peer is None or total <= 0 or packet_amount <= 0:
            sess.state = STREAM_FAILED
            sess.finished_ms = api.now
            self.sessions[sid] = sess
            return sid
        sess.rtt_ewma_ms = self.transport.rtt_hint(self, api, peer)
        self.sessions[sid] = sess
        self._stream_send_current(api, sess)
        return sid

    def _stream_send_current(self, api: EngineApi, sess: StreamSession) -> None:
        peer = self._route(sess.dst_addr)
        amount = sess.current_amount()
        preimage = derive_preimage(sess.secret, sess.payment_id, sess.next_seq)
        pkt = IlpPacket(PREPARE, sess.payment_id, sess.next_seq, amount,
                        int((api.now + self.initial_expiry_ms) * 1000),
                        condition=condition_of(preimage),
                        address=sess.dst_addr)
        link = self.links.get(peer)
        held = False
        if link is not None and amount > 0:
            group = self._hold_group(sess.payment_id, sess.next_seq,
                                     self.client_id, peer)
            existing = link.ledger.find_active(group, pkt.condition, amount,
                                               api.now)
            if existing is None:
                hold_id = self._new_hold_id(group)
                try:
                    link.ledger.place_hold(hold_id, group, link.my_account,
                                           link.peer_account, amount,
                                           pkt.condition,
                                           api.now + self.initial_expiry_ms,
                                           api.now)
                    held = True
                except LedgerError:
                    self._count("out_of_funds")
                    self._stream_finish(api, sess, STREAM_FAILED)
                    return
            else:
                # a retry rides on the hold that still backs it, so the
                # packet must carry that hold's (earlier) expiry
                held = True
                pkt.expiry_us = int(link.ledger.hold_expiry(existing) * 1000)
        if link is None and amount > 0:
            self._stream_finish(api, sess, STREAM_FAILED)
            return
        sess.sent_at_ms = api.now
        self.txlog.add(api.now, self.client_id, "prepare", sess.payment_id,
                       sess.next_seq, amount, "sent" if held or amount == 0
                       else "sent_unheld")
        self._send(api, peer, pkt)
        # doubling per retry so a long path outage does not burn the whole
        # retry budget in the first second
        timeout = self.timeout_factor * max(sess.rtt_ewma_ms, 1.0)
        timeout = min(timeout * (2 ** sess.attempts_current), 30_000.0)
        api.set_timer(self.client_id, ("sess", sess.session_id), timeout)

    def _stream_finish(self, api: EngineApi, sess: StreamSession,
                       state: str) -> None:
        sess.state = state
        sess.finished_ms = api.now
        api.cancel_timer(self.client_id, ("sess", sess.session_id))
        if state != STREAM_FAILED:
            return
        # take back whatever still backs the abandoned packet
        peer = self._route(sess.dst_addr)
        link = self.links.get(peer) if peer else None
        if link is not None:
            group = self._hold_group(sess.payment_id, sess.next_seq,
                                     self.client_id, peer)
            link.ledger.void_group(group, api.now)

    def _stream_on_fulfill(self, api: EngineApi, sess: StreamSession,
                           pkt: IlpPacket) -> None:
        if sess.state != STREAM_RUNNING or pkt.seq != sess.next_seq:
            return
        expect = derive_preimage(sess.secret, sess.payment_id, pkt.seq)
        if pkt.fulfillment != expect:
            self._count("fulfill_mismatch")
            return
        amount = sess.current_amount()
        rtt = api.now - sess.sent_at_ms
        sess.packet_rtts.append((pkt.seq, api.now, rtt))
        a = self.rtt_alpha
        sess.rtt_ewma_ms = (1 - a) * sess.rtt_ewma_ms + a * rtt
        sess.delivered += amount
        sess.packets_fulfilled += 1
        sess.next_seq += 1
        sess.attempts_current = 0
        self.txlog.add(api.now, self.client_id, "fulfill", sess.payment_id,
                       pkt.seq, amount, "confirmed")
        if sess.delivered >= sess.total:
            self._stream_finish(api, sess, STREAM_COMPLETE)
        else:
            self._stream_send_current(api, sess)

    def _stream_on_reject(self, api: EngineApi, sess: StreamSession,
                          pkt: IlpPacket) -> None:
        if sess.state != STREAM_RUNNING or pkt.seq != sess.next_seq:
            return
        reason = REJECT_NAMES.get(pkt.code, str(pkt.code))
        self._count(f"reject_{reason}")
        self.txlog.add(api.now, self.client_id, "reject", sess.payment_id,
                       pkt.seq, 0, reason)
        if pkt.code in (R_WRONG_CONDITION, R_NO_ROUTE):
            self._stream_finish(api, sess, STREAM_FAILED)
            return
        # transient: leave the retry to the session timer
        self._retry_stream(api, sess)

    def _retry_stream(self, api: EngineApi, sess: StreamSession) -> None:
        sess.attempts_current += 1
        sess.retries += 1
        if sess.attempts_current > self.stream_max_retries:
            self._stream_finish(api, sess, STREAM_FAILED)
            return
        self._stream_send_current(api, sess)

    # -- pinging --

    def start_ping(self, api: EngineApi, dst_addr: str, secret: bytes,
                   count: int, interval_ms: float,
                   timeout_ms: Optional[float] = None) -> int:
        probe_id = self._next_probe
        self._next_probe += 1
        probe = PingProbe(probe_id, dst_addr, secret, count, interval_ms,
                          timeout_ms or self.ping_timeout_ms)
        self.pings[probe_id] = probe
        self._ping_fire(api, probe)
        return probe_id

    def _ping_pid(self, probe: PingProbe) -> bytes:
        return hashlib.sha256(
            f"ping:{self.address}:{probe.probe_id}".encode()).digest()[:16]

    def _ping_fire(self, api: EngineApi, probe: PingProbe) -> None:
        if probe.sent >= probe.count:
            return
        seq = probe.sent
        probe.sent += 1
        pid = self._ping_pid(probe)
        preimage = derive_preimage(probe.secret, pid, seq)
        pkt = IlpPacket(PREPARE, pid, seq, 0,
                        int((api.now + probe.timeout_ms) * 1000),
                        condition=condition_of(preimage),
                        address=probe.dst_addr)
        peer = self._route(probe.dst_addr)
        probe.outstanding[seq] = api.now
        if peer is None:
            probe.outstanding.pop(seq)
            probe.timeouts += 1
            probe.outcomes.append((seq, api.now, -1.0, "timeout"))
        else:
            self._send(api, peer, pkt)
            api.set_timer(self.client_id, ("ping", probe.probe_id, seq),
                          probe.timeout_ms)
        if probe.sent < probe.count:
            api.set_timer(self.client_id, ("ping_next", probe.probe_id),
                          probe.interval_ms)

    # -- packet handling --

    def handle_packet(self, src_client: str, raw: bytes, api: EngineApi) -> None:
        try:
            pkt = decode_packet(raw)
        except PacketError:
            self._count("malformed_packet")
            return
        if pkt.kind == PREPARE:
            self._on_prepare(src_client, pkt, api)
        elif pkt.kind == FULFILL:
            self._on_fulfill(src_client, pkt, api)
        else:
            self._on_reject(src_client, pkt, api)

    def _reject(self, api: EngineApi, peer: str, pkt: IlpPacket,
                code: int) -> None:
        self.txlog.add(api.now, self.client_id, "reject", pkt.payment_id,
                       pkt.seq, pkt.amount, REJECT_NAMES.get(code, str(code)))
        self._send(api, peer, IlpPacket(REJECT, pkt.payment_id, pkt.seq,
                                        code=code))

    def _on_prepare(self, src_client: str, pkt: IlpPacket,
                    api: EngineApi) -> None:
        if pkt.address.startswith(self.address):
            self._terminal_prepare(src_client, pkt, api)
        else:
            self._forward_prepare(src_client, pkt, api)

    def _terminal_prepare(self, src_client: str, pkt: IlpPacket,
                          api: EngineApi) -> None:
        preimage = derive_preimage(self.secret, pkt.payment_id, pkt.seq)
        if condition_of(preimage) != pkt.condition:
            self._count("wrong_condition")
            self._reject(api, src_client, pkt, R_WRONG_CONDITION)
            return
        if api.now * 1000 > pkt.expiry_us:
            self._count("late_prepare")
            self._reject(api, src_client, pkt, R_EXPIRED)
            return
        if pkt.amount == 0:
            # probe traffic never touches the books
            self._send(api, src_client, IlpPacket(FULFILL, pkt.payment_id,
                                                  pkt.seq,
                                                  fulfillment=preimage))
            return
        key = (pkt.payment_id, pkt.seq)
        if key in self.fulfilled_cache:
            self._count("duplicate_prepare")
            self._send(api, src_client, IlpPacket(
                FULFILL, pkt.payment_id, pkt.seq,
                fulfillment=self.fulfilled_cache[key]))
            return
        link = self.links.get(src_client)
        if link is None:
            self._reject(api, src_client, pkt, R_NO_HOLD)
            return
        group = self._hold_group(pkt.payment_id, pkt.seq, src_client,
                                 self.client_id)
        hold_id = link.ledger.find_active(group, pkt.condition, pkt.amount,
                                          api.now)
        if hold_id is None:
            self._count("no_hold")
            self._reject(api, src_client, pkt, R_NO_HOLD)
            return
        if not link.ledger.execute_hold(hold_id, preimage, api.now):
            self._count("hold_execute_failed")
            self._reject(api, src_client, pkt, R_EXPIRED)
            return
        self.fulfilled_cache[key] = preimage
        self.txlog.add(api.now, self.client_id, "fulfill", pkt.payment_id,
                       pkt.seq, pkt.amount, "claimed")
        self._send(api, src_client, IlpPacket(FULFILL, pkt.payment_id, pkt.seq,
                                              fulfillment=preimage))

    def _forward_prepare(self, src_client: str, pkt: IlpPacket,
                         api: EngineApi) -> None:
        next_peer = self._route(pkt.address)
        if next_peer is None or next_peer == src_client:
            self._count("no_route")
            self._reject(api, src_client, pkt, R_NO_ROUTE)
            return
        out_link = self.links.get(next_peer)
        key = (pkt.payment_id, pkt.seq)

        if pkt.amount == 0:
            # probes carry no value, but the return path still needs a
            # breadcrumb so the fulfillment can retrace its way upstream
            if key not in self.relays:
                self.relays[key] = _RelayState(src_client, None, next_peer,
                                               None, 0, 0)
            fwd = IlpPacket(PREPARE, pkt.payment_id, pkt.seq, 0, pkt.expiry_us,
                            condition=pkt.condition, address=pkt.address)
            self._send(api, next_peer, fwd)
            return

        relay = self.relays.get(key)
        if relay is not None and out_link is not None:
            state = out_link.ledger.hold_state(relay.downstream_hold)
            if state == HOLD_EXECUTED:
                # the outgoing leg already paid out; recover the preimage from
                # the shared book and claim (or re-claim) the incoming leg
                self._count("preimage_recovered")
                preimage = out_link.ledger.executed_preimage(relay.downstream_hold)
                self._claim_upstream(api, src_client, pkt, preimage)
                return
            if state == HOLD_ACTIVE:
                self._count("duplicate_prepare")
                expiry = out_link.ledger.hold_expiry(relay.downstream_hold)
                fwd = IlpPacket(PREPARE, pkt.payment_id, pkt.seq,
                                relay.amount_out, int(expiry * 1000),
                                condition=pkt.condition, address=pkt.address)
                self._send(api, next_peer, fwd)
                return
            # voided or expired: fall through and set up fresh legs

        if out_link is None:
            self._count("no_route")
            self._reject(api, src_client, pkt, R_NO_ROUTE)
            return
        in_link = self.links.get(src_client)
        if in_link is None:
            self._reject(api, src_client, pkt, R_NO_HOLD)
            return

        in_group = self._hold_group(pkt.payment_id, pkt.seq, src_client,
                                    self.client_id)
        upstream_hold = in_link.ledger.find_active(in_group, pkt.condition,
                                                   pkt.amount, api.now)
        if upstream_hold is None:
            self._count("no_hold")
            self._reject(api, src_client, pkt, R_NO_HOLD)
            return

        amount_out = out_link.quote(pkt.amount)
        if amount_out <= 0:
            self._reject(api, src_client, pkt, R_INSUFFICIENT_FUNDS)
            return
        expiry_out_us = pkt.expiry_us - int(out_link.expiry_margin_ms * 1000)
        if expiry_out_us <= api.now * 1000:
            self._count("insufficient_time")
            self._reject(api, src_client, pkt, R_INSUFFICIENT_TIME)
            return

        out_group = self._hold_group(pkt.payment_id, pkt.seq, self.client_id,
                                     next_peer)
        down_hold = out_link.ledger.find_active(out_group, pkt.condition,
                                                amount_out, api.now)
        if down_hold is None:
            down_hold = self._new_hold_id(out_group)
            try:
                out_link.ledger.place_hold(down_hold, out_group,
                                           out_link.my_account,
                                           out_link.peer_account, amount_out,
                                           pkt.condition,
                                           expiry_out_us / 1000.0, api.now)
            except LedgerError:
                self._count("out_of_funds")
                self._reject(api, src_client, pkt, R_INSUFFICIENT_FUNDS)
                return
        else:
            expiry_out_us = int(out_link.ledger.hold_expiry(down_hold) * 1000)
        self.relays[key] = _RelayState(src_client, upstream_hold, next_peer,
                                       down_hold, pkt.amount, amount_out)
        self.txlog.add(api.now, self.client_id, "forward", pkt.payment_id,
                       pkt.seq, amount_out, "relayed")
        fwd = IlpPacket(PREPARE, pkt.payment_id, pkt.seq, amount_out,
                        expiry_out_us, condition=pkt.condition,
                        address=pkt.address)
        self._send(api, next_peer, fwd)

    def _claim_upstream(self, api: EngineApi, upstream_peer: str,
                        pkt: IlpPacket, preimage: bytes) -> None:
        relay = self.relays.get((pkt.payment_id, pkt.seq))
        if relay is None or preimage is None:
            return
        if relay.upstream_hold is None:
            # amount-0 probe: no escrow on either leg, just relay the proof
            del self.relays[(pkt.payment_id, pkt.seq)]
            self._send(api, upstream_peer, IlpPacket(
                FULFILL, pkt.payment_id, pkt.seq, fulfillment=preimage))
            return
        in_link = self.links.get(upstream_peer)
        if in_link is None:
            return
        if relay.fulfilled:
            # already claimed one incoming hold for this packet; claiming a
            # second (a retry's hold) would charge the sender twice
            self._send(api, upstream_peer, IlpPacket(
                FULFILL, pkt.payment_id, pkt.seq, fulfillment=preimage))
            return
        group = self._hold_group(pkt.payment_id, pkt.seq, upstream_peer,
                                 self.client_id)
        hold_id = in_link.ledger.find_active(group, condition_of(preimage),
                                             0, api.now)
        if hold_id is None:
            hold_id = relay.upstream_hold
        if in_link.ledger.execute_hold(hold_id, preimage, api.now):
            relay.fulfilled = True
            self.txlog.add(api.now, self.client_id, "fulfill",
                           pkt.payment_id, pkt.seq, relay.amount_in,
                           "claimed")
        else:
            self._count("late_fulfill_loss")
            self.txlog.add(api.now, self.client_id, "fulfill", pkt.payment_id,
                           pkt.seq, relay.amount_in, "late_loss")
        self._send(api, upstream_peer, IlpPacket(FULFILL, pkt.payment_id,
                                                 pkt.seq,
                                                 fulfillment=preimage))

    def _on_fulfill(self, src_client: str, pkt: IlpPacket,
                    api: EngineApi) -> None:
        key = (pkt.payment_id, pkt.seq)
        relay = self.relays.get(key)
        if relay is not None:
            if src_client != relay.downstream_peer:
                return
            self._claim_upstream(api, relay.upstream_peer, pkt,
                                 pkt.fulfillment)
            return
        # maybe one of my stream sessions
        for sess in self.sessions.values():
            if sess.payment_id == pkt.payment_id:
                self._stream_on_fulfill(api, sess, pkt)
                return
        for probe in self.pings.values():
            if self._ping_pid(probe) == pkt.payment_id:
                sent = probe.outstanding.pop(pkt.seq, None)
                if sent is not None:
                    expect = derive_preimage(probe.secret, pkt.payment_id,
                                             pkt.seq)
                    if pkt.fulfillment == expect:
                        probe.rtts.append(api.now - sent)
                        probe.outcomes.append((pkt.seq, sent, api.now - sent,
                                               "ok"))
                    else:
                        probe.timeouts += 1
                        probe.outcomes.append((pkt.seq, sent, -1.0, "timeout"))
                    api.cancel_timer(self.client_id,
                                     ("ping", probe.probe_id, pkt.seq))
                return
        self._count("orphan_fulfill")

    def _on_reject(self, src_client: str, pkt: IlpPacket,
                   api: EngineApi) -> None:
        key = (pkt.payment_id, pkt.seq)
        relay = self.relays.get(key)
        if relay is not None:
            if src_client != relay.downstream_peer or relay.fulfilled:
                return
            out_link = self.links.get(relay.downstream_peer)
            if out_link is not None:
                out_link.ledger.void_hold(relay.downstream_hold, api.now)
            del self.relays[key]
            self.txlog.add(api.now, self.client_id, "reject", pkt.payment_id,
                           pkt.seq, 0,
                           REJECT_NAMES.get(pkt.code, str(pkt.code)))
            self._send(api, relay.upstream_peer, pkt)
            return
        for sess in self.sessions.values():
            if sess.payment_id == pkt.payment_id:
                self._stream_on_reject(api, sess, pkt)
                return
        for probe in self.pings.values():
            if self._ping_pid(probe) == pkt.payment_id:
                sent = probe.outstanding.pop(pkt.seq, None)
                if sent is not None:
                    probe.timeouts += 1
                    probe.outcomes.append((pkt.seq, sent, -1.0, "timeout"))
                    api.cancel_timer(self.client_id,
                                     ("ping", probe.probe_id, pkt.seq))
                return

    # -- engine callbacks --

    def on_deliver(self, src_client: str, body: bytes, wire_bytes: int,
                   api: EngineApi) -> None:
        raw = self.transport.on_deliver(self, src_client, body, api)
        if raw is not None:
            self.handle_packet(src_client, raw, api)

    def on_raw(self, src_client: str, body: bytes, api: EngineApi) -> None:
        raw = self.transport.on_raw(self, src_client, body, api)
        if raw is not None:
            self.handle_packet(src_client, raw, api)

    def on_timer(self, timer_id: tuple, data: object, api: EngineApi) -> None:
        if self.transport.on_timer(self, timer_id, data, api):
            return
        kind = timer_id[0]
        if kind == "sess":
            sess = self.sessions.get(timer_id[1])
            if sess is not None and sess.state == STREAM_RUNNING:
                self._count("stream_timeout")
                self._retry_stream(api, sess)
        elif kind == "ping":
            probe = self.pings.get(timer_id[1])
            if probe is not None:
                sent = probe.outstanding.pop(timer_id[2], None)
                if sent is not None:
                    probe.timeouts += 1
                    probe.outcomes.append((timer_id[2], sent, -1.0, "timeout"))
        elif kind == "ping_next":
            probe = self.pings.get(timer_id[1])
            if probe is not None:
                self._ping_fire(api, probe)


# --- settlement audit ------------------------------------------------------------------------

@dataclass
class SettleReport:
    ok: bool
    problems: List[str]
    per_ledger: Dict[str, Dict[str, int]]
    fees_by_connector: Dict[str, int]
    connector_losses: Dict[str, int]


def settle_check(ledgers: List[Ledger], now: float,
                 txlog: Optional[TxLog] = None) -> SettleReport:
    """Recompute conservation and value-movement invariants from the books,
    then cross-check connector margins against the packet log."""
    problems: List[str] = []
    per_ledger: Dict[str, Dict[str, int]] = {}
    edge_flow: Dict[Tuple[str, str], int] = {}

    for ledger in ledgers:
        ledger.sweep(now)
        if not ledger.conserved():
            problems.append(f"ledger {ledger.name}: money not conserved")
        per_ledger[ledger.name] = {
            "balance_total": sum(ledger.accounts.values()),
            "escrow": ledger.escrow_total(),
            "initial": ledger.initial_total,
        }
        for group, hold_ids in ledger.groups.items():
            executed = [h for h in hold_ids
                        if ledger.holds[h].state == HOLD_EXECUTED]
            if len(executed) > 1:
                problems.append(
                    f"ledger {ledger.name}: group {group} executed "
                    f"{len(executed)} times")
            pid, seq, edge = group.rsplit(":", 2)
            payer, payee = edge.split(">")
            for h in executed:
                amt = ledger.holds[h].amount
                edge_flow[(payer, payee)] = (
                    edge_flow.get((payer, payee), 0) + amt)

    inflow: Dict[str, int] = {}
    outflow: Dict[str, int] = {}
    for (payer, payee), amount in edge_flow.items():
        outflow[payer] = outflow.get(payer, 0) + amount
        inflow[payee] = inflow.get(payee, 0) + amount

    fees: Dict[str, int] = {}
    losses: Dict[str, int] = {}
    for party in set(inflow) & set(outflow):
        margin = inflow.get(party, 0) - outflow.get(party, 0)
        if margin >= 0:
            fees[party] = margin
        else:
            losses[party] = -margin
            problems.append(f"connector {party} lost {-margin}")

    if txlog is not None:
        for party, fee in fees.items():
            if party in losses:
                continue
            claimed: Dict[Tuple[str, int], int] = {}
            relayed: Dict[Tuple[str, int], int] = {}
            for _t, actor, kind, pid, seq, amount, result in txlog.rows:
                if actor != party:
                    continue
                if kind == "fulfill" and result == "claimed":
                    claimed[(pid, seq)] = amount
                elif kind == "forward" and result == "relayed":
                    relayed[(pid, seq)] = amount
            expected = sum(amount - relayed[key]
                           for key, amount in claimed.items()
                           if key in relayed)
            if expected != fee:
                problems.append(
                    f"connector {party}: ledger fee {fee} != logged {expected}")
    return SettleReport(ok=not problems, problems=problems,
                        per_ledger=per_ledger, fees_by_connector=fees,
                        connector_losses=losses)
