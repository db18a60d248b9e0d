"""Wizard/observer synchronization: framing, clock offset, relay, and merge.

The instance that created the session owns the canonical clock and the merged
log. Remote annotation timestamps are normalized onto that clock with the
estimated offset; the live relay is best-effort and the post-pilot merge is
the correctness mechanism.
"""
from __future__ import annotations

import json
import socket
import struct
import threading
import uuid
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Iterable, Optional

from .errors import (
    MalformedFrame,
    NoSamples,
    RunIdMismatch,
    UnknownMsgType,
)
from .model import Annotation, Timestamp, annotation_from_dict, annotation_to_dict
from .session import PilotRun, Session

PROTOCOL_VERSION = 1

_LEN = struct.Struct(">I")


class MsgType(Enum):
    HELLO = "Hello"
    PING = "Ping"
    PONG = "Pong"
    ANNOTATION = "AnnotationMsg"
    PHASE_CHANGE = "PhaseChange"
    STATS_DIGEST = "StatsDigest"
    BYE = "Bye"


@dataclass(frozen=True)
class SyncEnvelope:
    msg_type: MsgType
    sender: str
    seq: int
    sent_at: Timestamp  # sender clock
    body: dict


def encode_envelope(env: SyncEnvelope) -> bytes:
    doc = {
        "msg_type": env.msg_type.value,
        "sender": env.sender,
        "seq": env.seq,
        "sent_at": env.sent_at,
        "body": env.body,
    }
    payload = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _LEN.pack(len(payload)) + payload


def decode_envelope(data: bytes) -> SyncEnvelope:
    """Decode one complete frame: [4-byte BE length][UTF-8 JSON]."""
    if len(data) < 4:
        raise MalformedFrame("truncated length prefix")
    (length,) = _LEN.unpack_from(data, 0)
    if len(data) - 4 < length:
        raise MalformedFrame(f"frame holds {len(data) - 4} of {length} bytes")
    try:
        doc = json.loads(data[4 : 4 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedFrame(str(exc)) from exc
    if not isinstance(doc, dict):
        raise MalformedFrame("frame body is not a JSON object")
    try:
        msg_type = MsgType(doc["msg_type"])
    except ValueError:
        raise UnknownMsgType(str(doc.get("msg_type"))) from None
    except KeyError:
        raise MalformedFrame("missing msg_type") from None
    try:
        return SyncEnvelope(
            msg_type=msg_type,
            sender=doc["sender"],
            seq=doc["seq"],
            sent_at=doc["sent_at"],
            body=doc.get("body", {}),
        )
    except KeyError as exc:
        raise MalformedFrame(f"missing field {exc}") from exc


class FrameAssembler:
    """Incremental frame splitter for a byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[SyncEnvelope]:
        self._buf.extend(data)
        out = []
        while True:
            if len(self._buf) < 4:
                break
            (length,) = _LEN.unpack_from(self._buf, 0)
            if len(self._buf) - 4 < length:
                break
            frame = bytes(self._buf[: 4 + length])
            del self._buf[: 4 + length]
            out.append(decode_envelope(frame))
        return out

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)


# ---------------------------------------------------------------------------
# Clock offset estimation

@dataclass(frozen=True)
class PingSample:
    t1: Timestamp  # requester send, requester clock
    t2: Timestamp  # responder receive, responder clock
    t3: Timestamp  # responder send, responder clock
    t4: Timestamp  # requester receive, requester clock

    def __post_init__(self):
        if self.t4 < self.t1 or self.t3 < self.t2:
            raise ValueError(f"inconsistent ping sample: {self}")

    @property
    def offset(self) -> float:
        return ((self.t2 - self.t1) + (self.t3 - self.t4)) / 2

    @property
    def rtt(self) -> int:
        return (self.t4 - self.t1) - (self.t3 - self.t2)


@dataclass(frozen=True)
class ClockOffset:
    offset_ms: float  # responder clock minus requester clock
    rtt_ms: float
    sample_count: int


ZERO_OFFSET = ClockOffset(0.0, 0.0, 0)


def estimate_offset(samples: list[PingSample]) -> ClockOffset:
    """NTP-style estimate: the offset of the minimum-RTT sample wins."""
    if not samples:
        raise NoSamples("need at least one ping sample")
    best = min(samples, key=lambda s: s.rtt)
    return ClockOffset(offset_ms=best.offset, rtt_ms=best.rtt,
                       sample_count=len(samples))


# ---------------------------------------------------------------------------
# Remote annotation application and log merge

def normalize_annotation(ann: Annotation, offset: ClockOffset,
                         anchor_wall: Optional[Timestamp]) -> Annotation:
    """Shift a remote annotation onto the authority clock and recompute its
    media offset against the local recording anchor."""
    wall = ann.wall_time - round(offset.offset_ms)
    media = ann.media_offset
    if anchor_wall is not None:
        media = max(0, wall - anchor_wall)
    if wall == ann.wall_time and media == ann.media_offset:
        return ann
    return replace(ann, wall_time=wall, media_offset=media)


def apply_remote(session: Session, run: PilotRun, env: SyncEnvelope,
                 offset: ClockOffset = ZERO_OFFSET) -> Annotation:
    """Insert one relayed annotation; duplicate deliveries are no-ops."""
    if env.msg_type != MsgType.ANNOTATION:
        raise UnknownMsgType(f"expected AnnotationMsg, got {env.msg_type.value}")
    ann = annotation_from_dict(env.body["annotation"])
    if ann.run_id != run.id:
        raise RunIdMismatch(f"{ann.run_id} != {run.id}")
    from .model import Origin

    ann = replace(ann, origin=Origin.REMOTE)
    with session.lock:
        ann = normalize_annotation(ann, offset, session._anchor(run))
        inserted_ann, inserted = run.insert(ann)
        if inserted:
            session._emit_annotation(run, inserted_ann)
        return inserted_ann


def merge_runs(local: PilotRun, remote_log: Iterable[Annotation],
               offset: ClockOffset = ZERO_OFFSET) -> PilotRun:
    """Union the local log with a remote one on a fresh run object.

    Remote timestamps are normalized via ``offset``; ids already present
    locally win (idempotent merge). Statistics are recomputed from scratch.
    """
    if local.running:
        raise RunIdMismatch("merge requires a stopped local run")
    merged = PilotRun(
        run_id=local.id,
        participant_id=local.participant_id,
        session_label=local.session_label,
        anticipated_duration_ms=local.anticipated_duration_ms,
        start_time=local.start_time,
        pinned_names=local.pinned_names,
    )
    merged.stop_time = local.stop_time
    merged.archive_ref = local.archive_ref
    merged.anchor_wall = local.anchor_wall
    merged.archive_duration_ms = local.archive_duration_ms
    merged.elapsed_fired = local.elapsed_fired
    merged.audit = list(local.audit)

    by_id: dict[uuid.UUID, Annotation] = {a.id: a for a in local.annotations}
    anchor = local.anchor_wall
    for ann in remote_log:
        if ann.run_id != local.id:
            raise RunIdMismatch(f"{ann.run_id} != {local.id}")
        if ann.id in by_id:
            continue
        by_id[ann.id] = normalize_annotation(ann, offset, anchor)
    union = list(by_id.values())
    if anchor is not None:
        # re-anchor every media offset so both sides agree byte-for-byte even
        # when one recorded against a provisional anchor
        union = [
            a if a.media_offset == max(0, a.wall_time - anchor)
            else replace(a, media_offset=max(0, a.wall_time - anchor))
            for a in union
        ]
    merged.rebuild(union)
    return merged


# ---------------------------------------------------------------------------
# Sequence tracking (per-sender gap and duplicate detection)

class SequenceTracker:
    def __init__(self, on_gap: Optional[Callable[[str, int, int], None]] = None):
        self._last: dict[str, int] = {}
        self.on_gap = on_gap

    def admit(self, sender: str, seq: int) -> bool:
        """True when the message should be applied; False for replays."""
        last = self._last.get(sender)
        if last is not None and seq <= last:
            return False
        if last is not None and seq > last + 1 and self.on_gap is not None:
            self.on_gap(sender, last + 1, seq - 1)
        self._last[sender] = seq
        return True


# ---------------------------------------------------------------------------
# TCP transport

class SyncConnection:
    """Framed envelope exchange over a connected socket."""

    def __init__(self, sock: socket.socket, instance_id: str,
                 clock: Callable[[], Timestamp]):
        self.sock = sock
        self.instance_id = instance_id
        self.clock = clock
        self._assembler = FrameAssembler()
        self._pending: list[SyncEnvelope] = []
        self._seq = 0
        self._send_lock = threading.Lock()

    def next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def send(self, msg_type: MsgType, body: dict) -> SyncEnvelope:
        env = SyncEnvelope(msg_type, self.instance_id, self.next_seq(),
                           self.clock(), body)
        with self._send_lock:
            self.sock.sendall(encode_envelope(env))
        return env

    def recv(self, timeout: Optional[float] = None) -> Optional[SyncEnvelope]:
        if self._pending:
            return self._pending.pop(0)
        self.sock.settimeout(timeout)
        while True:
            try:
                data = self.sock.recv(65536)
            except socket.timeout:
                return None
            if not data:
                return None
            envelopes = self._assembler.feed(data)
            if envelopes:
                self._pending.extend(envelopes[1:])
                return envelopes[0]

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


def ping_exchange(conn: SyncConnection, count: int = 10) -> list[PingSample]:
    """Run ``count`` ping/pong round trips; timestamps taken at I/O boundaries."""
    samples = []
    for _ in range(count):
        t1 = conn.clock()
        conn.send(MsgType.PING, {"t1": t1})
        env = conn.recv(timeout=5.0)
        t4 = conn.clock()
        if env is None or env.msg_type != MsgType.PONG:
            continue
        samples.append(PingSample(t1=env.body["t1"], t2=env.body["t2"],
                                  t3=env.body["t3"], t4=t4))
    return samples


def answer_ping(conn: SyncConnection, env: SyncEnvelope) -> None:
    t2 = conn.clock()
    conn.send(MsgType.PONG, {"t1": env.body["t1"], "t2": t2, "t3": conn.clock()})


def hello_body(instance_id: str, role: str, session_id: str) -> dict:
    return {
        "instance_id": instance_id,
        "role": role,
        "protocol_version": PROTOCOL_VERSION,
        "session_id": session_id,
    }


def annotation_envelope_body(ann: Annotation) -> dict:
    return {"annotation": annotation_to_dict(ann)}


# ---------------------------------------------------------------------------
# Live peers: the wizard listens, observers connect

class SyncListener:
    """Authority-side endpoint: accepts observers, answers pings, applies
    their annotations, and relays local annotations and phase changes out."""

    def __init__(self, session: Session, clock: Callable[[], Timestamp],
                 session_id: str, host: str = "127.0.0.1", port: int = 0,
                 on_gap: Optional[Callable[[str, int, int], None]] = None):
        self.session = session
        self.clock = clock
        self.session_id = session_id
        self.tracker = SequenceTracker(on_gap=on_gap)
        self.peers: list[SyncConnection] = []
        self._peers_lock = threading.Lock()
        self._server = socket.create_server((host, port))
        self.address = self._server.getsockname()
        self._threads: list[threading.Thread] = []
        self._closing = False

    def start(self) -> None:
        t = threading.Thread(target=self._accept_loop, daemon=True)
        t.start()
        self._threads.append(t)

    def _accept_loop(self) -> None:
        while not self._closing:
            try:
                sock, _ = self._server.accept()
            except OSError:
                return
            conn = SyncConnection(sock, self.session.instance_id, self.clock)
            t = threading.Thread(target=self._serve_peer, args=(conn,), daemon=True)
            t.start()
            self._threads.append(t)

    def _serve_peer(self, conn: SyncConnection) -> None:
        hello = conn.recv(timeout=10.0)
        if hello is None or hello.msg_type != MsgType.HELLO:
            conn.close()
            return
        if hello.body.get("protocol_version") != PROTOCOL_VERSION:
            conn.send(MsgType.BYE, {"reason": "protocol version mismatch"})
            conn.close()
            return
        peer_session = hello.body.get("session_id")
        if peer_session and peer_session != self.session_id:
            conn.send(MsgType.BYE, {"reason": "unknown session"})
            conn.close()
            return
        conn.send(MsgType.HELLO, hello_body(
            self.session.instance_id, self.session.config.role.value,
            self.session_id))
        with self._peers_lock:
            self.peers.append(conn)
        try:
            while not self._closing:
                env = conn.recv(timeout=0.5)
                if env is None:
                    if conn.sock.fileno() < 0:
                        return
                    continue
                self._handle(conn, env)
                if env.msg_type == MsgType.BYE:
                    return
        except OSError:
            pass
        finally:
            with self._peers_lock:
                if conn in self.peers:
                    self.peers.remove(conn)
            conn.close()

    def _handle(self, conn: SyncConnection, env: SyncEnvelope) -> None:
        if env.msg_type == MsgType.PING:
            answer_ping(conn, env)
            return
        if not self.tracker.admit(env.sender, env.seq):
            return
        if env.msg_type == MsgType.ANNOTATION:
            run_id = uuid.UUID(env.body["annotation"]["run_id"])
            run = self.session.runs.get(run_id)
            if run is not None:
                # observers stamp on the authority clock, so no re-normalization
                apply_remote(self.session, run, env, ZERO_OFFSET)

    def broadcast(self, msg_type: MsgType, body: dict) -> None:
        with self._peers_lock:
            peers = list(self.peers)
        for conn in peers:
            try:
                conn.send(msg_type, body)
            except OSError:
                pass

    def close(self) -> None:
        self._closing = True
        try:
            self._server.close()
        except OSError:
            pass
        with self._peers_lock:
            for conn in self.peers:
                conn.close()
            self.peers.clear()


class SyncPeerError(Exception):
    pass


class SyncClient:
    """Observer-side endpoint: estimates the authority clock offset and keeps
    local annotations flowing up while mirroring the authority's run state."""

    def __init__(self, session: Session, clock: Callable[[], Timestamp],
                 session_id: str, host: str, port: int,
                 ping_count: int = 10,
                 on_gap: Optional[Callable[[str, int, int], None]] = None,
                 on_stats: Optional[Callable[[dict], None]] = None):
        self.session = session
        self.clock = clock
        self.session_id = session_id
        self.offset: ClockOffset = ZERO_OFFSET  # authority clock minus ours
        self.tracker = SequenceTracker(on_gap=on_gap)
        self.on_stats = on_stats
        sock = socket.create_connection((host, port), timeout=10.0)
        self.conn = SyncConnection(sock, session.instance_id, clock)
        self._closing = False
        self._thread: Optional[threading.Thread] = None
        self._handshake(ping_count)

    def _handshake(self, ping_count: int) -> None:
        self.conn.send(MsgType.HELLO, hello_body(
            self.session.instance_id, self.session.config.role.value,
            self.session_id))
        reply = self.conn.recv(timeout=10.0)
        if reply is None:
            raise SyncPeerError("no handshake reply")
        if reply.msg_type == MsgType.BYE:
            raise SyncPeerError(f"peer refused: {reply.body.get('reason')}")
        if reply.msg_type != MsgType.HELLO:
            raise SyncPeerError(f"unexpected {reply.msg_type.value} during handshake")
        samples = ping_exchange(self.conn, count=ping_count)
        if samples:
            self.offset = estimate_offset(samples)

    def to_authority(self, local_ms: Timestamp) -> Timestamp:
        return local_ms + round(self.offset.offset_ms)

    def start(self) -> None:
        self._thread = threading.Thread(target=self._recv_loop, daemon=True)
        self._thread.start()

    def send_annotation(self, ann: Annotation) -> None:
        self.conn.send(MsgType.ANNOTATION, annotation_envelope_body(ann))

    def _recv_loop(self) -> None:
        while not self._closing:
            try:
                env = self.conn.recv(timeout=0.5)
            except OSError:
                return
            if env is None:
                continue
            if env.msg_type == MsgType.BYE:
                return
            self._handle(env)

    def _handle(self, env: SyncEnvelope) -> None:
        if env.msg_type == MsgType.PING:
            answer_ping(self.conn, env)
            return
        if not self.tracker.admit(env.sender, env.seq):
            return
        if env.msg_type == MsgType.ANNOTATION:
            run_id = uuid.UUID(env.body["annotation"]["run_id"])
            run = self.session.runs.get(run_id)
            if run is not None:
                apply_remote(self.session, run, env, ZERO_OFFSET)
        elif env.msg_type == MsgType.PHASE_CHANGE:
            self._mirror_phase(env.body)
        elif env.msg_type == MsgType.STATS_DIGEST:
            if self.on_stats is not None:
                self.on_stats(env.body)

    def _mirror_phase(self, body: dict) -> None:
        action = body.get("action")
        if action == "run_started":
            self.session.adopt_run(
                run_id=uuid.UUID(body["run_id"]),
                participant_id=body.get("participant_id", ""),
                session_label=body.get("session_label", ""),
                anticipated_duration_ms=body.get("anticipated_duration_ms", 0),
                start_time=body["start_time"],
                anchor_wall=body.get("anchor_wall"),
            )
        elif action == "run_stopped":
            run = self.session.runs.get(uuid.UUID(body["run_id"]))
            if run is not None and run.running:
                self.session.close_adopted_run(
                    run, body["stop_time"],
                    archive_duration_ms=body.get("archive_duration_ms"),
                    anchor_wall=body.get("anchor_wall"),
                )

    def close(self) -> None:
        self._closing = True
        try:
            self.conn.send(MsgType.BYE, {"reason": "closing"})
        except OSError:
            pass
        self.conn.close()
