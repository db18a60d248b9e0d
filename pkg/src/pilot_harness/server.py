"""HTTP surface: session/run REST API, frame ingest and MJPEG relay, and the
server-pushed event feed.

Frame ingestion is a ``multipart/x-mixed-replace`` push to ``/ingest/{id}``
whose parts carry ``X-Seq``, ``X-Capture-Time`` (ms epoch) and an image body;
the relay at ``/streams/{id}.mjpeg`` re-emits parts with identical headers.
Events are served as SSE: one ``data:`` line per JSON event object
``{type, run_id, data, server_time}``, delivered in order per subscriber.
"""
from __future__ import annotations

import json
import queue
import threading
import time
import uuid
from pathlib import Path
from typing import Optional

from fastapi import Depends, FastAPI, HTTPException, Request, Response
from fastapi.responses import HTMLResponse, PlainTextResponse, StreamingResponse

from . import errors
from .analyzer import (
    AnnotationFilter,
    build_timeline,
    filter_annotations,
)
from .export import export_csv, export_report
from .media import (
    Frame,
    FrameEncoding,
    MediaEngine,
    RecordingArchive,
    render_image,
)
from .model import (
    AnnotationKind,
    ImageRef,
    Origin,
    Region,
    annotation_to_dict,
)
from .session import PilotRun, Session, stats_to_dict
from .storage import Storage, config_from_dict, config_to_dict, register_config_triggers

CLOCK_DISAGREEMENT_MS = 2_000  # beyond this, server time replaces client time


def now_ms() -> int:
    return int(time.time() * 1000)


class EventBus:
    """Ordered event fan-out with sequence numbers and a bounded replay log.

    Each subscriber sees every event exactly once, in publish order; the
    ``after`` cursor lets a reconnecting console resume without gaps.
    """

    HISTORY_LIMIT = 10_000

    def __init__(self, clock=now_ms):
        self.clock = clock
        self._subscribers: list[queue.SimpleQueue] = []
        self._history: list[dict] = []
        self._seq = 0
        self._lock = threading.Lock()

    def publish(self, event_type: str, run_id: Optional[uuid.UUID], data: dict) -> dict:
        with self._lock:
            self._seq += 1
            event = {
                "seq": self._seq,
                "type": event_type,
                "run_id": str(run_id) if run_id else None,
                "data": data,
                "server_time": self.clock(),
            }
            self._history.append(event)
            if len(self._history) > self.HISTORY_LIMIT:
                del self._history[: -self.HISTORY_LIMIT]
            # deliver under the lock so concurrent publishers cannot
            # interleave out of seq order in a subscriber's queue
            for q in self._subscribers:
                q.put(event)
        return event

    def subscribe(self, after: Optional[int] = None) -> queue.SimpleQueue:
        q: queue.SimpleQueue = queue.SimpleQueue()
        with self._lock:
            if after is not None:
                for event in self._history:
                    if event["seq"] > after:
                        q.put(event)
            self._subscribers.append(q)
        return q

    def unsubscribe(self, q: queue.SimpleQueue) -> None:
        with self._lock:
            if q in self._subscribers:
                self._subscribers.remove(q)


class MultipartPushParser:
    """Incremental parser for multipart/x-mixed-replace ingest bodies."""

    def __init__(self, boundary: str):
        self._delim = b"--" + boundary.encode("ascii")
        self._buf = bytearray()
        self._done = False

    def feed(self, chunk: bytes) -> list[tuple[dict, bytes]]:
        """Returns completed (headers, body) parts discovered so far."""
        self._buf.extend(chunk)
        parts = []
        while True:
            start = self._buf.find(self._delim)
            if start < 0:
                break
            head_end = self._buf.find(b"\r\n\r\n", start)
            if head_end < 0:
                break
            nxt = self._buf.find(self._delim, head_end)
            if nxt < 0:
                break
            raw_head = bytes(self._buf[start + len(self._delim) : head_end])
            body = bytes(self._buf[head_end + 4 : nxt])
            if body.endswith(b"\r\n"):
                body = body[:-2]
            del self._buf[:nxt]
            headers = {}
            for line in raw_head.split(b"\r\n"):
                if b":" in line:
                    name, _, value = line.partition(b":")
                    headers[name.strip().lower().decode("ascii")] = \
                        value.strip().decode("ascii", errors="replace")
            parts.append((headers, body))
            if bytes(self._buf[len(self._delim) : len(self._delim) + 2]) == b"--":
                self._done = True
                break
        return parts


def _boundary_of(content_type: str) -> Optional[str]:
    for piece in content_type.split(";"):
        piece = piece.strip()
        if piece.startswith("boundary="):
            return piece[len("boundary="):].strip('"')
    return None


def _frame_from_part(stream_id: str, headers: dict, body: bytes,
                     server_now: int) -> Frame:
    seq = int(headers["x-seq"])
    substituted = "x-capture-time" not in headers
    capture = server_now if substituted else int(headers["x-capture-time"])
    encoding = FrameEncoding.JPEG
    if headers.get("x-encoding") == "raw_rgb" or \
            headers.get("content-type", "").startswith("application/octet-stream"):
        encoding = FrameEncoding.RAW_RGB
    if "x-width" in headers and "x-height" in headers:
        width, height = int(headers["x-width"]), int(headers["x-height"])
    elif encoding == FrameEncoding.JPEG:
        from io import BytesIO

        from PIL import Image

        with Image.open(BytesIO(body)) as img:
            width, height = img.size
    else:
        raise ValueError("raw frames need X-Width/X-Height headers")
    return Frame(stream_id, seq, capture, width, height, encoding, bytes(body),
                 time_substituted=substituted)


_ERROR_STATUS = {
    errors.UnknownId: 404,
    errors.UnknownRun: 404,
    errors.NoFrameAvailable: 404,
    errors.ArchiveMissing: 409,
    errors.RunNotActive: 409,
    errors.ChecklistIncomplete: 409,
    errors.StreamUnavailable: 409,
    errors.AlreadyRecording: 409,
    errors.NotRecording: 409,
    errors.DuplicateStreamId: 409,
    errors.PayloadMismatch: 422,
    errors.IllegalKindChange: 422,
    errors.OffsetOutOfRange: 422,
    errors.SpanOutOfRange: 422,
    errors.OverlappingSpans: 422,
    errors.UnknownEventSource: 422,
    errors.BindingError: 422,
    errors.BadHeader: 422,
    errors.BadRow: 422,
    errors.BadConfig: 422,
}


def _http_error(exc: errors.HarnessError) -> HTTPException:
    for klass, status in _ERROR_STATUS.items():
        if isinstance(exc, klass):
            detail = {"error": type(exc).__name__, "message": str(exc)}
            if isinstance(exc, errors.ChecklistIncomplete):
                detail["unchecked"] = exc.unchecked
            return HTTPException(status_code=status, detail=detail)
    return HTTPException(status_code=500, detail=str(exc))


class AppState:
    """Everything one harness instance owns: session, media, events, storage."""

    def __init__(self, data_dir: Path, instance_id: str = "local",
                 token: Optional[str] = None, clock=now_ms,
                 id_factory=None):
        self.data_dir = Path(data_dir)
        self.instance_id = instance_id
        self.token = token
        self.clock = clock
        self.id_factory = id_factory or uuid.uuid4
        self.storage = Storage(self.data_dir)
        self.engine = MediaEngine(self.storage.archives_dir)
        self.bus = EventBus(clock=clock)
        self.sessions: dict[uuid.UUID, Session] = {}
        self.active_session_id: Optional[uuid.UUID] = None
        self.authority_offset_ms: float = 0.0  # observer -> authority clock
        self.relay_annotation = None  # set by the sync wiring

    # -- session plumbing ---------------------------------------------------

    def _event_sink(self, event_type: str, run_id, data: dict) -> None:
        self.bus.publish(event_type, run_id, data)
        if event_type == "annotation" and self.relay_annotation is not None:
            self.relay_annotation(data)
        if event_type == "run_stopped" and run_id is not None:
            # covers mirrored runs closed by the sync peer, not just HTTP stops
            for session in self.sessions.values():
                run = session.runs.get(run_id)
                if run is not None:
                    self.persist_run(run)
                    break

    def create_session(self, doc: dict) -> tuple[uuid.UUID, Session]:
        config = config_from_dict(doc)
        session = Session(config, instance_id=self.instance_id,
                          media=self.engine, id_factory=self.id_factory,
                          event_sink=self._event_sink)
        register_config_triggers(session, doc)
        for desc in filter(None, [config.fpv_source, config.tpv_source]):
            if self.engine.handle(desc.stream_id) is None:
                self.engine.open_stream(desc)
        session_id = self.id_factory()
        self.sessions[session_id] = session
        self.active_session_id = session_id
        self.storage.save_session(session_id, config)
        return session_id, session

    def session_of(self, session_id: uuid.UUID) -> Session:
        try:
            return self.sessions[session_id]
        except KeyError:
            raise HTTPException(404, detail="unknown session") from None

    @property
    def active_session(self) -> Optional[Session]:
        if self.active_session_id is None:
            return None
        return self.sessions.get(self.active_session_id)

    def find_run(self, run_id: uuid.UUID) -> tuple[Optional[Session], PilotRun]:
        for session in self.sessions.values():
            run = session.runs.get(run_id)
            if run is not None:
                return session, run
        try:
            return None, self.storage.load_run(run_id)
        except errors.UnknownRun:
            raise HTTPException(404, detail="unknown run") from None

    def archive_of(self, run: PilotRun) -> Optional[RecordingArchive]:
        if run.archive_ref is None:
            return None
        archive = self.engine.archives.get(run.archive_ref)
        if archive is not None:
            return archive
        return self.storage.load_archive(run.archive_ref)

    def image_resolver(self, run: PilotRun):
        archive = self.archive_of(run)

        def resolve(ref: ImageRef):
            frame = None
            if archive is not None:
                try:
                    frame = archive.frame_by_seq(ref.stream_id, ref.seq)
                except errors.NoFrameAvailable:
                    frame = None
            if frame is None:
                try:
                    frame = self.engine.resolve_frame(ref)
                except errors.NoFrameAvailable:
                    return None
            return render_image(frame, ref.region)

        return resolve

    def persist_run(self, run: PilotRun) -> None:
        self.storage.save_run(run)


def create_app(state: AppState, static_dir: Optional[Path] = None) -> FastAPI:
    app = FastAPI(title="pilot-harness", docs_url=None, redoc_url=None)
    app.state.harness = state

    def auth(request: Request) -> None:
        if state.token is None:
            return
        header = request.headers.get("authorization", "")
        if header == f"Bearer {state.token}":
            return
        if request.query_params.get("token") == state.token:
            return
        raise HTTPException(401, detail="missing or wrong token")

    guarded = Depends(auth)

    # -- status ------------------------------------------------------------

    @app.get("/status")
    def status(_=guarded):
        session = state.active_session
        return {
            "instance_id": state.instance_id,
            "session_id": str(state.active_session_id) if session else None,
            "role": session.config.role.value if session else None,
            "phase": session.phase.value if session else None,
            "server_time": state.clock(),
        }

    # -- sessions -------------------------------------------------------------

    @app.post("/sessions", status_code=201)
    async def create_session(request: Request, _=guarded):
        doc = await request.json()
        try:
            session_id, session = state.create_session(doc)
        except errors.HarnessError as exc:
            raise _http_error(exc)
        return {"session_id": str(session_id),
                "config": config_to_dict(session.config)}

    @app.get("/sessions/{session_id}")
    def get_session(session_id: uuid.UUID, _=guarded):
        session = state.session_of(session_id)
        return {
            "session_id": str(session_id),
            "phase": session.phase.value,
            "config": config_to_dict(session.config),
            "current_run": str(session.current_run.id) if session.current_run else None,
        }

    @app.post("/sessions/{session_id}/checklist/{index}")
    def set_checklist(session_id: uuid.UUID, index: int, body: dict, _=guarded):
        session = state.session_of(session_id)
        try:
            session.set_checklist_item(index, bool(body.get("checked", True)))
        except IndexError:
            raise HTTPException(404, detail="no such checklist item") from None
        return {"checklist": [{"text": c.text, "checked": c.checked}
                              for c in session.config.checklist]}

    @app.post("/sessions/{session_id}/start", status_code=201)
    def start_pilot(session_id: uuid.UUID, body: dict, _=guarded):
        session = state.session_of(session_id)
        now = int(body.get("now", state.clock()))
        try:
            run = session.start_pilot(
                participant_id=body.get("participant_id", ""),
                session_label=body.get("session_label", ""),
                anticipated_duration_ms=int(body.get("anticipated_duration_ms", 0)),
                now=now,
            )
        except errors.HarnessError as exc:
            raise _http_error(exc)
        return {"run": run.to_dict()}

    # -- runs --------------------------------------------------------------------

    @app.post("/runs/{run_id}/stop")
    def stop_run(run_id: uuid.UUID, body: Optional[dict] = None, _=guarded):
        session, run = state.find_run(run_id)
        if session is None:
            raise HTTPException(409, detail="run is not live on this instance")
        now = int((body or {}).get("now", state.clock()))
        try:
            session.stop_pilot(run, now)
        except errors.HarnessError as exc:
            raise _http_error(exc)
        state.persist_run(run)
        return {"run": run.to_dict()}

    @app.post("/runs/{run_id}/annotations", status_code=201)
    def post_annotation(run_id: uuid.UUID, body: dict, _=guarded):
        session, run = state.find_run(run_id)
        if session is None:
            raise HTTPException(409, detail="run is not live on this instance")
        server_now = state.clock()
        event_time = body.get("event_time")
        substituted = False
        if event_time is None:
            event_time = server_now
        elif abs(int(event_time) - server_now) > CLOCK_DISAGREEMENT_MS:
            event_time = server_now
            substituted = True
        else:
            event_time = int(event_time)
        if state.authority_offset_ms:
            event_time += round(state.authority_offset_ms)
        origin = Origin(body.get("origin", "live"))
        region = None
        if body.get("region"):
            r = body["region"]
            region = Region(r["x"], r["y"], r["w"], r["h"])
        try:
            if "key" in body:
                ann = session.record_by_key(run, body["key"], event_time,
                                            note=body.get("note", ""),
                                            region=region, origin=origin)
            elif "kind" in body:
                ann = session.record_annotation(
                    run, kind=AnnotationKind.parse(body["kind"]),
                    event_time=event_time, note=body.get("note", ""),
                    origin=origin, region=region,
                    media_offset=body.get("media_offset"),
                )
            else:
                raise HTTPException(422, detail="need key or kind")
        except errors.HarnessError as exc:
            raise _http_error(exc)
        return {"annotation": annotation_to_dict(ann),
                "time_substituted": substituted}

    @app.patch("/runs/{run_id}/annotations/{annotation_id}")
    def patch_annotation(run_id: uuid.UUID, annotation_id: uuid.UUID,
                         body: dict, _=guarded):
        session, run = state.find_run(run_id)
        if session is None:
            raise HTTPException(409, detail="run is not live on this instance")
        patch = {k: v for k, v in body.items()
                 if k in ("wall_time", "media_offset", "kind", "note")}
        try:
            ann = session.edit_annotation(run, annotation_id, patch)
        except errors.HarnessError as exc:
            raise _http_error(exc)
        except ValueError as exc:
            raise HTTPException(422, detail=str(exc)) from exc
        state.persist_run(run)
        return {"annotation": annotation_to_dict(ann)}

    @app.get("/runs/{run_id}/stats")
    def get_stats(run_id: uuid.UUID, _=guarded):
        _, run = state.find_run(run_id)
        return stats_to_dict(run.live_stats())

    @app.get("/runs/{run_id}/annotations")
    def get_annotations(run_id: uuid.UUID, kinds: Optional[str] = None,
                        authors: Optional[str] = None,
                        from_ms: Optional[int] = None,
                        to_ms: Optional[int] = None,
                        q: Optional[str] = None, _=guarded):
        _, run = state.find_run(run_id)
        try:
            f = AnnotationFilter(
                kinds=frozenset(AnnotationKind.parse(k)
                                for k in kinds.split(",")) if kinds else frozenset(),
                authors=frozenset(authors.split(",")) if authors else frozenset(),
                time_range=(from_ms or 0, to_ms) if to_ms is not None
                else ((from_ms, 2**62) if from_ms is not None else None),
                text_query=q,
            )
        except ValueError as exc:
            raise HTTPException(422, detail=str(exc)) from exc
        return {"annotations": [annotation_to_dict(a)
                                for a in filter_annotations(run, f)]}

    @app.post("/runs/{run_id}/transcripts", status_code=201)
    def post_transcripts(run_id: uuid.UUID, body: dict, _=guarded):
        session, run = state.find_run(run_id)
        if session is None:
            raise HTTPException(409, detail="run is not live on this instance")
        utterances = [(u["start_ms"], u["end_ms"], u["text"])
                      for u in body.get("utterances", [])]
        try:
            created = session.attach_transcripts(run, utterances)
        except errors.HarnessError as exc:
            raise _http_error(exc)
        state.persist_run(run)
        return {"annotations": [annotation_to_dict(a) for a in created]}

    @app.get("/runs/{run_id}/timeline")
    def get_timeline(run_id: uuid.UUID, _=guarded):
        _, run = state.find_run(run_id)
        try:
            timeline = build_timeline(run, state.archive_of(run))
        except errors.HarnessError as exc:
            raise _http_error(exc)
        return {
            "run_id": str(timeline.run_id),
            "duration_ms": timeline.duration_ms,
            "markers": [
                {
                    "media_offset": m.media_offset,
                    "annotation_id": str(m.annotation_id),
                    "kind": m.kind.wire_name,
                    "color": m.color,
                }
                for m in timeline.markers
            ],
        }

    @app.get("/runs/{run_id}/export.csv")
    def get_csv(run_id: uuid.UUID, _=guarded):
        _, run = state.find_run(run_id)
        return PlainTextResponse(export_csv(run), media_type="text/csv")

    @app.get("/runs/{run_id}/report.html")
    def get_report(run_id: uuid.UUID, _=guarded):
        _, run = state.find_run(run_id)
        html = export_report(run, resolve=state.image_resolver(run))
        return HTMLResponse(html)

    @app.get("/runs/{run_id}/frame")
    def get_frame(run_id: uuid.UUID, offset: int, stream: Optional[str] = None,
                  _=guarded):
        _, run = state.find_run(run_id)
        archive = state.archive_of(run)
        if archive is None:
            raise HTTPException(409, detail="run has no archive")
        try:
            frame = archive.frame_at(offset, stream)
        except errors.HarnessError as exc:
            raise _http_error(exc)
        data, mime = render_image(frame)
        return Response(content=data, media_type=mime, headers={
            "X-Seq": str(frame.seq),
            "X-Capture-Time": str(frame.capture_time),
        })

    # -- events -------------------------------------------------------------------

    @app.get("/events")
    def events(request: Request, after: Optional[int] = None,
               limit: Optional[int] = None, _=guarded):
        q = state.bus.subscribe(after=after)

        def gen():
            sent = 0
            try:
                while limit is None or sent < limit:
                    try:
                        event = q.get(timeout=1.0)
                    except queue.Empty:
                        if limit is not None:
                            break
                        yield ": keepalive\n\n"
                        continue
                    yield (f"id: {event['seq']}\n"
                           f"data: {json.dumps(event, sort_keys=True)}\n\n")
                    sent += 1
            finally:
                state.bus.unsubscribe(q)

        return StreamingResponse(gen(), media_type="text/event-stream")

    # -- media ---------------------------------------------------------------------

    @app.post("/ingest/{stream_id}")
    async def ingest(stream_id: str, request: Request, _=guarded):
        handle = state.engine.handle(stream_id)
        if handle is None:
            raise HTTPException(404, detail=f"stream {stream_id!r} not configured")
        boundary = _boundary_of(request.headers.get("content-type", ""))
        if boundary is None:
            raise HTTPException(422, detail="multipart boundary required")
        parser = MultipartPushParser(boundary)
        accepted = dropped = 0
        async for chunk in request.stream():
            for headers, body in parser.feed(chunk):
                try:
                    frame = _frame_from_part(stream_id, headers, body, state.clock())
                except (KeyError, ValueError) as exc:
                    raise HTTPException(422, detail=f"bad part: {exc}") from exc
                if state.engine.ingest_frame(handle, frame) is None:
                    accepted += 1
                else:
                    dropped += 1
        return {"accepted": accepted, "dropped": dropped}

    @app.get("/streams/{stream_id}.mjpeg")
    def relay(stream_id: str, limit: Optional[int] = None, _=guarded):
        if state.engine.handle(stream_id) is None:
            raise HTTPException(404, detail=f"stream {stream_id!r} not configured")
        sub = state.engine.subscribe(stream_id, include_latest=True)

        def gen():
            sent = 0
            try:
                while limit is None or sent < limit:
                    frame = sub.get(timeout=5.0)
                    if frame is None:
                        if limit is not None:
                            break
                        continue
                    mime = "image/jpeg" if frame.encoding == FrameEncoding.JPEG \
                        else "application/octet-stream"
                    head = (
                        f"--frame\r\n"
                        f"Content-Type: {mime}\r\n"
                        f"X-Seq: {frame.seq}\r\n"
                        f"X-Capture-Time: {frame.capture_time}\r\n"
                        f"Content-Length: {len(frame.data)}\r\n\r\n"
                    ).encode("ascii")
                    yield head + frame.data + b"\r\n"
                    sent += 1
            finally:
                state.engine.unsubscribe(sub)

        return StreamingResponse(
            gen(), media_type="multipart/x-mixed-replace; boundary=frame")

    if static_dir is not None and Path(static_dir).exists():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=static_dir, html=True), name="console")

    return app
