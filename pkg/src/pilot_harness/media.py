"""Media pipeline: stream ingestion, live relay fan-out, and recording archives.

A recording archive is one directory holding, per recorded stream, an
append-only frame container plus a JSON index, and an ``archive.json``
metadata document:

    {archive_dir}/
        archive.json
        fpv.frames          # [4-byte BE record length][header JSON][payload]
        fpv.index.json      # {"entries": [[seq, capture_time, byte_offset], ...]}
        tpv.frames
        tpv.index.json

Each container record's length prefix covers the JSON header and the payload
bytes together; the header is parsed with an incremental JSON decode so the
payload needs no second length field. Byte offsets in the index point at the
record's length prefix. Sealed archives are immutable.
"""
from __future__ import annotations

import json
import queue
import struct
import threading
import uuid
from bisect import bisect_right
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Iterator, Optional

from .errors import (
    AlreadyRecording,
    DuplicateStreamId,
    NoFrameAvailable,
    NotRecording,
    OffsetOutOfRange,
    SourceUnreachable,
)
from .model import ImageRef, MediaOffset, Region, Timestamp

_LEN = struct.Struct(">I")
_DECODER = json.JSONDecoder()

DEFAULT_BUFFER_MS = 30_000  # live ring buffer depth
RELAY_QUEUE_DEPTH = 64  # per-subscriber; overflow drops, never reorders


@dataclass(frozen=True)
class StreamDescriptor:
    stream_id: str
    source_url: str
    expected_fps: float
    credentials: Optional[str] = None

    def __post_init__(self):
        if self.expected_fps <= 0:
            raise ValueError("expected_fps must be positive")


class FrameEncoding(Enum):
    JPEG = "jpeg"
    RAW_RGB = "raw_rgb"


@dataclass(frozen=True)
class Frame:
    stream_id: str
    seq: int
    capture_time: Timestamp
    width: int
    height: int
    encoding: FrameEncoding
    data: bytes
    time_substituted: bool = False


class DropReason(Enum):
    OUT_OF_ORDER = "out_of_order"
    BACKPRESSURE = "backpressure"


def encode_record(frame: Frame) -> bytes:
    header = {
        "seq": frame.seq,
        "capture_time": frame.capture_time,
        "stream_id": frame.stream_id,
        "width": frame.width,
        "height": frame.height,
        "encoding": frame.encoding.value,
    }
    if frame.time_substituted:
        header["time_substituted"] = True
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _LEN.pack(len(head) + len(frame.data)) + head + frame.data


def decode_record(buf: bytes, offset: int = 0) -> tuple[Frame, int]:
    """Decode one record at ``offset``; returns the frame and the next offset."""
    (length,) = _LEN.unpack_from(buf, offset)
    body = buf[offset + 4 : offset + 4 + length]
    # Headers are ASCII (json.dumps default), so the latin-1 view keeps byte
    # and character indices aligned while raw_decode finds the JSON boundary.
    header, end = _DECODER.raw_decode(body.decode("latin-1"))
    frame = Frame(
        stream_id=header["stream_id"],
        seq=header["seq"],
        capture_time=header["capture_time"],
        width=header["width"],
        height=header["height"],
        encoding=FrameEncoding(header["encoding"]),
        data=bytes(body[end:]),
        time_substituted=bool(header.get("time_substituted", False)),
    )
    return frame, offset + 4 + length


@dataclass(frozen=True)
class IndexEntry:
    seq: int
    capture_time: Timestamp
    byte_offset: int


class RecordingArchive:
    """Per-run frame store bridging wall-clock and media time.

    ``start_wall`` is the capture time of the first frame recorded at or after
    the start request; until that frame arrives the archive has no anchor.
    """

    def __init__(self, archive_id: uuid.UUID, run_id: Optional[uuid.UUID],
                 root: Path, request_time: Timestamp):
        self.id = archive_id
        self.run_id = run_id
        self.dir = Path(root) / str(archive_id)
        self.request_time = request_time
        self.start_wall: Optional[Timestamp] = None
        self.stop_time: Optional[Timestamp] = None
        self.sealed = False
        self.duration_ms: Optional[int] = None
        self._indices: dict[str, list[IndexEntry]] = {}
        self._writers: dict[str, object] = {}
        self._lock = threading.Lock()
        self.dir.mkdir(parents=True, exist_ok=True)

    # -- write path --------------------------------------------------------

    def append(self, frame: Frame) -> bool:
        """Record one frame. Returns False when the frame precedes the start
        request or the archive is already sealed."""
        with self._lock:
            if self.sealed or frame.capture_time < self.request_time:
                return False
            if self.start_wall is None:
                self.start_wall = frame.capture_time
            writer = self._writers.get(frame.stream_id)
            if writer is None:
                writer = open(self.dir / f"{frame.stream_id}.frames", "wb")
                self._writers[frame.stream_id] = writer
                self._indices[frame.stream_id] = []
            offset = writer.tell()
            writer.write(encode_record(frame))
            self._indices[frame.stream_id].append(
                IndexEntry(frame.seq, frame.capture_time, offset)
            )
            return True

    def seal(self, stop_time: Timestamp) -> None:
        with self._lock:
            if self.sealed:
                return
            last = self.request_time
            for entries in self._indices.values():
                if entries:
                    last = max(last, entries[-1].capture_time)
            if self.start_wall is None:
                self.start_wall = self.request_time
            self.duration_ms = last - self.start_wall
            self.stop_time = stop_time
            for stream_id, writer in self._writers.items():
                writer.close()
                self._write_index(stream_id)
            self._writers.clear()
            self.sealed = True
            self._write_meta()

    def _write_index(self, stream_id: str) -> None:
        doc = {
            "stream_id": stream_id,
            "entries": [[e.seq, e.capture_time, e.byte_offset]
                        for e in self._indices[stream_id]],
        }
        path = self.dir / f"{stream_id}.index.json"
        path.write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")))

    def _write_meta(self) -> None:
        meta = {
            "id": str(self.id),
            "run_id": str(self.run_id) if self.run_id else None,
            "request_time": self.request_time,
            "start_wall": self.start_wall,
            "stop_time": self.stop_time,
            "duration_ms": self.duration_ms,
            "sealed": self.sealed,
            "streams": sorted(self._indices.keys()),
        }
        (self.dir / "archive.json").write_text(
            json.dumps(meta, sort_keys=True, separators=(",", ":"))
        )

    @classmethod
    def load(cls, archive_dir: Path) -> "RecordingArchive":
        archive_dir = Path(archive_dir)
        meta = json.loads((archive_dir / "archive.json").read_text())
        self = cls.__new__(cls)
        self.id = uuid.UUID(meta["id"])
        self.run_id = uuid.UUID(meta["run_id"]) if meta["run_id"] else None
        self.dir = archive_dir
        self.request_time = meta["request_time"]
        self.start_wall = meta["start_wall"]
        self.stop_time = meta.get("stop_time")
        self.sealed = meta["sealed"]
        self.duration_ms = meta["duration_ms"]
        self._writers = {}
        self._lock = threading.Lock()
        self._indices = {}
        for stream_id in meta["streams"]:
            doc = json.loads((archive_dir / f"{stream_id}.index.json").read_text())
            self._indices[stream_id] = [
                IndexEntry(seq, t, off) for seq, t, off in doc["entries"]
            ]
        return self

    # -- read path ----------------------------------------------------------

    @property
    def streams(self) -> list[str]:
        return sorted(self._indices.keys())

    def index(self, stream_id: str) -> list[IndexEntry]:
        return list(self._indices.get(stream_id, []))

    def default_stream(self) -> str:
        if "fpv" in self._indices:
            return "fpv"
        if not self._indices:
            raise NoFrameAvailable("archive holds no streams")
        return self.streams[0]

    def wall_to_media(self, t: Timestamp) -> MediaOffset:
        if self.start_wall is None:
            raise NoFrameAvailable("archive has no recorded frame yet")
        offset = t - self.start_wall
        if offset < 0:
            offset = 0
        if self.sealed and self.duration_ms is not None and offset > self.duration_ms:
            offset = self.duration_ms
        return offset

    def media_to_wall(self, offset: MediaOffset) -> Timestamp:
        if self.start_wall is None:
            raise NoFrameAvailable("archive has no recorded frame yet")
        return self.start_wall + offset

    def frame_at(self, offset: MediaOffset, stream_id: Optional[str] = None) -> Frame:
        """Frame with the largest capture_time <= start_wall + offset."""
        if self.duration_ms is not None and not 0 <= offset <= self.duration_ms:
            raise OffsetOutOfRange(f"offset {offset} outside [0, {self.duration_ms}]")
        if offset < 0:
            raise OffsetOutOfRange(f"offset {offset} negative")
        stream_id = stream_id or self.default_stream()
        entries = self._indices.get(stream_id, [])
        target = self.media_to_wall(offset)
        i = bisect_right(entries, target, key=lambda e: e.capture_time)
        if i == 0:
            raise NoFrameAvailable(f"no {stream_id} frame at or before offset {offset}")
        return self._read_entry(stream_id, entries[i - 1])

    def frame_by_seq(self, stream_id: str, seq: int) -> Frame:
        entries = self._indices.get(stream_id, [])
        i = bisect_right(entries, seq, key=lambda e: e.seq)
        if i == 0 or entries[i - 1].seq != seq:
            raise NoFrameAvailable(f"seq {seq} not in archive stream {stream_id!r}")
        return self._read_entry(stream_id, entries[i - 1])

    def _read_entry(self, stream_id: str, entry: IndexEntry) -> Frame:
        path = self.dir / f"{stream_id}.frames"
        with open(path, "rb") as fh:
            fh.seek(entry.byte_offset)
            raw_len = fh.read(4)
            (length,) = _LEN.unpack(raw_len)
            frame, _ = decode_record(raw_len + fh.read(length))
        return frame

    def iter_frames(self, stream_id: str) -> Iterator[Frame]:
        path = self.dir / f"{stream_id}.frames"
        if not path.exists():
            return
        buf = path.read_bytes()
        offset = 0
        while offset < len(buf):
            frame, offset = decode_record(buf, offset)
            yield frame


class Subscription:
    """Fan-out endpoint for one relay consumer; drops under backpressure."""

    def __init__(self, stream_id: str):
        self.stream_id = stream_id
        self.queue: queue.Queue[Frame] = queue.Queue(maxsize=RELAY_QUEUE_DEPTH)
        self.dropped = 0
        self.closed = False

    def offer(self, frame: Frame) -> None:
        try:
            self.queue.put_nowait(frame)
        except queue.Full:
            self.dropped += 1

    def get(self, timeout: Optional[float] = None) -> Optional[Frame]:
        try:
            return self.queue.get(timeout=timeout)
        except queue.Empty:
            return None


class StreamHandle:
    """One live stream: ring buffer, relay subscribers, optional recording."""

    def __init__(self, desc: StreamDescriptor, buffer_ms: int = DEFAULT_BUFFER_MS):
        self.desc = desc
        self.stream_id = desc.stream_id
        self.buffer_ms = buffer_ms
        self.frames: list[Frame] = []  # ring buffer, capture_time ascending
        self.last_seq: Optional[int] = None
        self.last_capture: Optional[Timestamp] = None
        self.accepted = 0
        self.dropped = 0
        self.subscribers: list[Subscription] = []
        self.archive: Optional[RecordingArchive] = None
        self.lock = threading.Lock()

    @property
    def frames_seen(self) -> int:
        return self.accepted

    def latest(self) -> Optional[Frame]:
        with self.lock:
            return self.frames[-1] if self.frames else None


class MediaEngine:
    """Owns stream handles and recording archives for one harness instance."""

    def __init__(self, archive_root: Path, buffer_ms: int = DEFAULT_BUFFER_MS,
                 probe_source: Optional[Callable[[StreamDescriptor], bool]] = None):
        self.archive_root = Path(archive_root)
        self.archive_root.mkdir(parents=True, exist_ok=True)
        self.buffer_ms = buffer_ms
        self.streams: dict[str, StreamHandle] = {}
        self.archives: dict[uuid.UUID, RecordingArchive] = {}
        self._probe_source = probe_source
        self._lock = threading.Lock()

    # -- streams -------------------------------------------------------------

    def open_stream(self, desc: StreamDescriptor) -> StreamHandle:
        with self._lock:
            if desc.stream_id in self.streams:
                raise DuplicateStreamId(desc.stream_id)
            if self._probe_source is not None and not self._probe_source(desc):
                raise SourceUnreachable(desc.source_url)
            handle = StreamHandle(desc, self.buffer_ms)
            self.streams[desc.stream_id] = handle
            return handle

    def handle(self, stream_id: str) -> Optional[StreamHandle]:
        return self.streams.get(stream_id)

    def ingest_frame(self, handle: StreamHandle, frame: Frame) -> Optional[DropReason]:
        """Append a frame; returns None when accepted, or the drop reason."""
        with handle.lock:
            if handle.last_seq is not None and frame.seq <= handle.last_seq:
                handle.dropped += 1
                return DropReason.OUT_OF_ORDER
            if handle.last_capture is not None and frame.capture_time < handle.last_capture:
                handle.dropped += 1
                return DropReason.OUT_OF_ORDER
            handle.last_seq = frame.seq
            handle.last_capture = frame.capture_time
            handle.accepted += 1
            handle.frames.append(frame)
            horizon = frame.capture_time - handle.buffer_ms
            while handle.frames and handle.frames[0].capture_time < horizon:
                handle.frames.pop(0)
            archive = handle.archive
            subscribers = list(handle.subscribers)
        if archive is not None:
            archive.append(frame)
        for sub in subscribers:
            sub.offer(frame)
        return None

    def subscribe(self, stream_id: str, include_latest: bool = False) -> Subscription:
        handle = self.streams[stream_id]
        sub = Subscription(stream_id)
        with handle.lock:
            if include_latest and handle.frames:
                sub.offer(handle.frames[-1])
            handle.subscribers.append(sub)
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        handle = self.streams.get(sub.stream_id)
        if handle is None:
            return
        with handle.lock:
            if sub in handle.subscribers:
                handle.subscribers.remove(sub)
        sub.closed = True

    # -- snapshots -------------------------------------------------------------

    def snapshot(self, stream_id: str, at: Timestamp,
                 region: Optional[Region] = None) -> ImageRef:
        """Reference to the latest frame at or before ``at`` (floor semantics).

        Prefers the recording archive so the reference stays stable; falls back
        to the live ring buffer during setup.
        """
        handle = self.streams.get(stream_id)
        if handle is None:
            raise NoFrameAvailable(f"unknown stream {stream_id!r}")
        seq = None
        with handle.lock:
            archive = handle.archive
            if archive is not None:
                entries = archive.index(stream_id)
                i = bisect_right(entries, at, key=lambda e: e.capture_time)
                if i > 0:
                    seq = entries[i - 1].seq
            if seq is None:
                i = bisect_right(handle.frames, at, key=lambda f: f.capture_time)
                if i > 0:
                    seq = handle.frames[i - 1].seq
        if seq is None:
            raise NoFrameAvailable(f"no {stream_id} frame at or before {at}")
        if region is not None:
            full = self._frame_dims(stream_id, seq)
            if full is not None and not region.fits(*full):
                raise ValueError(f"region {region} outside {full[0]}x{full[1]} frame")
        return ImageRef(stream_id=stream_id, seq=seq, region=region)

    def _frame_dims(self, stream_id: str, seq: int) -> Optional[tuple[int, int]]:
        try:
            frame = self.resolve_frame(ImageRef(stream_id, seq))
        except NoFrameAvailable:
            return None
        return frame.width, frame.height

    def resolve_frame(self, ref: ImageRef) -> Frame:
        """Fetch the full frame an ImageRef points at (archive first, then buffer)."""
        handle = self.streams.get(ref.stream_id)
        archives = []
        if handle is not None and handle.archive is not None:
            archives.append(handle.archive)
        archives.extend(a for a in self.archives.values() if a not in archives)
        for archive in archives:
            try:
                return archive.frame_by_seq(ref.stream_id, ref.seq)
            except NoFrameAvailable:
                continue
        if handle is not None:
            with handle.lock:
                for frame in handle.frames:
                    if frame.seq == ref.seq:
                        return frame
        raise NoFrameAvailable(f"frame {ref.stream_id}/{ref.seq} not found")

    # -- recording -------------------------------------------------------------

    def start_recording(self, handles: list[StreamHandle], request_time: Timestamp,
                        run_id: Optional[uuid.UUID] = None,
                        archive_id: Optional[uuid.UUID] = None) -> RecordingArchive:
        with self._lock:
            for handle in handles:
                if handle.archive is not None and not handle.archive.sealed:
                    raise AlreadyRecording(handle.stream_id)
            archive = RecordingArchive(
                archive_id or uuid.uuid4(), run_id, self.archive_root, request_time
            )
            for handle in handles:
                with handle.lock:
                    handle.archive = archive
            self.archives[archive.id] = archive
            return archive

    def stop_recording(self, archive: RecordingArchive, stop_time: Timestamp) -> RecordingArchive:
        if archive.sealed:
            raise NotRecording(str(archive.id))
        for handle in self.streams.values():
            with handle.lock:
                if handle.archive is archive:
                    handle.archive = None
        archive.seal(stop_time)
        return archive


# ---------------------------------------------------------------------------
# Image materialization (payload bytes for reports and thumbnails)

def render_image(frame: Frame, region: Optional[Region] = None) -> tuple[bytes, str]:
    """Materialize an image (bytes, mime) from a frame, cropped when asked.

    A region covering the whole frame returns the stored bytes untouched, so
    full-frame crops stay byte-identical to the original.
    """
    if region is None or (
        region.x == 0 and region.y == 0
        and region.w == frame.width and region.h == frame.height
    ):
        mime = "image/jpeg" if frame.encoding == FrameEncoding.JPEG else "application/octet-stream"
        return frame.data, mime
    if not region.fits(frame.width, frame.height):
        raise ValueError(f"region {region} outside {frame.width}x{frame.height} frame")
    if frame.encoding == FrameEncoding.RAW_RGB:
        rows = []
        stride = frame.width * 3
        for y in range(region.y, region.y + region.h):
            start = y * stride + region.x * 3
            rows.append(frame.data[start : start + region.w * 3])
        return b"".join(rows), "application/octet-stream"
    from io import BytesIO

    from PIL import Image

    img = Image.open(BytesIO(frame.data))
    cropped = img.crop((region.x, region.y, region.x + region.w, region.y + region.h))
    out = BytesIO()
    cropped.save(out, format="JPEG")
    return out.getvalue(), "image/jpeg"
