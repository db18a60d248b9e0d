"""Sessions, pilot runs, the annotation event log, and live statistics.

All mutations of a run funnel through one ``Session`` whose lock is the single
ordering point; reads hand out immutable snapshots. Annotation producers
(console keys, auto-triggers, the sync peer) may call in from any thread.
"""
from __future__ import annotations

import threading
import uuid
from bisect import insort
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Optional

from .errors import (
    ChecklistIncomplete,
    IllegalKindChange,
    OffsetOutOfRange,
    OverlappingSpans,
    PayloadMismatch,
    RunNotActive,
    SpanOutOfRange,
    StreamUnavailable,
    UnknownEventSource,
    UnknownId,
)
from .media import MediaEngine, RecordingArchive, StreamDescriptor
from .model import (
    CORRECT,
    COUNTER,
    DEFAULT_NOTE_COLOR,
    EMPTY,
    FOCUS,
    INCORRECT,
    SCREENSHOT,
    VOICE,
    Annotation,
    AnnotationKind,
    Author,
    ChecklistItem,
    CounterValue,
    Empty,
    LiveStats,
    MediaOffset,
    Origin,
    Payload,
    Region,
    Role,
    ShortcutBinding,
    Timestamp,
    TranscriptText,
    payload_matches_kind,
    recount_stats,
    validate_bindings,
)

EventSink = Callable[[str, Optional[uuid.UUID], dict], None]


class Phase(Enum):
    SETUP = "setup"
    PILOT = "pilot"
    ANALYZER = "analyzer"


@dataclass
class SessionConfig:
    session_name: str
    role: Role
    fpv_source: StreamDescriptor
    tpv_source: Optional[StreamDescriptor] = None
    wizarding_url: str = ""
    checklist: list[ChecklistItem] = field(default_factory=list)
    bindings: list[ShortcutBinding] = field(default_factory=list)
    record_inputs: Optional[list[str]] = None

    def __post_init__(self):
        validate_bindings(self.bindings)
        if self.record_inputs is None:
            inputs = [self.fpv_source.stream_id]
            if self.tpv_source is not None:
                inputs.append(self.tpv_source.stream_id)
            self.record_inputs = inputs

    def binding_for_key(self, key: str) -> Optional[ShortcutBinding]:
        for b in self.bindings:
            if b.key == key:
                return b
        return None

    def binding_for_kind(self, kind: AnnotationKind) -> Optional[ShortcutBinding]:
        for b in self.bindings:
            if b.kind == kind:
                return b
        return None

    @property
    def pinned_names(self) -> frozenset[str]:
        return frozenset(b.name for b in self.bindings if b.pinned)


class TriggerKind(Enum):
    SHORTCUT = "shortcut"
    WIZARD = "wizard"
    STREAM = "stream"


@dataclass(frozen=True)
class TriggerSource:
    kind: TriggerKind
    name: str  # key for SHORTCUT, event name otherwise


@dataclass(frozen=True)
class ElapsedStatus:
    elapsed: bool
    overrun_ms: Optional[int] = None


@dataclass
class AuditEntry:
    seq: int
    annotation_id: uuid.UUID
    changes: dict[str, tuple]  # field -> (old, new)


class PilotRun:
    """One started/stopped pilot holding the ordered annotation log.

    The log stays sorted by (wall_time, author instance, id); statistics are
    maintained incrementally on every mutation and must always equal a
    from-scratch recount.
    """

    def __init__(self, run_id: uuid.UUID, participant_id: str, session_label: str,
                 anticipated_duration_ms: int, start_time: Timestamp,
                 pinned_names: frozenset[str] = frozenset()):
        self.id = run_id
        self.participant_id = participant_id
        self.session_label = session_label
        self.anticipated_duration_ms = anticipated_duration_ms
        self.start_time = start_time
        self.stop_time: Optional[Timestamp] = None
        self.annotations: list[Annotation] = []
        self.audit: list[AuditEntry] = []
        self.pinned_names = pinned_names
        self.archive_ref: Optional[uuid.UUID] = None
        self.anchor_wall: Optional[Timestamp] = None  # recording start anchor
        self.archive_duration_ms: Optional[int] = None
        self.elapsed_fired = False
        # incrementally maintained statistics
        self._correct = 0
        self._incorrect = 0
        self._counter_total = 0
        self._pinned_counts = {name: 0 for name in sorted(pinned_names)}
        self._by_id: dict[uuid.UUID, Annotation] = {}

    # -- state ---------------------------------------------------------------

    @property
    def running(self) -> bool:
        return self.stop_time is None

    @property
    def duration_ms(self) -> Optional[int]:
        if self.stop_time is None:
            return None
        return self.stop_time - self.start_time

    def snapshot(self) -> tuple[Annotation, ...]:
        return tuple(self.annotations)

    def get(self, annotation_id: uuid.UUID) -> Annotation:
        try:
            return self._by_id[annotation_id]
        except KeyError:
            raise UnknownId(str(annotation_id)) from None

    @property
    def counter_total(self) -> int:
        return self._counter_total

    def live_stats(self) -> LiveStats:
        return LiveStats(
            correct=self._correct,
            incorrect=self._incorrect,
            counter_total=self._counter_total,
            pinned_counts=dict(self._pinned_counts),
        )

    # -- log mutation (callers hold the session lock) -------------------------

    def insert(self, ann: Annotation) -> tuple[Annotation, bool]:
        """Insert in canonical order; idempotent by id. Returns (annotation,
        inserted) where inserted=False means the id was already present."""
        existing = self._by_id.get(ann.id)
        if existing is not None:
            return existing, False
        insort(self.annotations, ann, key=lambda a: a.sort_key)
        self._by_id[ann.id] = ann
        self._stats_add(ann, +1)
        if ann.kind == COUNTER:
            self._renumber_counters()
            ann = self._by_id[ann.id]
        return ann, True

    def replace(self, old: Annotation, new: Annotation) -> None:
        assert old.id == new.id
        self.annotations.remove(old)
        self._stats_add(old, -1)
        insort(self.annotations, new, key=lambda a: a.sort_key)
        self._by_id[new.id] = new
        self._stats_add(new, +1)
        if old.kind == COUNTER or new.kind == COUNTER:
            self._renumber_counters()

    def rebuild(self, annotations: list[Annotation]) -> None:
        """Replace the whole log (merges); recomputes statistics from scratch."""
        ordered = sorted(annotations, key=lambda a: a.sort_key)
        self.annotations = ordered
        self._by_id = {a.id: a for a in ordered}
        stats = recount_stats(ordered, self.pinned_names)
        self._correct = stats.correct
        self._incorrect = stats.incorrect
        self._counter_total = stats.counter_total
        self._pinned_counts = dict(stats.pinned_counts)
        self._renumber_counters()

    def _renumber_counters(self) -> None:
        # Counter payloads must read 1..n in log order, whatever reordered them.
        from dataclasses import replace as _replace

        n = 0
        for i, a in enumerate(self.annotations):
            if a.kind == COUNTER:
                n += 1
                if a.payload.value != n:
                    renumbered = _replace(a, payload=CounterValue(n))
                    self.annotations[i] = renumbered
                    self._by_id[a.id] = renumbered

    def _stats_add(self, ann: Annotation, sign: int) -> None:
        if ann.kind == CORRECT:
            self._correct += sign
        elif ann.kind == INCORRECT:
            self._incorrect += sign
        elif ann.kind == COUNTER:
            self._counter_total += sign
        if ann.function_name in self._pinned_counts:
            self._pinned_counts[ann.function_name] += sign

    # -- persistence -----------------------------------------------------------

    def to_dict(self) -> dict:
        from .model import annotation_to_dict

        return {
            "id": str(self.id),
            "participant_id": self.participant_id,
            "session_label": self.session_label,
            "anticipated_duration_ms": self.anticipated_duration_ms,
            "start_time": self.start_time,
            "stop_time": self.stop_time,
            "archive_ref": str(self.archive_ref) if self.archive_ref else None,
            "anchor_wall": self.anchor_wall,
            "archive_duration_ms": self.archive_duration_ms,
            "pinned_names": sorted(self.pinned_names),
            "elapsed_fired": self.elapsed_fired,
            "annotations": [annotation_to_dict(a) for a in self.annotations],
            "audit": [
                {
                    "seq": e.seq,
                    "annotation_id": str(e.annotation_id),
                    "changes": {k: [v[0], v[1]] for k, v in e.changes.items()},
                }
                for e in self.audit
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PilotRun":
        from .model import annotation_from_dict

        run = cls(
            run_id=uuid.UUID(d["id"]),
            participant_id=d["participant_id"],
            session_label=d["session_label"],
            anticipated_duration_ms=d["anticipated_duration_ms"],
            start_time=d["start_time"],
            pinned_names=frozenset(d.get("pinned_names", [])),
        )
        run.stop_time = d.get("stop_time")
        run.archive_ref = uuid.UUID(d["archive_ref"]) if d.get("archive_ref") else None
        run.anchor_wall = d.get("anchor_wall")
        run.archive_duration_ms = d.get("archive_duration_ms")
        run.elapsed_fired = bool(d.get("elapsed_fired", False))
        run.rebuild([annotation_from_dict(a) for a in d.get("annotations", [])])
        for e in d.get("audit", []):
            run.audit.append(
                AuditEntry(
                    seq=e["seq"],
                    annotation_id=uuid.UUID(e["annotation_id"]),
                    changes={k: (v[0], v[1]) for k, v in e["changes"].items()},
                )
            )
        return run


class Session:
    """Owns the pilot lifecycle for one harness instance."""

    def __init__(self, config: SessionConfig, instance_id: str,
                 media: Optional[MediaEngine] = None,
                 id_factory: Optional[Callable[[], uuid.UUID]] = None,
                 event_sink: Optional[EventSink] = None):
        self.config = config
        self.instance_id = instance_id
        self.media = media
        self.id_factory = id_factory or uuid.uuid4
        self.event_sink = event_sink
        self.phase = Phase.SETUP
        self.runs: dict[uuid.UUID, PilotRun] = {}
        self.current_run: Optional[PilotRun] = None
        self.archives: dict[uuid.UUID, RecordingArchive] = {}
        self.triggers: dict[uuid.UUID, tuple[TriggerSource, ShortcutBinding]] = {}
        self.declared_sources: set[TriggerSource] = set()
        self.author = Author(config.role, instance_id)
        self.lock = threading.RLock()

    # -- events ----------------------------------------------------------------

    def _emit(self, event_type: str, run_id: Optional[uuid.UUID], data: dict) -> None:
        if self.event_sink is not None:
            self.event_sink(event_type, run_id, data)

    # -- checklist ---------------------------------------------------------------

    def set_checklist_item(self, index: int, checked: bool) -> None:
        with self.lock:
            self.config.checklist[index].checked = checked

    def unchecked_items(self) -> list[str]:
        return [item.text for item in self.config.checklist if not item.checked]

    # -- lifecycle ---------------------------------------------------------------

    def start_pilot(self, participant_id: str, session_label: str,
                    anticipated_duration_ms: int, now: Timestamp) -> PilotRun:
        with self.lock:
            if self.phase == Phase.PILOT:
                raise RunNotActive("a pilot is already running")
            unchecked = self.unchecked_items()
            if unchecked:
                raise ChecklistIncomplete(unchecked)
            handles = []
            if self.media is not None:
                for stream_id in self.config.record_inputs:
                    handle = self.media.handle(stream_id)
                    if handle is None or handle.frames_seen == 0:
                        raise StreamUnavailable(stream_id)
                    handles.append(handle)
            run = PilotRun(
                run_id=self.id_factory(),
                participant_id=participant_id,
                session_label=session_label,
                anticipated_duration_ms=anticipated_duration_ms,
                start_time=now,
                pinned_names=self.config.pinned_names,
            )
            if self.media is not None:
                archive = self.media.start_recording(
                    handles, request_time=now, run_id=run.id,
                    archive_id=self.id_factory(),
                )
                run.archive_ref = archive.id
                self.archives[archive.id] = archive
            else:
                # headless sessions anchor media time at the start instant
                run.anchor_wall = now
            self.runs[run.id] = run
            self.current_run = run
            self.phase = Phase.PILOT
            self._emit("run_started", run.id, {
                "participant_id": participant_id,
                "session_label": session_label,
                "start_time": now,
            })
            self._emit("phase_change", run.id, {"phase": self.phase.value})
            return run

    def stop_pilot(self, run: PilotRun, now: Timestamp) -> PilotRun:
        with self.lock:
            if not run.running:
                raise RunNotActive(str(run.id))
            if now <= run.start_time:
                raise ValueError("stop_time must come after start_time")
            run.stop_time = now
            archive = self.archives.get(run.archive_ref) if run.archive_ref else None
            if archive is not None and self.media is not None:
                self.media.stop_recording(archive, now)
                run.anchor_wall = archive.start_wall
                run.archive_duration_ms = archive.duration_ms
            if self.current_run is run:
                self.phase = Phase.ANALYZER
            self._emit("run_stopped", run.id, {
                "stop_time": now,
                "duration_ms": run.duration_ms,
            })
            self._emit("phase_change", run.id, {"phase": self.phase.value})
            return run

    def adopt_run(self, run_id: uuid.UUID, participant_id: str, session_label: str,
                  anticipated_duration_ms: int, start_time: Timestamp,
                  anchor_wall: Optional[Timestamp] = None) -> PilotRun:
        """Mirror a run owned by a remote authority (no local recording)."""
        with self.lock:
            existing = self.runs.get(run_id)
            if existing is not None:
                return existing
            run = PilotRun(
                run_id=run_id,
                participant_id=participant_id,
                session_label=session_label,
                anticipated_duration_ms=anticipated_duration_ms,
                start_time=start_time,
                pinned_names=self.config.pinned_names,
            )
            run.anchor_wall = anchor_wall if anchor_wall is not None else start_time
            self.runs[run_id] = run
            self.current_run = run
            self.phase = Phase.PILOT
            self._emit("run_started", run.id, {
                "participant_id": participant_id,
                "session_label": session_label,
                "start_time": start_time,
                "mirrored": True,
            })
            return run

    def close_adopted_run(self, run: PilotRun, stop_time: Timestamp,
                          archive_duration_ms: Optional[int] = None,
                          anchor_wall: Optional[Timestamp] = None) -> PilotRun:
        with self.lock:
            if run.running:
                run.stop_time = stop_time
                if anchor_wall is not None:
                    run.anchor_wall = anchor_wall
                if archive_duration_ms is not None:
                    run.archive_duration_ms = archive_duration_ms
                if self.current_run is run:
                    self.phase = Phase.ANALYZER
                self._emit("run_stopped", run.id, {
                    "stop_time": stop_time,
                    "duration_ms": run.duration_ms,
                    "mirrored": True,
                })
            return run

    def archive_for(self, run: PilotRun) -> Optional[RecordingArchive]:
        if run.archive_ref is None:
            return None
        return self.archives.get(run.archive_ref)

    def _anchor(self, run: PilotRun) -> Optional[Timestamp]:
        if run.anchor_wall is not None:
            return run.anchor_wall
        archive = self.archive_for(run)
        if archive is not None and archive.start_wall is not None:
            return archive.start_wall
        return None

    # -- annotation recording -------------------------------------------------

    def record_annotation(self, run: PilotRun, *,
                          binding: Optional[ShortcutBinding] = None,
                          kind: Optional[AnnotationKind] = None,
                          event_time: Optional[Timestamp] = None,
                          payload: Payload = EMPTY,
                          note: str = "",
                          origin: Origin = Origin.LIVE,
                          author: Optional[Author] = None,
                          media_offset: Optional[MediaOffset] = None,
                          region: Optional[Region] = None,
                          annotation_id: Optional[uuid.UUID] = None) -> Annotation:
        with self.lock:
            if binding is not None:
                kind = binding.kind
                function_name = binding.name
                color = binding.color
            elif kind is not None:
                function_name = kind.name
                color = DEFAULT_NOTE_COLOR
            else:
                raise ValueError("either binding or kind is required")

            if origin in (Origin.LIVE, Origin.AUTO) and not run.running:
                raise RunNotActive(str(run.id))

            anchor = self._anchor(run)
            if origin == Origin.RETROSPECTIVE:
                if run.running:
                    raise RunNotActive("retrospective annotations require a stopped run")
                if media_offset is None:
                    raise OffsetOutOfRange("retrospective annotations need a media offset")
                limit = run.archive_duration_ms
                if limit is None:
                    limit = run.duration_ms
                if limit is not None and not 0 <= media_offset <= limit:
                    raise OffsetOutOfRange(f"offset {media_offset} outside [0, {limit}]")
                base = anchor if anchor is not None else run.start_time
                wall_time = base + media_offset
            else:
                if event_time is None:
                    raise ValueError("event_time required for live annotations")
                if event_time < run.start_time - 60_000:
                    raise ValueError("live annotation precedes the run window")
                wall_time = event_time
                if anchor is not None:
                    media_offset = max(0, wall_time - anchor)
                else:
                    media_offset = None

            if kind == COUNTER:
                payload = CounterValue(run.counter_total + 1)
            elif kind in (SCREENSHOT, FOCUS) and isinstance(payload, Empty) \
                    and self.media is not None:
                payload = self.media.snapshot(
                    self.config.fpv_source.stream_id, wall_time, region
                )

            if not payload_matches_kind(kind, payload):
                raise PayloadMismatch(
                    f"{type(payload).__name__} payload on {kind.wire_name}"
                )

            ann = Annotation(
                id=annotation_id or self.id_factory(),
                run_id=run.id,
                author=author or self.author,
                kind=kind,
                function_name=function_name,
                color=color,
                wall_time=wall_time,
                media_offset=media_offset,
                payload=payload,
                note=note,
                origin=origin,
            )
            ann, inserted = run.insert(ann)
            if inserted:
                self._emit_annotation(run, ann)
            return ann

    def record_by_key(self, run: PilotRun, key: str, event_time: Timestamp,
                      note: str = "", region: Optional[Region] = None,
                      origin: Origin = Origin.LIVE) -> Annotation:
        binding = self.config.binding_for_key(key)
        if binding is None:
            raise UnknownId(f"no binding for key {key!r}")
        ann = self.record_annotation(run, binding=binding, event_time=event_time,
                                     note=note, region=region, origin=origin)
        # keys may additionally feed registered auto-triggers
        self.dispatch_event(TriggerSource(TriggerKind.SHORTCUT, key), event_time, run)
        return ann

    def _emit_annotation(self, run: PilotRun, ann: Annotation) -> None:
        from .model import annotation_to_dict

        self._emit("annotation", run.id, annotation_to_dict(ann))
        self._emit("stats", run.id, stats_to_dict(run.live_stats()))

    # -- editing -----------------------------------------------------------------

    _EDITABLE = frozenset({"wall_time", "media_offset", "kind", "note"})

    def edit_annotation(self, run: PilotRun, annotation_id: uuid.UUID,
                        patch: dict) -> Annotation:
        with self.lock:
            if run.running:
                raise RunNotActive("edits require a stopped run")
            unknown = set(patch) - self._EDITABLE
            if unknown:
                raise ValueError(f"unpatchable fields: {sorted(unknown)}")
            old = run.get(annotation_id)
            new = old

            if "kind" in patch:
                new_kind = patch["kind"]
                if isinstance(new_kind, str):
                    new_kind = AnnotationKind.parse(new_kind)
                allowed = {old.kind, CORRECT, INCORRECT}
                if old.kind not in (CORRECT, INCORRECT) or new_kind not in allowed:
                    raise IllegalKindChange(
                        f"{old.kind.wire_name} -> {new_kind.wire_name}"
                    )
                new = replace(new, kind=new_kind)

            anchor = self._anchor(run)
            if "wall_time" in patch and "media_offset" in patch and anchor is not None:
                if patch["media_offset"] != max(0, patch["wall_time"] - anchor):
                    raise ValueError("wall_time and media_offset patches disagree")
            if "wall_time" in patch:
                wall = patch["wall_time"]
                offset = max(0, wall - anchor) if anchor is not None else new.media_offset
                new = replace(new, wall_time=wall, media_offset=offset)
            if "media_offset" in patch:
                offset = patch["media_offset"]
                if anchor is not None:
                    new = replace(new, media_offset=offset, wall_time=anchor + offset)
                else:
                    new = replace(new, media_offset=offset)
            if "note" in patch:
                new = replace(new, note=patch["note"])

            if new != old:
                run.replace(old, new)
                changes = {}
                for fieldname in ("wall_time", "media_offset", "note"):
                    if getattr(old, fieldname) != getattr(new, fieldname):
                        changes[fieldname] = (getattr(old, fieldname),
                                              getattr(new, fieldname))
                if old.kind != new.kind:
                    changes["kind"] = (old.kind.wire_name, new.kind.wire_name)
                run.audit.append(AuditEntry(len(run.audit), annotation_id, changes))
                self._emit("annotation_edited", run.id, {
                    "annotation_id": str(annotation_id),
                    "changes": {k: [v[0], v[1]] for k, v in changes.items()},
                })
                self._emit("stats", run.id, stats_to_dict(run.live_stats()))
            return new

    # -- queries -------------------------------------------------------------------

    def live_stats(self, run: PilotRun) -> LiveStats:
        with self.lock:
            return run.live_stats()

    def duration_between(self, run: PilotRun, id_a: uuid.UUID, id_b: uuid.UUID) -> int:
        with self.lock:
            a = run.get(id_a)
            b = run.get(id_b)
            return abs(b.wall_time - a.wall_time)

    def elapsed_check(self, run: PilotRun, now: Timestamp) -> ElapsedStatus:
        with self.lock:
            overrun = now - run.start_time - run.anticipated_duration_ms
            if run.elapsed_fired:
                return ElapsedStatus(True, max(0, overrun))
            if overrun >= 0:
                run.elapsed_fired = True
                self._emit("anticipated_elapsed", run.id, {"overrun_ms": overrun})
                return ElapsedStatus(True, overrun)
            return ElapsedStatus(False)

    # -- auto-triggers ----------------------------------------------------------------

    def declare_event_source(self, source: TriggerSource) -> None:
        with self.lock:
            self.declared_sources.add(source)

    def register_auto_trigger(self, source: TriggerSource,
                              binding: ShortcutBinding) -> uuid.UUID:
        with self.lock:
            validate_bindings([binding])
            if source.kind != TriggerKind.SHORTCUT and source not in self.declared_sources:
                raise UnknownEventSource(f"{source.kind.value}:{source.name}")
            trigger_id = self.id_factory()
            self.triggers[trigger_id] = (source, binding)
            return trigger_id

    def dispatch_event(self, source: TriggerSource, at: Timestamp,
                       run: Optional[PilotRun] = None) -> list[Annotation]:
        """Fire every auto-trigger registered for ``source``."""
        with self.lock:
            run = run or self.current_run
            if run is None:
                return []
            created = []
            for trig_source, binding in self.triggers.values():
                if trig_source == source:
                    created.append(self.record_annotation(
                        run, binding=binding, event_time=at, origin=Origin.AUTO,
                    ))
            return created

    # -- transcripts ----------------------------------------------------------------

    def attach_transcripts(self, run: PilotRun,
                           utterances: list[tuple[int, int, str]]) -> list[Annotation]:
        """One Voice annotation per (start_ms, end_ms, text) utterance."""
        with self.lock:
            if run.running:
                raise RunNotActive("transcripts attach to a stopped run")
            duration = run.duration_ms or 0
            spans = sorted(utterances, key=lambda u: u[0])
            prev_end = None
            for start, end, _ in spans:
                if start < 0 or end > duration or end < start:
                    raise SpanOutOfRange(f"[{start}, {end}] outside [0, {duration}]")
                if prev_end is not None and start < prev_end:
                    raise OverlappingSpans(f"utterance at {start} overlaps previous")
                prev_end = end
            binding = self.config.binding_for_kind(VOICE)
            anchor = self._anchor(run)
            base = anchor if anchor is not None else run.start_time
            created = []
            for start, end, text in spans:
                ann = Annotation(
                    id=self.id_factory(),
                    run_id=run.id,
                    author=self.author,
                    kind=VOICE,
                    function_name=binding.name if binding else "voice",
                    color=binding.color if binding else DEFAULT_NOTE_COLOR,
                    wall_time=base + start,
                    media_offset=start,
                    payload=TranscriptText(text, end - start),
                    origin=Origin.AUTO,
                )
                ann, inserted = run.insert(ann)
                if inserted:
                    self._emit_annotation(run, ann)
                created.append(ann)
            return created


def stats_to_dict(stats: LiveStats) -> dict:
    acc = stats.accuracy
    return {
        "correct": stats.correct,
        "incorrect": stats.incorrect,
        "counter_total": stats.counter_total,
        "accuracy": None if acc is None else f"{float(acc):.4f}",
        "pinned_counts": dict(sorted(stats.pinned_counts.items())),
    }
