"""Post-pilot analysis: timelines, filtering, summaries, and run comparison."""
from __future__ import annotations

import uuid
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

from .errors import ArchiveMissing, EmptyRunList
from .media import RecordingArchive
from .model import (
    Annotation,
    AnnotationKind,
    ImageRef,
    LiveStats,
    MediaOffset,
    TranscriptText,
)
from .session import PilotRun, Session


@dataclass(frozen=True)
class TimelineMarker:
    media_offset: MediaOffset
    annotation_id: uuid.UUID
    kind: AnnotationKind
    color: str


@dataclass(frozen=True)
class Timeline:
    run_id: uuid.UUID
    duration_ms: int
    markers: tuple[TimelineMarker, ...]


def build_timeline(run: PilotRun, archive: Optional[RecordingArchive]) -> Timeline:
    """Markers for every annotation that has a media offset, in offset order."""
    if archive is None or not archive.sealed:
        raise ArchiveMissing(str(run.archive_ref))
    markers = [
        TimelineMarker(a.media_offset, a.id, a.kind, a.color)
        for a in run.annotations
        if a.media_offset is not None
    ]
    markers.sort(key=lambda m: m.media_offset)  # stable: canonical order for ties
    return Timeline(run_id=run.id, duration_ms=archive.duration_ms or 0,
                    markers=tuple(markers))


@dataclass(frozen=True)
class AnnotationFilter:
    """Conjunctive annotation selection; empty fields select everything."""

    kinds: frozenset[AnnotationKind] = frozenset()
    authors: frozenset[str] = frozenset()  # instance ids
    time_range: Optional[tuple[int, int]] = None  # media offset ms, inclusive
    text_query: Optional[str] = None
    _extra_queries: tuple[str, ...] = ()  # produced by intersect()

    def __post_init__(self):
        if self.time_range is not None and self.time_range[0] > self.time_range[1]:
            raise ValueError(f"time range reversed: {self.time_range}")

    def matches(self, a: Annotation) -> bool:
        if self.kinds and a.kind not in self.kinds:
            return False
        if self.authors and a.author.instance_id not in self.authors:
            return False
        if self.time_range is not None:
            if a.media_offset is None:
                return False
            lo, hi = self.time_range
            if not lo <= a.media_offset <= hi:
                return False
        for query in self._all_queries():
            haystack = a.note
            if isinstance(a.payload, TranscriptText):
                haystack = f"{haystack}\n{a.payload.text}"
            if query.lower() not in haystack.lower():
                return False
        return True

    def _all_queries(self) -> tuple[str, ...]:
        if self.text_query is None:
            return self._extra_queries
        return (self.text_query,) + self._extra_queries

    def intersect(self, other: "AnnotationFilter") -> "AnnotationFilter":
        """The conjunction of two filters (for composition)."""
        # empty field sets mean "everything", so an empty intersection of two
        # non-empty sets is the impossible filter, not the universal one
        if self.kinds and other.kinds:
            kinds = self.kinds & other.kinds
            if not kinds:
                return _NOTHING
        else:
            kinds = self.kinds | other.kinds
        if self.authors and other.authors:
            authors = self.authors & other.authors
            if not authors:
                return _NOTHING
        else:
            authors = self.authors | other.authors
        if self.time_range and other.time_range:
            lo = max(self.time_range[0], other.time_range[0])
            hi = min(self.time_range[1], other.time_range[1])
            if lo > hi:
                return _NOTHING
            time_range = (lo, hi)
        else:
            time_range = self.time_range or other.time_range
        queries = self._all_queries() + other._all_queries()
        text_query = queries[0] if queries else None
        extra = tuple(queries[1:])
        return AnnotationFilter(kinds=kinds, authors=authors, time_range=time_range,
                                text_query=text_query, _extra_queries=extra)


class _ImpossibleFilter(AnnotationFilter):
    """Result of intersecting disjoint time windows."""

    def matches(self, a: Annotation) -> bool:
        return False


_NOTHING = _ImpossibleFilter()


EVERYTHING = AnnotationFilter()


def filter_annotations(run: PilotRun, f: AnnotationFilter = EVERYTHING) -> list[Annotation]:
    """Subset of the log matching ``f``, preserving canonical order."""
    return [a for a in run.annotations if f.matches(a)]


# ---------------------------------------------------------------------------
# Summaries and comparison

@dataclass(frozen=True)
class SummaryReport:
    run_id: uuid.UUID
    participant_id: str
    session_label: str
    duration_ms: Optional[int]
    stats: LiveStats
    screenshots: tuple[ImageRef, ...]
    selected: tuple[Annotation, ...]
    notes: tuple[tuple[uuid.UUID, str], ...]  # (annotation id, non-empty note)


def summarize(run: PilotRun, selection: AnnotationFilter = EVERYTHING) -> SummaryReport:
    selected = tuple(filter_annotations(run, selection))
    screenshots = tuple(
        a.payload for a in selected if isinstance(a.payload, ImageRef)
    )
    notes = tuple((a.id, a.note) for a in selected if a.note)
    return SummaryReport(
        run_id=run.id,
        participant_id=run.participant_id,
        session_label=run.session_label,
        duration_ms=run.archive_duration_ms if run.archive_duration_ms is not None
        else run.duration_ms,
        stats=run.live_stats(),
        screenshots=screenshots,
        selected=selected,
        notes=notes,
    )


def mean_gaps_by_kind(run: PilotRun) -> dict[str, float]:
    """Mean duration between consecutive annotations of the same kind."""
    times: dict[str, list[int]] = {}
    for a in run.annotations:
        times.setdefault(a.kind.wire_name, []).append(a.wall_time)
    gaps = {}
    for kind, ts in times.items():
        if len(ts) >= 2:
            gaps[kind] = (ts[-1] - ts[0]) / (len(ts) - 1)
    return gaps


@dataclass(frozen=True)
class RunDelta:
    run_id: uuid.UUID
    accuracy_delta: Optional[Fraction]  # first run minus this run
    mean_gap_delta_ms: dict[str, float]  # per kind, first minus this


@dataclass(frozen=True)
class ComparisonSummary:
    summaries: tuple[SummaryReport, ...]
    deltas: tuple[RunDelta, ...]  # one per run after the first


def compare(runs: list[PilotRun],
            selection: AnnotationFilter = EVERYTHING) -> ComparisonSummary:
    """Side-by-side summaries; deltas are measured against the first run."""
    if not runs:
        raise EmptyRunList("compare needs at least one run")
    summaries = tuple(summarize(run, selection) for run in runs)
    deltas = []
    base = runs[0]
    base_acc = base.live_stats().accuracy
    base_gaps = mean_gaps_by_kind(base)
    for run in runs[1:]:
        acc = run.live_stats().accuracy
        acc_delta = None
        if base_acc is not None and acc is not None:
            acc_delta = base_acc - acc
        gaps = mean_gaps_by_kind(run)
        gap_delta = {
            kind: base_gaps[kind] - gaps[kind]
            for kind in sorted(set(base_gaps) & set(gaps))
        }
        deltas.append(RunDelta(run.id, acc_delta, gap_delta))
    return ComparisonSummary(summaries=summaries, deltas=tuple(deltas))


def add_retro_note(session: Session, run: PilotRun, media_offset: MediaOffset,
                   text: str) -> Annotation:
    """New Note annotation placed on the timeline after the fact."""
    from .model import NOTE, Origin

    return session.record_annotation(
        run, kind=NOTE, origin=Origin.RETROSPECTIVE,
        media_offset=media_offset, note=text,
    )
