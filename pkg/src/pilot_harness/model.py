"""Domain model: annotation kinds, payloads, bindings, and the annotation record.

Timestamps are integer milliseconds UTC since the epoch, everywhere. Media
offsets are integer milliseconds from recording start.
"""
from __future__ import annotations

import re
import uuid
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Optional, Union

from .errors import (
    DuplicateKey,
    DuplicateName,
    InvalidColor,
    InvalidKey,
    InvalidName,
    PayloadMismatch,
)

Timestamp = int  # ms since epoch, UTC
MediaOffset = int  # ms from recording start


class Role(Enum):
    SINGLE_USER = "single_user"
    WIZARD = "wizard"
    OBSERVER = "observer"


class Origin(Enum):
    LIVE = "live"
    AUTO = "auto"
    RETROSPECTIVE = "retrospective"
    REMOTE = "remote"


# ---------------------------------------------------------------------------
# Annotation kinds

_BUILTIN_KIND_NAMES = (
    "screenshot",
    "focus",
    "correct",
    "incorrect",
    "counter",
    "voice",
    "note",
)


@dataclass(frozen=True)
class AnnotationKind:
    """A built-in annotation kind, or a custom one carrying its own name."""

    name: str
    is_custom: bool = False

    def __post_init__(self):
        if self.is_custom:
            if not self.name:
                raise ValueError("custom kind name must be non-empty")
            if self.name in _BUILTIN_KIND_NAMES:
                raise ValueError(f"custom kind shadows built-in: {self.name!r}")
        elif self.name not in _BUILTIN_KIND_NAMES:
            raise ValueError(f"unknown built-in kind: {self.name!r}")

    @property
    def wire_name(self) -> str:
        return f"custom:{self.name}" if self.is_custom else self.name

    @staticmethod
    def parse(text: str) -> "AnnotationKind":
        if text.startswith("custom:"):
            return AnnotationKind(text[len("custom:"):], is_custom=True)
        return AnnotationKind(text)


SCREENSHOT = AnnotationKind("screenshot")
FOCUS = AnnotationKind("focus")
CORRECT = AnnotationKind("correct")
INCORRECT = AnnotationKind("incorrect")
COUNTER = AnnotationKind("counter")
VOICE = AnnotationKind("voice")
NOTE = AnnotationKind("note")


def custom_kind(name: str) -> AnnotationKind:
    return AnnotationKind(name, is_custom=True)


# ---------------------------------------------------------------------------
# Payloads

@dataclass(frozen=True)
class Region:
    """Pixel rectangle; bounds against a frame are checked where a frame is known."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.x < 0 or self.y < 0 or self.w < 1 or self.h < 1:
            raise ValueError(f"degenerate region: {self}")

    def fits(self, width: int, height: int) -> bool:
        return self.x + self.w <= width and self.y + self.h <= height


@dataclass(frozen=True)
class Empty:
    pass


@dataclass(frozen=True)
class ImageRef:
    """Stable reference to an archived (or buffered) frame, optionally cropped."""

    stream_id: str
    seq: int
    region: Optional[Region] = None


@dataclass(frozen=True)
class CounterValue:
    value: int  # running total at the time of the press, >= 1


@dataclass(frozen=True)
class TranscriptText:
    text: str
    span_ms: int  # utterance length


Payload = Union[Empty, ImageRef, CounterValue, TranscriptText]

EMPTY = Empty()


def payload_matches_kind(kind: AnnotationKind, payload: Payload) -> bool:
    """True iff the payload variant is legal for the annotation kind."""
    if kind in (SCREENSHOT, FOCUS):
        return isinstance(payload, ImageRef)
    if kind == COUNTER:
        return isinstance(payload, CounterValue)
    if kind == VOICE:
        return isinstance(payload, TranscriptText)
    # correct / incorrect / note / custom
    return isinstance(payload, (Empty, ImageRef))


# ---------------------------------------------------------------------------
# Shortcut bindings

_COLOR_RE = re.compile(r"^#[0-9a-fA-F]{6}$")


def is_valid_color(value: str) -> bool:
    return bool(_COLOR_RE.match(value))


@dataclass(frozen=True)
class ShortcutBinding:
    key: str
    kind: AnnotationKind
    name: str
    color: str
    pinned: bool = False


def validate_bindings(bindings: list[ShortcutBinding]) -> None:
    """Check a binding set: unique keys, unique names among pinned, valid colors.

    Raises the specific ``BindingError`` subclass for the first violation found.
    """
    seen_keys: set[str] = set()
    seen_pinned_names: set[str] = set()
    for b in bindings:
        if len(b.key) != 1 or not b.key.isprintable():
            raise InvalidKey(b.key)
        if not b.name:
            raise InvalidName(b.name)
        if not is_valid_color(b.color):
            raise InvalidColor(b.color)
        if b.key in seen_keys:
            raise DuplicateKey(b.key)
        seen_keys.add(b.key)
        if b.pinned:
            if b.name in seen_pinned_names:
                raise DuplicateName(b.name)
            seen_pinned_names.add(b.name)


# ---------------------------------------------------------------------------
# Annotations

@dataclass(frozen=True)
class Author:
    role: Role
    instance_id: str

    @property
    def wire_name(self) -> str:
        return f"{self.role.value}:{self.instance_id}"

    @staticmethod
    def parse(text: str) -> "Author":
        role_name, _, instance = text.partition(":")
        return Author(Role(role_name), instance)


DEFAULT_NOTE_COLOR = "#888888"


@dataclass(frozen=True)
class Annotation:
    """One timestamped, typed, authored event: the atom of the whole system."""

    id: uuid.UUID
    run_id: uuid.UUID
    author: Author
    kind: AnnotationKind
    function_name: str
    color: str
    wall_time: Timestamp
    media_offset: Optional[MediaOffset]
    payload: Payload
    note: str = ""
    origin: Origin = Origin.LIVE

    def __post_init__(self):
        if not payload_matches_kind(self.kind, self.payload):
            raise PayloadMismatch(
                f"{type(self.payload).__name__} payload on {self.kind.wire_name}"
            )

    @property
    def sort_key(self) -> tuple:
        # Canonical log order: wall time, then author instance, then id.
        return (self.wall_time, self.author.instance_id, str(self.id))


def canonical_sort(annotations: list[Annotation]) -> list[Annotation]:
    return sorted(annotations, key=lambda a: a.sort_key)


# ---------------------------------------------------------------------------
# Live statistics

@dataclass(frozen=True)
class LiveStats:
    correct: int
    incorrect: int
    counter_total: int
    pinned_counts: dict[str, int]

    @property
    def accuracy(self) -> Optional[Fraction]:
        denom = self.correct + self.incorrect
        if denom == 0:
            return None
        return Fraction(self.correct, denom)


def recount_stats(annotations: list[Annotation], pinned_names: frozenset[str]) -> LiveStats:
    """Recompute statistics from scratch off the annotation log.

    Used when a log is rebuilt wholesale (merges, imports); the incremental
    path must always agree with this.
    """
    correct = sum(1 for a in annotations if a.kind == CORRECT)
    incorrect = sum(1 for a in annotations if a.kind == INCORRECT)
    counter_total = sum(1 for a in annotations if a.kind == COUNTER)
    pinned = {name: 0 for name in sorted(pinned_names)}
    for a in annotations:
        if a.function_name in pinned:
            pinned[a.function_name] += 1
    return LiveStats(correct, incorrect, counter_total, pinned)


# ---------------------------------------------------------------------------
# Checklist

@dataclass
class ChecklistItem:
    text: str
    checked: bool = False


# ---------------------------------------------------------------------------
# JSON (de)serialization, shared by storage, sync envelopes, and the HTTP API

def payload_to_dict(payload: Payload) -> dict:
    if isinstance(payload, Empty):
        return {"type": "empty"}
    if isinstance(payload, ImageRef):
        d: dict = {"type": "image", "stream_id": payload.stream_id, "seq": payload.seq}
        if payload.region is not None:
            r = payload.region
            d["region"] = {"x": r.x, "y": r.y, "w": r.w, "h": r.h}
        return d
    if isinstance(payload, CounterValue):
        return {"type": "count", "value": payload.value}
    if isinstance(payload, TranscriptText):
        return {"type": "transcript", "text": payload.text, "span_ms": payload.span_ms}
    raise TypeError(f"unknown payload: {payload!r}")


def payload_from_dict(d: dict) -> Payload:
    t = d.get("type", "empty")
    if t == "empty":
        return EMPTY
    if t == "image":
        region = None
        if "region" in d and d["region"] is not None:
            r = d["region"]
            region = Region(r["x"], r["y"], r["w"], r["h"])
        return ImageRef(d["stream_id"], d["seq"], region)
    if t == "count":
        return CounterValue(d["value"])
    if t == "transcript":
        return TranscriptText(d["text"], d["span_ms"])
    raise ValueError(f"unknown payload type: {t!r}")


def annotation_to_dict(a: Annotation) -> dict:
    return {
        "id": str(a.id),
        "run_id": str(a.run_id),
        "author": a.author.wire_name,
        "kind": a.kind.wire_name,
        "function": a.function_name,
        "color": a.color,
        "wall_time": a.wall_time,
        "media_offset": a.media_offset,
        "payload": payload_to_dict(a.payload),
        "note": a.note,
        "origin": a.origin.value,
    }


def annotation_from_dict(d: dict) -> Annotation:
    return Annotation(
        id=uuid.UUID(d["id"]),
        run_id=uuid.UUID(d["run_id"]),
        author=Author.parse(d["author"]),
        kind=AnnotationKind.parse(d["kind"]),
        function_name=d["function"],
        color=d["color"],
        wall_time=d["wall_time"],
        media_offset=d.get("media_offset"),
        payload=payload_from_dict(d.get("payload", {"type": "empty"})),
        note=d.get("note", ""),
        origin=Origin(d.get("origin", "live")),
    )


def binding_to_dict(b: ShortcutBinding) -> dict:
    return {
        "key": b.key,
        "kind": b.kind.wire_name,
        "name": b.name,
        "color": b.color,
        "pinned": b.pinned,
    }


def binding_from_dict(d: dict) -> ShortcutBinding:
    return ShortcutBinding(
        key=d["key"],
        kind=AnnotationKind.parse(d["kind"]),
        name=d["name"],
        color=d["color"],
        pinned=bool(d.get("pinned", False)),
    )
