"""CSV and HTML export, plus the lossless CSV import path.

The CSV schema is fixed: ``id,time,media_offset_ms,author,type,function,color,
data,notes`` with RFC-4180 quoting and CRLF line endings. The ``data`` column
multiplexes payload types behind a prefix (``img:``, ``count:``, ``text:``);
export -> import -> export is byte-stable.
"""
from __future__ import annotations

import base64
import csv
import html
import io
import re
import shlex
import subprocess
import uuid
from datetime import datetime, timezone
from decimal import ROUND_HALF_UP, Decimal
from typing import Callable, Optional

from .errors import BadHeader, BadRow
from .model import (
    Annotation,
    AnnotationKind,
    Author,
    CounterValue,
    EMPTY,
    ImageRef,
    LiveStats,
    Origin,
    Payload,
    Region,
    TranscriptText,
)
from .session import PilotRun

CSV_HEADER = "id,time,media_offset_ms,author,type,function,color,data,notes"
_CSV_COLUMNS = CSV_HEADER.split(",")

ImageResolver = Callable[[ImageRef], Optional[tuple[bytes, str]]]


def run_conversion(template: str, **paths: str) -> subprocess.CompletedProcess:
    """Run an external conversion command built from a placeholder template.

    PDF rendering and video encoding stay out of the correctness path; they
    are delegated to whatever tool the operator configures, e.g.
    ``wkhtmltopdf {input} {output}``. Unknown placeholders raise KeyError.
    """
    command = [part.format(**paths) for part in shlex.split(template)]
    return subprocess.run(command, capture_output=True, text=True, check=False)


# ---------------------------------------------------------------------------
# Field codecs

def format_time(wall_ms: int) -> str:
    """ISO-8601 UTC with millisecond precision, e.g. 2025-01-01T00:00:12.345Z."""
    dt = datetime.fromtimestamp(wall_ms // 1000, tz=timezone.utc)
    return f"{dt:%Y-%m-%dT%H:%M:%S}.{wall_ms % 1000:03d}Z"


_TIME_RE = re.compile(
    r"^(\d{4})-(\d{2})-(\d{2})T(\d{2}):(\d{2}):(\d{2})\.(\d{3})Z$"
)


def parse_time(text: str) -> int:
    m = _TIME_RE.match(text)
    if not m:
        raise ValueError(f"not an ISO-8601 ms UTC time: {text!r}")
    y, mo, d, h, mi, s, ms = (int(g) for g in m.groups())
    dt = datetime(y, mo, d, h, mi, s, tzinfo=timezone.utc)
    return int(dt.timestamp()) * 1000 + ms


def image_path(ref: ImageRef) -> str:
    path = f"frames/{ref.stream_id}/{ref.seq:06d}.jpg"
    if ref.region is not None:
        r = ref.region
        path += f"?x={r.x}&y={r.y}&w={r.w}&h={r.h}"
    return path


_IMG_RE = re.compile(
    r"^frames/(?P<stream>[^/]+)/(?P<seq>\d{6})\.jpg"
    r"(?:\?x=(?P<x>\d+)&y=(?P<y>\d+)&w=(?P<w>\d+)&h=(?P<h>\d+))?$"
)


def payload_to_data(payload: Payload) -> str:
    if isinstance(payload, ImageRef):
        return f"img:{image_path(payload)}"
    if isinstance(payload, CounterValue):
        return f"count:{payload.value}"
    if isinstance(payload, TranscriptText):
        return f"text:{payload.span_ms}:{payload.text}"
    return ""


def data_to_payload(data: str) -> Payload:
    if data == "":
        return EMPTY
    if data.startswith("img:"):
        m = _IMG_RE.match(data[4:])
        if not m:
            raise ValueError(f"bad image path: {data!r}")
        region = None
        if m.group("x") is not None:
            region = Region(int(m.group("x")), int(m.group("y")),
                            int(m.group("w")), int(m.group("h")))
        return ImageRef(m.group("stream"), int(m.group("seq")), region)
    if data.startswith("count:"):
        return CounterValue(int(data[len("count:"):]))
    if data.startswith("text:"):
        span, _, text = data[len("text:"):].partition(":")
        return TranscriptText(text, int(span))
    raise ValueError(f"unknown data prefix: {data!r}")


# ---------------------------------------------------------------------------
# CSV export / import

def annotation_row(a: Annotation) -> list[str]:
    return [
        str(a.id),
        format_time(a.wall_time),
        "" if a.media_offset is None else str(a.media_offset),
        a.author.wire_name,
        a.kind.wire_name,
        a.function_name,
        a.color,
        payload_to_data(a.payload),
        a.note,
    ]


def export_csv(run: PilotRun, selection=None) -> str:
    """Canonical CSV: header plus one row per annotation, canonical order."""
    from .analyzer import EVERYTHING, filter_annotations

    annotations = filter_annotations(run, selection or EVERYTHING)
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\r\n")
    writer.writerow(_CSV_COLUMNS)
    for a in annotations:
        writer.writerow(annotation_row(a))
    return out.getvalue()


def import_csv(doc: str, run_id: Optional[uuid.UUID] = None) -> list[Annotation]:
    """Rebuild annotations from a canonical CSV document.

    ``run_id`` stamps the rows (the schema does not carry it); imported rows
    arrive as ``Origin.REMOTE`` since import exists for cross-instance merge.
    """
    reader = csv.reader(io.StringIO(doc))
    try:
        header = next(reader)
    except StopIteration:
        raise BadHeader("empty document") from None
    if header != _CSV_COLUMNS:
        raise BadHeader(f"expected {CSV_HEADER!r}, got {','.join(header)!r}")
    annotations = []
    for line_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(_CSV_COLUMNS):
            raise BadRow(line_no, f"{len(row)} fields, expected {len(_CSV_COLUMNS)}")
        try:
            kind = AnnotationKind.parse(row[4])
            annotations.append(Annotation(
                id=uuid.UUID(row[0]),
                run_id=run_id or uuid.UUID(int=0),
                author=Author.parse(row[3]),
                kind=kind,
                function_name=row[5],
                color=row[6],
                wall_time=parse_time(row[1]),
                media_offset=int(row[2]) if row[2] else None,
                payload=data_to_payload(row[7]),
                note=row[8],
                origin=Origin.REMOTE,
            ))
        except (ValueError, KeyError) as exc:
            raise BadRow(line_no, str(exc)) from exc
    return annotations


# ---------------------------------------------------------------------------
# HTML report

def accuracy_percent(stats: LiveStats) -> Optional[int]:
    """Display accuracy: integer percent, round half up."""
    acc = stats.accuracy
    if acc is None:
        return None
    pct = Decimal(acc.numerator * 100) / Decimal(acc.denominator)
    return int(pct.quantize(Decimal("1"), rounding=ROUND_HALF_UP))


def _accuracy_text(stats: LiveStats) -> str:
    pct = accuracy_percent(stats)
    return "—" if pct is None else f"{pct}%"


_STYLE = """
body { font-family: sans-serif; margin: 2em; color: #222; }
h1 { font-size: 1.4em; } h2 { font-size: 1.1em; margin-top: 1.5em; }
table { border-collapse: collapse; width: 100%; }
th, td { border: 1px solid #ccc; padding: 4px 8px; text-align: left;
         font-size: 0.9em; vertical-align: top; }
th { background: #f0f0f0; }
.stats span { display: inline-block; margin-right: 2em; font-size: 1.1em; }
.timeline { position: relative; height: 26px; background: #eee;
            border: 1px solid #ccc; margin: 8px 0; }
.timeline .mark { position: absolute; top: 0; width: 3px; height: 100%; }
.shots img { max-height: 90px; margin: 2px; border: 1px solid #999; }
.columns { display: flex; gap: 2em; } .columns > div { flex: 1; }
"""


def _timeline_strip(run: PilotRun, duration_ms: Optional[int]) -> str:
    total = duration_ms or run.duration_ms or 0
    marks = []
    for a in run.annotations:
        if a.media_offset is None or total <= 0:
            continue
        pos = min(100.0, 100.0 * a.media_offset / total)
        marks.append(
            f'<div class="mark" style="left:{pos:.3f}%;'
            f'background:{html.escape(a.color)}" title="{html.escape(a.kind.wire_name)}"></div>'
        )
    return f'<div class="timeline">{"".join(marks)}</div>'


def _stats_block(stats: LiveStats) -> str:
    return (
        '<div class="stats">'
        f'<span>correct: {stats.correct}</span>'
        f'<span>incorrect: {stats.incorrect}</span>'
        f'<span>marks: {stats.counter_total}</span>'
        f'<span>accuracy: {_accuracy_text(stats)}</span>'
        "</div>"
    )


def _annotation_table(annotations) -> str:
    rows = []
    for a in annotations:
        offset = "" if a.media_offset is None else str(a.media_offset)
        rows.append(
            "<tr>"
            f'<td style="color:{html.escape(a.color)}">&#9632;</td>'
            f"<td>{html.escape(format_time(a.wall_time))}</td>"
            f"<td>{html.escape(offset)}</td>"
            f"<td>{html.escape(a.kind.wire_name)}</td>"
            f"<td>{html.escape(a.function_name)}</td>"
            f"<td>{html.escape(a.author.wire_name)}</td>"
            f"<td>{html.escape(payload_to_data(a.payload))}</td>"
            f"<td>{html.escape(a.note)}</td>"
            "</tr>"
        )
    return (
        "<table><thead><tr><th></th><th>time</th><th>offset ms</th><th>type</th>"
        "<th>function</th><th>author</th><th>data</th><th>notes</th></tr></thead>"
        f"<tbody>{''.join(rows)}</tbody></table>"
    )


def _screenshot_block(summary, resolve: Optional[ImageResolver]) -> str:
    if resolve is None or not summary.screenshots:
        return ""
    imgs = []
    for ref in summary.screenshots:
        resolved = resolve(ref)
        if resolved is None:
            continue
        data, mime = resolved
        b64 = base64.b64encode(data).decode("ascii")
        imgs.append(
            f'<img src="data:{mime};base64,{b64}" alt="{html.escape(image_path(ref))}"/>'
        )
    if not imgs:
        return ""
    return f'<h2>Screenshots</h2><div class="shots">{"".join(imgs)}</div>'


def _run_column(run: PilotRun, selection, resolve: Optional[ImageResolver]) -> str:
    from .analyzer import EVERYTHING, summarize

    summary = summarize(run, selection or EVERYTHING)
    duration = summary.duration_ms
    duration_text = "—" if duration is None else f"{duration} ms"
    parts = [
        f"<h2>{html.escape(summary.session_label)} "
        f"(participant {html.escape(summary.participant_id)})</h2>",
        f"<p>run <code>{summary.run_id}</code>, duration {duration_text}</p>",
        _stats_block(summary.stats),
        _timeline_strip(run, duration),
        _screenshot_block(summary, resolve),
        "<h2>Annotations</h2>",
        _annotation_table(summary.selected),
    ]
    if summary.notes:
        notes = "".join(
            f"<li><code>{nid}</code>: {html.escape(text)}</li>"
            for nid, text in summary.notes
        )
        parts.append(f"<h2>Notes</h2><ul>{notes}</ul>")
    return "\n".join(parts)


def export_report(runs, selection=None,
                  resolve: Optional[ImageResolver] = None,
                  title: str = "Pilot summary") -> str:
    """Self-contained deterministic HTML for one run or a comparison of runs.

    No generation timestamps and no external references; exporting the same
    sealed run twice yields identical bytes.
    """
    if isinstance(runs, PilotRun):
        runs = [runs]
    columns = "".join(
        f"<div>{_run_column(run, selection, resolve)}</div>" for run in runs
    )
    body = f'<div class="columns">{columns}</div>' if len(runs) > 1 \
        else _run_column(runs[0], selection, resolve)
    return (
        "<!DOCTYPE html>\n"
        '<html lang="en"><head><meta charset="utf-8"/>'
        f"<title>{html.escape(title)}</title>"
        f"<style>{_STYLE}</style></head>\n"
        f"<body><h1>{html.escape(title)}</h1>\n{body}\n</body></html>\n"
    )
