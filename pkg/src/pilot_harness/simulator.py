"""Deterministic stand-in for OHMD, room camera, participant, and wizard.

Everything runs on a virtual clock derived from the script, so repeated runs
with one seed produce identical frames, archives, annotation logs, and link
timings. Frames carry their seq and capture time in container headers; the
rendered test pattern (a solid hue keyed off seq) is cosmetic.
"""
from __future__ import annotations

import colorsys
import json
import random
import uuid
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from pathlib import Path
from typing import Callable, Iterator, Optional

from .errors import BadConfig, SessionNotConfigured
from .media import Frame, FrameEncoding, MediaEngine
from .model import CORRECT, INCORRECT, SCREENSHOT, VOICE, ImageRef, Origin, Timestamp
from .session import PilotRun, Session, TriggerKind, TriggerSource
from .sync import PingSample

SIM_EPOCH_MS = 1_735_689_600_000  # 2025-01-01T00:00:00Z
FRAME_WIDTH = 64
FRAME_HEIGHT = 36
PREROLL_MS = 1_000  # streams run briefly before the pilot starts
UTTERANCE_MS = 1_000  # scripted utterances get a fixed nominal length

SLIDE_CHANGE_EVENT = TriggerSource(TriggerKind.WIZARD, "slide_changed")


# ---------------------------------------------------------------------------
# Scripts

@dataclass(frozen=True)
class LatencyModel:
    mean_ms: int = 0
    jitter_ms: int = 0
    asymmetry_ms: int = 0


@dataclass(frozen=True)
class SimEvent:
    at_ms: int
    type: str  # slide_change | participant_tap | utterance | screenshot
    n: Optional[int] = None
    correct: Optional[bool] = None
    text: Optional[str] = None


@dataclass(frozen=True)
class SimScript:
    seed: int
    fps: float
    duration_ms: int
    events: tuple[SimEvent, ...] = ()
    skew_ms: int = 0
    latency: LatencyModel = LatencyModel()
    # fixtures may pin expected tallies explicitly; wrong values make the
    # run's verification fail, which is exactly what negative controls want
    expect_overrides: Optional[tuple[tuple[str, object], ...]] = None

    def __post_init__(self):
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        last = -1
        for ev in self.events:
            if ev.at_ms < last:
                raise ValueError("events must be sorted by at_ms")
            if ev.at_ms > self.duration_ms:
                raise ValueError(f"event at {ev.at_ms} past duration {self.duration_ms}")
            last = ev.at_ms

    @classmethod
    def from_dict(cls, d: dict) -> "SimScript":
        try:
            latency = d.get("latency", {})
            events = tuple(
                SimEvent(
                    at_ms=e["at_ms"],
                    type=e["type"],
                    n=e.get("n"),
                    correct=e.get("correct"),
                    text=e.get("text"),
                )
                for e in d.get("events", [])
            )
            overrides = None
            if "expect" in d:
                overrides = tuple(sorted(d["expect"].items()))
            return cls(
                seed=d["seed"],
                fps=d["fps"],
                duration_ms=d["duration_ms"],
                events=events,
                skew_ms=d.get("skew_ms", 0),
                latency=LatencyModel(
                    mean_ms=latency.get("mean_ms", 0),
                    jitter_ms=latency.get("jitter_ms", 0),
                    asymmetry_ms=latency.get("asymmetry_ms", 0),
                ),
                expect_overrides=overrides,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise BadConfig(f"bad simulator script: {exc}") from exc

    @classmethod
    def load(cls, path: Path) -> "SimScript":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise BadConfig(f"cannot read script {path}: {exc}") from exc
        return cls.from_dict(doc)


def seeded_uuid_factory(seed: int) -> Callable[[], uuid.UUID]:
    rng = random.Random(seed)
    return lambda: uuid.UUID(int=rng.getrandbits(128), version=4)


def default_session_doc() -> dict:
    """Ready-to-run session configuration for simulator-driven pilots."""
    return {
        "session_name": "simulated pilot",
        "role": "single_user",
        "fpv_source": {"stream_id": "fpv", "source_url": "sim://fpv",
                       "expected_fps": 15},
        "tpv_source": {"stream_id": "tpv", "source_url": "sim://tpv",
                       "expected_fps": 15},
        "wizarding_url": "sim://slides",
        "checklist": [{"text": "Confirm FPV", "checked": True},
                      {"text": "Confirm TPV", "checked": True},
                      {"text": "Confirm recording", "checked": True}],
        "bindings": [
            {"key": "1", "kind": "correct", "name": "correct",
             "color": "#00AA00", "pinned": True},
            {"key": "2", "kind": "incorrect", "name": "incorrect",
             "color": "#AA0000", "pinned": True},
            {"key": "3", "kind": "screenshot", "name": "screenshot",
             "color": "#8B4513", "pinned": False},
            {"key": "4", "kind": "counter", "name": "mark",
             "color": "#0000AA", "pinned": True},
        ],
        "record_inputs": ["fpv", "tpv"],
        "auto_triggers": [{
            "source": "wizard:slide_changed",
            "binding": {"key": "9", "kind": "custom:target_change",
                        "name": "target_change", "color": "#FF8800",
                        "pinned": False},
        }],
    }


# ---------------------------------------------------------------------------
# Test-pattern frames

@lru_cache(maxsize=4096)
def _pattern_jpeg(seq: int, width: int, height: int) -> bytes:
    from io import BytesIO

    from PIL import Image

    hue = (seq * 0.137508) % 1.0  # golden-angle walk through the palette
    r, g, b = colorsys.hsv_to_rgb(hue, 0.65, 0.9)
    img = Image.new("RGB", (width, height), (int(r * 255), int(g * 255), int(b * 255)))
    out = BytesIO()
    img.save(out, format="JPEG", quality=80)
    return out.getvalue()


def frame_times(fps: float, duration_ms: int) -> list[int]:
    """Capture times at exact fps spacing with floor semantics."""
    times = []
    k = 0
    while True:
        t = int(k * 1000 // fps) if float(fps).is_integer() else int(k * 1000 / fps)
        if t >= duration_ms:
            break
        times.append(t)
        k += 1
    return times


def pattern_stream(script: SimScript, stream_id: str = "fpv",
                   base_epoch: Timestamp = SIM_EPOCH_MS,
                   span_ms: Optional[int] = None) -> Iterator[Frame]:
    """Deterministic frame sequence for one stream."""
    span = script.duration_ms if span_ms is None else span_ms
    for seq, t in enumerate(frame_times(script.fps, span)):
        yield Frame(
            stream_id=stream_id,
            seq=seq,
            capture_time=base_epoch + t,
            width=FRAME_WIDTH,
            height=FRAME_HEIGHT,
            encoding=FrameEncoding.JPEG,
            data=_pattern_jpeg(seq, FRAME_WIDTH, FRAME_HEIGHT),
        )


# ---------------------------------------------------------------------------
# Scripted end-to-end runs

@dataclass
class SimReport:
    """Ground-truth expectations from the script next to observed tallies."""

    expected: dict
    observed: dict
    run_id: Optional[str] = None

    @property
    def matches(self) -> bool:
        return self.expected == self.observed

    def diff(self) -> dict:
        out = {}
        for key in sorted(set(self.expected) | set(self.observed)):
            exp = self.expected.get(key)
            obs = self.observed.get(key)
            if exp != obs:
                out[key] = {"expected": exp, "observed": obs}
        return out

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "expected": self.expected,
            "observed": self.observed,
            "matches": self.matches,
            "diff": self.diff(),
        }


def _accuracy_str(correct: int, incorrect: int) -> Optional[str]:
    if correct + incorrect == 0:
        return None
    return f"{float(Fraction(correct, correct + incorrect)):.4f}"


def expected_tallies(script: SimScript, auto_function: str = "target_change") -> dict:
    correct = sum(1 for e in script.events if e.type == "participant_tap" and e.correct)
    incorrect = sum(1 for e in script.events
                    if e.type == "participant_tap" and not e.correct)
    slide_changes = sum(1 for e in script.events if e.type == "slide_change")
    utterances = sum(1 for e in script.events if e.type == "utterance")
    screenshots = sum(1 for e in script.events if e.type == "screenshot")
    trial_durations = []
    last_change: Optional[int] = None
    for e in script.events:
        if e.type == "slide_change":
            last_change = e.at_ms
        elif e.type == "participant_tap" and last_change is not None:
            trial_durations.append(e.at_ms - last_change)
            last_change = None
    return {
        "correct": correct,
        "incorrect": incorrect,
        "accuracy": _accuracy_str(correct, incorrect),
        "auto_annotations": slide_changes,
        "voice_annotations": utterances,
        "screenshots": screenshots,
        "trial_durations_ms": trial_durations,
    }


def observed_tallies(session: Session, run: PilotRun, auto_function: str) -> dict:
    stats = run.live_stats()
    autos = [a for a in run.annotations
             if a.origin == Origin.AUTO and a.function_name == auto_function]
    voices = [a for a in run.annotations if a.kind == VOICE]
    shots = [a for a in run.annotations
             if a.kind == SCREENSHOT and isinstance(a.payload, ImageRef)]
    taps = [a for a in run.annotations if a.kind in (CORRECT, INCORRECT)]
    trial_durations = []
    pending_change: Optional[int] = None
    for a in sorted(autos + taps, key=lambda a: a.sort_key):
        if a.function_name == auto_function:
            pending_change = a.wall_time
        elif pending_change is not None:
            trial_durations.append(a.wall_time - pending_change)
            pending_change = None
    return {
        "correct": stats.correct,
        "incorrect": stats.incorrect,
        "accuracy": _accuracy_str(stats.correct, stats.incorrect),
        "auto_annotations": len(autos),
        "voice_annotations": len(voices),
        "screenshots": len(shots),
        "trial_durations_ms": trial_durations,
    }


class FramePusher:
    """Delivery strategy for generated frames (direct calls or HTTP push)."""

    def __init__(self, engine: MediaEngine):
        self.engine = engine

    def push(self, frame: Frame) -> None:
        handle = self.engine.handle(frame.stream_id)
        if handle is None:
            raise SessionNotConfigured(f"stream {frame.stream_id!r} not open")
        self.engine.ingest_frame(handle, frame)

    def finish(self) -> None:
        pass


class HttpFramePusher:
    """Pushes frames through the real ingest endpoint, one multipart part per
    request so each frame is applied before the simulation advances."""

    BOUNDARY = "simframe"

    def __init__(self, base_url: str, token: Optional[str] = None):
        import httpx

        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self.client = httpx.Client(base_url=base_url, timeout=30.0,
                                   headers=headers)

    def push(self, frame: Frame) -> None:
        mime = "image/jpeg" if frame.encoding == FrameEncoding.JPEG \
            else "application/octet-stream"
        body = (
            (f"--{self.BOUNDARY}\r\n"
             f"Content-Type: {mime}\r\n"
             f"X-Seq: {frame.seq}\r\n"
             f"X-Capture-Time: {frame.capture_time}\r\n"
             f"X-Width: {frame.width}\r\nX-Height: {frame.height}\r\n"
             f"X-Encoding: {frame.encoding.value}\r\n\r\n").encode("ascii")
            + frame.data
            + f"\r\n--{self.BOUNDARY}--\r\n".encode("ascii")
        )
        resp = self.client.post(
            f"/ingest/{frame.stream_id}", content=body,
            headers={"content-type":
                     f"multipart/x-mixed-replace; boundary={self.BOUNDARY}"},
        )
        resp.raise_for_status()

    def finish(self) -> None:
        self.client.close()


def scripted_run(script: SimScript, session: Session,
                 pusher: Optional[FramePusher] = None,
                 auto_function: str = "target_change",
                 base_epoch: Timestamp = SIM_EPOCH_MS) -> SimReport:
    """Drive ingestion and scripted events end-to-end through a session.

    The pilot starts ``PREROLL_MS`` into the frame timeline (streams must be
    live before a pilot can start) and stops after ``script.duration_ms``.
    """
    engine = session.media
    if engine is None:
        raise SessionNotConfigured("session has no media engine")
    has_trigger = any(src == SLIDE_CHANGE_EVENT
                      for src, _ in session.triggers.values())
    if not has_trigger and any(e.type == "slide_change" for e in script.events):
        raise SessionNotConfigured("no auto-trigger registered for slide changes")
    if pusher is None:
        pusher = FramePusher(engine)

    for stream_id in session.config.record_inputs:
        if engine.handle(stream_id) is None:
            desc = session.config.fpv_source \
                if stream_id == session.config.fpv_source.stream_id \
                else session.config.tpv_source
            if desc is None or desc.stream_id != stream_id:
                raise SessionNotConfigured(f"no descriptor for stream {stream_id!r}")
            engine.open_stream(desc)

    total_span = PREROLL_MS + script.duration_ms
    timeline: list[tuple[int, int, object]] = []  # (t, order, item)
    for stream_id in session.config.record_inputs:
        for frame in pattern_stream(script, stream_id, base_epoch, span_ms=total_span):
            timeline.append((frame.capture_time - base_epoch, 0, frame))
    for ev in script.events:
        timeline.append((PREROLL_MS + ev.at_ms, 1, ev))
    timeline.sort(key=lambda item: (item[0], item[1]))

    pilot_start = base_epoch + PREROLL_MS
    pilot_stop = base_epoch + PREROLL_MS + script.duration_ms
    run: Optional[PilotRun] = None
    utterances: list[tuple[int, int, str]] = []

    for t, _, item in timeline:
        now = base_epoch + t
        if run is None and now >= pilot_start:
            run = session.start_pilot(
                participant_id="sim", session_label="scripted",
                anticipated_duration_ms=script.duration_ms, now=pilot_start,
            )
        if isinstance(item, Frame):
            pusher.push(item)
            continue
        ev = item
        if run is None:
            run = session.start_pilot(
                participant_id="sim", session_label="scripted",
                anticipated_duration_ms=script.duration_ms, now=pilot_start,
            )
        if ev.type == "slide_change":
            session.dispatch_event(SLIDE_CHANGE_EVENT, now, run)
        elif ev.type == "participant_tap":
            kind = CORRECT if ev.correct else INCORRECT
            binding = session.config.binding_for_kind(kind)
            session.record_annotation(run, binding=binding, kind=kind,
                                      event_time=now)
        elif ev.type == "screenshot":
            binding = session.config.binding_for_kind(SCREENSHOT)
            session.record_annotation(run, binding=binding, kind=SCREENSHOT,
                                      event_time=now, note=ev.text or "")
        elif ev.type == "utterance":
            utterances.append((ev.at_ms, ev.text))
        else:
            raise BadConfig(f"unknown event type {ev.type!r}")
    pusher.finish()

    if run is None:
        run = session.start_pilot(
            participant_id="sim", session_label="scripted",
            anticipated_duration_ms=script.duration_ms, now=pilot_start,
        )
    session.stop_pilot(run, pilot_stop)

    spans = []
    for i, (start, text) in enumerate(utterances):
        end = min(start + UTTERANCE_MS, script.duration_ms)
        if i + 1 < len(utterances):
            end = min(end, utterances[i + 1][0])
        spans.append((start, end, text))
    if spans:
        session.attach_transcripts(run, spans)

    expected = expected_tallies(script, auto_function)
    if script.expect_overrides:
        expected.update(dict(script.expect_overrides))
    return SimReport(
        expected=expected,
        observed=observed_tallies(session, run, auto_function),
        run_id=str(run.id),
    )


# ---------------------------------------------------------------------------
# Simulated peer link (virtual clocks, deterministic latency and skew)

class SimClock:
    """Virtual clock: reads true simulation time shifted by a fixed skew."""

    def __init__(self, link: "SimLink", skew_ms: int):
        self.link = link
        self.skew_ms = skew_ms

    def now(self) -> Timestamp:
        return self.link.true_now + self.skew_ms


class SimLink:
    """Deterministic two-endpoint link with uniform jitter around a mean
    delay and a constant one-way asymmetry (a -> b direction)."""

    def __init__(self, latency: LatencyModel, skew_ms: int, seed: int,
                 start: Timestamp = SIM_EPOCH_MS):
        self.latency = latency
        self.rng = random.Random(seed)
        self.true_now = start
        self.clock_a = SimClock(self, 0)  # authority
        self.clock_b = SimClock(self, skew_ms)

    def advance(self, ms: int) -> None:
        self.true_now += ms

    def _base_delay(self) -> int:
        jitter = self.latency.jitter_ms
        base = self.latency.mean_ms
        if jitter:
            base += self.rng.randint(-jitter, jitter)
        return max(0, base)

    def one_way_delay(self, a_to_b: bool) -> int:
        delay = self._base_delay()
        if a_to_b:
            delay += self.latency.asymmetry_ms
        return delay

    def ping_exchange(self, requester_a: bool = True) -> PingSample:
        """One NTP-style round trip. The transit delay is sampled once per
        exchange so the two directions differ only by the asymmetry term."""
        req_clock = self.clock_a if requester_a else self.clock_b
        resp_clock = self.clock_b if requester_a else self.clock_a
        base = self._base_delay()
        d_req = base + (self.latency.asymmetry_ms if requester_a else 0)
        d_resp = base + (0 if requester_a else self.latency.asymmetry_ms)
        t1 = req_clock.now()
        self.advance(d_req)
        t2 = resp_clock.now()
        t3 = resp_clock.now()
        self.advance(d_resp)
        t4 = req_clock.now()
        return PingSample(t1=t1, t2=t2, t3=t3, t4=t4)

    def ping_samples(self, count: int = 10, gap_ms: int = 1000,
                     requester_a: bool = True) -> list[PingSample]:
        samples = []
        for _ in range(count):
            samples.append(self.ping_exchange(requester_a))
            self.advance(gap_ms)
        return samples


def simulate_link(latency: LatencyModel, skew_ms: int, seed: int) -> SimLink:
    return SimLink(latency, skew_ms, seed)
