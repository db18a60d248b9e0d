import uuid

import pytest

from pilot_harness.media import MediaEngine, StreamDescriptor
from pilot_harness.model import (
    CORRECT,
    COUNTER,
    INCORRECT,
    SCREENSHOT,
    VOICE,
    ChecklistItem,
    Role,
    ShortcutBinding,
    custom_kind,
)
from pilot_harness.session import Session, SessionConfig
from pilot_harness.simulator import seeded_uuid_factory

T0 = 1_735_689_600_000  # 2025-01-01T00:00:00Z


def standard_bindings() -> list[ShortcutBinding]:
    return [
        ShortcutBinding("1", CORRECT, "correct", "#00AA00", pinned=True),
        ShortcutBinding("2", INCORRECT, "incorrect", "#AA0000", pinned=True),
        ShortcutBinding("3", SCREENSHOT, "screenshot", "#8B4513"),
        ShortcutBinding("4", COUNTER, "mark", "#0000AA", pinned=True),
        ShortcutBinding("v", VOICE, "voice", "#555555"),
        ShortcutBinding("5", custom_kind("gesture"), "gesture", "#224466"),
    ]


def make_config(checklist=(), tpv=False, record_inputs=None) -> SessionConfig:
    return SessionConfig(
        session_name="desk test",
        role=Role.SINGLE_USER,
        fpv_source=StreamDescriptor("fpv", "sim://fpv", 15.0),
        tpv_source=StreamDescriptor("tpv", "sim://tpv", 15.0) if tpv else None,
        wizarding_url="http://localhost:9/slides",
        checklist=[ChecklistItem(text, checked) for text, checked in checklist],
        bindings=standard_bindings(),
        record_inputs=record_inputs,
    )


@pytest.fixture
def headless_session() -> Session:
    """Session without a media engine; media time anchors at run start."""
    return Session(make_config(), instance_id="desk-1",
                   id_factory=seeded_uuid_factory(7))


@pytest.fixture
def engine(tmp_path) -> MediaEngine:
    return MediaEngine(tmp_path / "archives")


def started_run(session: Session, now: int = T0):
    return session.start_pilot("P1", "S1", anticipated_duration_ms=600_000, now=now)


def make_uuid(n: int) -> uuid.UUID:
    return uuid.UUID(int=n)
