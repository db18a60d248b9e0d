"""Random annotation log builder shared by merge/export property tests."""
import random
import uuid

from pilot_harness.model import (
    CORRECT,
    COUNTER,
    INCORRECT,
    NOTE,
    VOICE,
    Annotation,
    Author,
    CounterValue,
    EMPTY,
    ImageRef,
    Origin,
    Region,
    Role,
    TranscriptText,
    custom_kind,
)
from pilot_harness.session import PilotRun

T0 = 1_735_689_600_000

_KINDS = [CORRECT, INCORRECT, COUNTER, NOTE, VOICE, custom_kind("target_change")]
_NOTES = ["", "neck pain reported", "menu on floor", 'quote " and, comma',
          "line\nbreak", "ünïcode ✓"]


def random_annotation(rng: random.Random, run_id: uuid.UUID,
                      author: Author, anchor: int) -> Annotation:
    kind = rng.choice(_KINDS)
    offset = rng.randint(0, 60_000)
    wall = anchor + offset
    if kind == COUNTER:
        payload = CounterValue(1)  # renumbered on insert
    elif kind == VOICE:
        payload = TranscriptText(rng.choice(["tap the top-left", "hold on", "näh"]),
                                 rng.randint(100, 3000))
    elif rng.random() < 0.2:  # correct/incorrect/note/custom may carry an image
        payload = ImageRef("fpv", rng.randint(0, 900),
                           Region(1, 2, 10, 10) if rng.random() < 0.5 else None)
    else:
        payload = EMPTY
    return Annotation(
        id=uuid.UUID(int=rng.getrandbits(128), version=4),
        run_id=run_id,
        author=author,
        kind=kind,
        function_name=kind.name,
        color=rng.choice(["#00AA00", "#AA0000", "#0000AA", "#123456"]),
        wall_time=wall,
        media_offset=offset,
        payload=payload,
        note=rng.choice(_NOTES),
        origin=rng.choice([Origin.LIVE, Origin.AUTO]),
    )


def random_run(rng: random.Random, n: int = None,
               run_id: uuid.UUID = None,
               instance: str = "wiz-1",
               role: Role = Role.WIZARD) -> PilotRun:
    run_id = run_id or uuid.UUID(int=rng.getrandbits(128), version=4)
    run = PilotRun(
        run_id=run_id,
        participant_id=f"P{rng.randint(1, 9)}",
        session_label=f"S{rng.randint(1, 9)}",
        anticipated_duration_ms=60_000,
        start_time=T0,
        pinned_names=frozenset({"correct", "incorrect"}),
    )
    run.anchor_wall = T0
    author = Author(role, instance)
    if n is None:
        n = rng.randint(0, 25)
    for _ in range(n):
        run.insert(random_annotation(rng, run_id, author, T0))
    run.stop_time = T0 + 90_000
    run.archive_duration_ms = 90_000
    return run
