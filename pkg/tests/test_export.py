import random

import pytest

from pilot_harness.errors import BadHeader, BadRow
from pilot_harness.export import (
    CSV_HEADER,
    accuracy_percent,
    data_to_payload,
    export_csv,
    export_report,
    format_time,
    import_csv,
    parse_time,
    payload_to_data,
)
from pilot_harness.model import (
    CORRECT,
    CounterValue,
    EMPTY,
    ImageRef,
    Region,
    TranscriptText,
)
from pilot_harness.session import PilotRun

from genlog import T0, random_run


# --- field codecs ------------------------------------------------------------

def test_time_format_and_parse():
    assert format_time(T0) == "2025-01-01T00:00:00.000Z"
    assert format_time(T0 + 12_345) == "2025-01-01T00:00:12.345Z"
    assert parse_time("2025-01-01T00:00:12.345Z") == T0 + 12_345


def test_time_roundtrip_random():
    rng = random.Random(1)
    for _ in range(500):
        ms = rng.randint(0, 4_000_000_000_000)
        assert parse_time(format_time(ms)) == ms


@pytest.mark.parametrize("payload", [
    EMPTY,
    CounterValue(3),
    TranscriptText("tap the top-left", 1500),
    TranscriptText("colons: are: fine", 10),
    ImageRef("fpv", 42),
    ImageRef("tpv", 7, Region(1, 2, 30, 40)),
])
def test_payload_data_roundtrip(payload):
    assert data_to_payload(payload_to_data(payload)) == payload


def test_counter_data_format():
    assert payload_to_data(CounterValue(3)) == "count:3"


def test_image_data_format():
    assert payload_to_data(ImageRef("fpv", 42)) == "img:frames/fpv/000042.jpg"


# --- CSV ---------------------------------------------------------------------

def test_header_is_bit_exact():
    rng = random.Random(2)
    run = random_run(rng, n=3)
    doc = export_csv(run)
    assert doc.splitlines()[0] == CSV_HEADER
    assert doc.startswith("id,time,media_offset_ms,author,type,function,color,data,notes\r\n")


def test_three_annotations_make_four_lines():
    rng = random.Random(3)
    run = random_run(rng, n=3)
    lines = [l for l in export_csv(run).split("\r\n") if l != ""]
    assert len(lines) == 4


def test_rows_follow_canonical_order():
    rng = random.Random(4)
    run = random_run(rng, n=15)
    doc = export_csv(run)
    ids = [line.split(",", 1)[0] for line in doc.split("\r\n")[1:] if line]
    assert ids == [str(a.id) for a in run.annotations]


def test_export_import_export_is_byte_stable():
    for seed in range(60):
        rng = random.Random(seed)
        run = random_run(rng)
        once = export_csv(run)
        back = import_csv(once, run_id=run.id)
        rebuilt = PilotRun(
            run_id=run.id, participant_id=run.participant_id,
            session_label=run.session_label,
            anticipated_duration_ms=run.anticipated_duration_ms,
            start_time=run.start_time, pinned_names=run.pinned_names,
        )
        rebuilt.stop_time = run.stop_time
        rebuilt.anchor_wall = run.anchor_wall
        rebuilt.archive_duration_ms = run.archive_duration_ms
        rebuilt.rebuild(back)
        assert export_csv(rebuilt) == once, f"seed {seed}"


def test_quoted_fields_roundtrip():
    rng = random.Random(99)
    run = random_run(rng, n=0)
    from genlog import random_annotation
    from pilot_harness.model import Author, Role
    ann = random_annotation(rng, run.id, Author(Role.WIZARD, "wiz-1"), T0)
    from dataclasses import replace
    ann = replace(ann, note='has "quotes", commas,\r\nand line breaks')
    run.insert(ann)
    doc = export_csv(run)
    back = import_csv(doc, run_id=run.id)
    assert back[0].note == ann.note


def test_bad_header_rejected():
    with pytest.raises(BadHeader):
        import_csv("id,time,oops\r\n")
    with pytest.raises(BadHeader):
        import_csv("")


def test_bad_row_reports_line_number():
    doc = CSV_HEADER + "\r\nnot-a-uuid,xx,0,wizard:w,correct,correct,#00AA00,,\r\n"
    with pytest.raises(BadRow) as exc:
        import_csv(doc)
    assert exc.value.line_no == 2


# --- report -------------------------------------------------------------------

def _run_nine_of_ten(seed=5):
    rng = random.Random(seed)
    run = random_run(rng, n=0)
    from dataclasses import replace

    from genlog import random_annotation
    from pilot_harness.model import Author, INCORRECT, Role
    author = Author(Role.WIZARD, "wiz-1")
    for i in range(10):
        ann = random_annotation(rng, run.id, author, T0)
        ann = replace(ann, kind=CORRECT if i < 9 else INCORRECT,
                      payload=EMPTY, wall_time=T0 + i * 1000, media_offset=i * 1000)
        run.insert(ann)
    return run


def test_report_is_deterministic():
    run = _run_nine_of_ten()
    assert export_report(run) == export_report(run)


def test_report_contains_rounded_accuracy_percent():
    # oracle: 9/10 -> 90% exactly; round-half-up formatting rule
    run = _run_nine_of_ten()
    assert accuracy_percent(run.live_stats()) == 90
    assert "90%" in export_report(run)


def test_accuracy_percent_rounds_half_up():
    from pilot_harness.model import LiveStats
    # 2/3 = 66.67% -> 67; 1/8 = 12.5% -> 13 (half rounds up)
    assert accuracy_percent(LiveStats(2, 1, 0, {})) == 67
    assert accuracy_percent(LiveStats(1, 7, 0, {})) == 13
    assert accuracy_percent(LiveStats(0, 0, 0, {})) is None


def test_comparison_report_has_column_per_run():
    run_a = _run_nine_of_ten(seed=6)
    run_b = _run_nine_of_ten(seed=7)
    html = export_report([run_a, run_b])
    assert html.count(f"<code>{run_a.id}</code>") == 1
    assert html.count(f"<code>{run_b.id}</code>") == 1
    assert '<div class="columns">' in html


def test_report_embeds_images_via_resolver():
    run = _run_nine_of_ten()
    from dataclasses import replace

    from genlog import random_annotation
    from pilot_harness.model import Author, Role, SCREENSHOT
    ann = random_annotation(random.Random(1), run.id, Author(Role.WIZARD, "wiz-1"), T0)
    ann = replace(ann, kind=SCREENSHOT, payload=ImageRef("fpv", 3),
                  wall_time=T0 + 99, media_offset=99)
    run.insert(ann)
    html = export_report(run, resolve=lambda ref: (b"\xff\xd8fake", "image/jpeg"))
    assert "data:image/jpeg;base64," in html
    html_none = export_report(run, resolve=lambda ref: None)
    assert "data:image/jpeg;base64," not in html_none
