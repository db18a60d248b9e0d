import random
from fractions import Fraction

import pytest

from pilot_harness.analyzer import (
    EVERYTHING,
    AnnotationFilter,
    add_retro_note,
    build_timeline,
    compare,
    filter_annotations,
    summarize,
)
from pilot_harness.errors import ArchiveMissing, EmptyRunList, OffsetOutOfRange
from pilot_harness.media import MediaEngine, StreamDescriptor
from pilot_harness.model import CORRECT, INCORRECT, NOTE, Origin
from pilot_harness.session import Session
from pilot_harness.simulator import seeded_uuid_factory

from conftest import T0, make_config
from genlog import random_run
from test_media import raw_frame


def recorded_session(tmp_path, n_frames=60):
    engine = MediaEngine(tmp_path / "archives")
    fpv = engine.open_stream(StreamDescriptor("fpv", "sim://fpv", 15.0))
    session = Session(make_config(), instance_id="desk-1", media=engine,
                      id_factory=seeded_uuid_factory(3))
    engine.ingest_frame(fpv, raw_frame(0, -100))
    run = session.start_pilot("P1", "S1", 600_000, now=T0)
    for i in range(n_frames):
        engine.ingest_frame(fpv, raw_frame(i + 1, i * 1000 // 15))
    return engine, session, run


# --- timeline -----------------------------------------------------------------

def test_timeline_markers_in_offset_order(tmp_path):
    engine, session, run = recorded_session(tmp_path)
    for t in (3000, 1000, 2000):
        session.record_annotation(run, kind=CORRECT, event_time=T0 + t)
    session.stop_pilot(run, T0 + 4000)
    timeline = build_timeline(run, session.archive_for(run))
    assert [m.media_offset for m in timeline.markers] == [1000, 2000, 3000]
    assert timeline.duration_ms == session.archive_for(run).duration_ms


def test_timeline_empty_run_keeps_duration(tmp_path):
    engine, session, run = recorded_session(tmp_path)
    session.stop_pilot(run, T0 + 4000)
    timeline = build_timeline(run, session.archive_for(run))
    assert timeline.markers == ()
    assert timeline.duration_ms > 0


def test_timeline_offsets_equal_wall_to_media(tmp_path):
    # cross-module oracle: archive.wall_to_media of each annotation's wall time
    engine, session, run = recorded_session(tmp_path)
    for t in (500, 1500, 2500):
        session.record_annotation(run, kind=INCORRECT, event_time=T0 + t)
    session.stop_pilot(run, T0 + 4000)
    archive = session.archive_for(run)
    timeline = build_timeline(run, archive)
    by_id = {a.id: a for a in run.annotations}
    for marker in timeline.markers:
        ann = by_id[marker.annotation_id]
        assert marker.media_offset == archive.wall_to_media(ann.wall_time)


def test_timeline_requires_sealed_archive(tmp_path):
    engine, session, run = recorded_session(tmp_path)
    with pytest.raises(ArchiveMissing):
        build_timeline(run, session.archive_for(run))  # still recording
    with pytest.raises(ArchiveMissing):
        build_timeline(run, None)


def test_timeline_marker_count_equals_offset_annotations():
    rng = random.Random(2)
    run = random_run(rng, n=20)

    class _Sealed:
        sealed = True
        duration_ms = 90_000

    timeline = build_timeline(run, _Sealed())
    expected = len([a for a in run.annotations if a.media_offset is not None])
    assert len(timeline.markers) == expected


# --- filters -------------------------------------------------------------------

def _tagged_run(session_factory=None):
    session = Session(make_config(), instance_id="desk-1",
                      id_factory=seeded_uuid_factory(8))
    run = session.start_pilot("P1", "S1", 600_000, now=T0)
    for i in range(9):
        session.record_annotation(run, kind=CORRECT, event_time=T0 + 1000 + i)
    session.record_annotation(run, kind=INCORRECT, event_time=T0 + 5000)
    session.stop_pilot(run, T0 + 60_000)
    session.edit_annotation(run, run.annotations[-1].id,
                            {"note": "causing neck pain"})
    return session, run


def test_empty_filter_is_identity():
    _, run = _tagged_run()
    assert filter_annotations(run, EVERYTHING) == list(run.annotations)


def test_kind_filter_matches_tally():
    _, run = _tagged_run()
    # oracle: direct tally of the constructed log
    expected = [a for a in run.annotations if a.kind == CORRECT]
    got = filter_annotations(run, AnnotationFilter(kinds=frozenset({CORRECT})))
    assert got == expected
    assert len(got) == 9


def test_text_query_matches_note():
    _, run = _tagged_run()
    got = filter_annotations(run, AnnotationFilter(text_query="neck"))
    assert len(got) == 1
    assert got[0].note == "causing neck pain"


def test_time_range_filter():
    _, run = _tagged_run()
    got = filter_annotations(run, AnnotationFilter(time_range=(1000, 1004)))
    assert [a.media_offset for a in got] == [1000, 1001, 1002, 1003, 1004]


def test_reversed_time_range_rejected():
    with pytest.raises(ValueError):
        AnnotationFilter(time_range=(10, 5))


def test_filters_compose():
    rng = random.Random(13)
    run = random_run(rng, n=25)
    f1 = AnnotationFilter(kinds=frozenset({CORRECT, INCORRECT}))
    f2 = AnnotationFilter(time_range=(10_000, 50_000), text_query="a")
    inner = filter_annotations(run, f1)
    twice = [a for a in inner if f2.matches(a)]
    once = filter_annotations(run, f1.intersect(f2))
    assert twice == once


def test_disjoint_ranges_compose_to_nothing():
    _, run = _tagged_run()
    f1 = AnnotationFilter(time_range=(0, 10))
    f2 = AnnotationFilter(time_range=(20, 30))
    assert filter_annotations(run, f1.intersect(f2)) == []


def test_disjoint_kind_sets_compose_to_nothing():
    _, run = _tagged_run()
    f1 = AnnotationFilter(kinds=frozenset({CORRECT}))
    f2 = AnnotationFilter(kinds=frozenset({INCORRECT}))
    composed = f1.intersect(f2)
    assert filter_annotations(run, composed) == []
    inner = filter_annotations(run, f1)
    assert [a for a in inner if f2.matches(a)] == []


def test_disjoint_author_sets_compose_to_nothing():
    _, run = _tagged_run()
    f1 = AnnotationFilter(authors=frozenset({"desk-1"}))
    f2 = AnnotationFilter(authors=frozenset({"obs-9"}))
    assert filter_annotations(run, f1.intersect(f2)) == []


def test_filter_composition_randomized():
    from pilot_harness.model import COUNTER, NOTE, VOICE, custom_kind

    kind_pool = [CORRECT, INCORRECT, COUNTER, NOTE, VOICE,
                 custom_kind("target_change")]
    author_pool = ["wiz-1", "obs-1", "obs-2"]
    query_pool = [None, "a", "neck", "tap"]

    def random_filter(rng):
        kinds = frozenset(rng.sample(kind_pool, rng.randint(0, len(kind_pool))))
        authors = frozenset(rng.sample(author_pool, rng.randint(0, 2)))
        time_range = None
        if rng.random() < 0.5:
            lo = rng.randint(0, 50_000)
            time_range = (lo, lo + rng.randint(0, 30_000))
        return AnnotationFilter(kinds=kinds, authors=authors,
                                time_range=time_range,
                                text_query=rng.choice(query_pool))

    for seed in range(50):
        rng = random.Random(seed)
        run = random_run(rng, n=30, instance=rng.choice(author_pool))
        f1 = random_filter(rng)
        f2 = random_filter(rng)
        sequential = [a for a in filter_annotations(run, f1) if f2.matches(a)]
        composed = filter_annotations(run, f1.intersect(f2))
        assert sequential == composed, f"seed {seed}"


# --- summaries -----------------------------------------------------------------

def test_summary_stats_match_live_stats():
    session, run = _tagged_run()
    summary = summarize(run)
    assert summary.stats == session.live_stats(run)
    assert summary.stats.accuracy == Fraction(9, 10)
    assert ("causing neck pain" in dict(summary.notes).values()) or \
           any(n == "causing neck pain" for _, n in summary.notes)


def test_summary_of_empty_run():
    session = Session(make_config(), instance_id="desk-1")
    run = session.start_pilot("P1", "S1", 600_000, now=T0)
    session.stop_pilot(run, T0 + 1000)
    summary = summarize(run)
    assert summary.stats.correct == summary.stats.incorrect == 0
    assert summary.stats.accuracy is None
    assert summary.screenshots == ()


def test_compare_accuracy_delta():
    # oracle: subtraction of the two tallies, 9/10 - 7/10 = 0.2
    session_a, run_a = _tagged_run()
    session_b = Session(make_config(), instance_id="desk-1",
                        id_factory=seeded_uuid_factory(9))
    run_b = session_b.start_pilot("P1", "S2", 600_000, now=T0)
    for i in range(7):
        session_b.record_annotation(run_b, kind=CORRECT, event_time=T0 + i + 1)
    for i in range(3):
        session_b.record_annotation(run_b, kind=INCORRECT, event_time=T0 + 100 + i)
    session_b.stop_pilot(run_b, T0 + 60_000)

    cmp = compare([run_a, run_b])
    assert cmp.deltas[0].accuracy_delta == Fraction(9, 10) - Fraction(7, 10) \
           == Fraction(1, 5)


def test_compare_single_run_degenerate():
    _, run = _tagged_run()
    cmp = compare([run])
    assert len(cmp.summaries) == 1
    assert cmp.deltas == ()


def test_compare_empty_list_rejected():
    with pytest.raises(EmptyRunList):
        compare([])


# --- retrospective notes ----------------------------------------------------------

def test_retro_note_boundaries(tmp_path):
    engine, session, run = recorded_session(tmp_path)
    session.stop_pilot(run, T0 + 4000)
    duration = run.archive_duration_ms
    start_note = add_retro_note(session, run, 0, "baseline check")
    end_note = add_retro_note(session, run, duration, "wrap up")
    assert start_note.media_offset == 0
    assert start_note.origin == Origin.RETROSPECTIVE
    assert start_note.kind == NOTE
    assert end_note.media_offset == duration
    with pytest.raises(OffsetOutOfRange):
        add_retro_note(session, run, duration + 1, "too late")


def test_retro_note_wall_time_anchored(tmp_path):
    engine, session, run = recorded_session(tmp_path)
    session.stop_pilot(run, T0 + 4000)
    archive = session.archive_for(run)
    note = add_retro_note(session, run, 1500, "mid")
    assert note.wall_time == archive.start_wall + 1500
