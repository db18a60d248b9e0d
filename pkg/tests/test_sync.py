import random
import uuid

import pytest

from pilot_harness.errors import MalformedFrame, NoSamples, RunIdMismatch, UnknownMsgType
from pilot_harness.model import CORRECT, Annotation, Author, Origin, Role, annotation_to_dict
from pilot_harness.simulator import LatencyModel, simulate_link
from pilot_harness.sync import (
    ClockOffset,
    FrameAssembler,
    MsgType,
    PingSample,
    SequenceTracker,
    SyncEnvelope,
    ZERO_OFFSET,
    apply_remote,
    decode_envelope,
    encode_envelope,
    estimate_offset,
    merge_runs,
)

from conftest import T0, make_config
from genlog import random_run
from pilot_harness.session import Session


# --- codec ---------------------------------------------------------------------

def envelope(**kw) -> SyncEnvelope:
    defaults = dict(msg_type=MsgType.PING, sender="wiz-1", seq=1,
                    sent_at=T0, body={"t1": T0})
    defaults.update(kw)
    return SyncEnvelope(**defaults)


def test_codec_identity():
    env = envelope(body={"nested": {"deep": [1, 2, 3]}, "text": "déjà ✓"})
    assert decode_envelope(encode_envelope(env)) == env


def test_codec_byte_exact_roundtrip():
    env = envelope(msg_type=MsgType.ANNOTATION, body={"b": 1, "a": 2})
    once = encode_envelope(env)
    assert encode_envelope(decode_envelope(once)) == once


def test_truncated_length_prefix():
    with pytest.raises(MalformedFrame):
        decode_envelope(b"\x00\x00")


def test_truncated_body():
    blob = encode_envelope(envelope())
    with pytest.raises(MalformedFrame):
        decode_envelope(blob[:-3])


def test_unknown_msg_type():
    import json
    import struct
    doc = json.dumps({"msg_type": "Dance", "sender": "x", "seq": 1,
                      "sent_at": 0, "body": {}}).encode()
    with pytest.raises(UnknownMsgType):
        decode_envelope(struct.pack(">I", len(doc)) + doc)


def test_assembler_reassembles_fragmented_frames():
    envs = [envelope(seq=i) for i in range(1, 6)]
    blob = b"".join(encode_envelope(e) for e in envs)
    assembler = FrameAssembler()
    out = []
    for i in range(0, len(blob), 7):  # drip-feed in awkward chunks
        out.extend(assembler.feed(blob[i : i + 7]))
    assert out == envs
    assert assembler.pending_bytes == 0


# --- offset estimation ------------------------------------------------------------

def test_known_sample_offset_and_rtt():
    # oracle: substitute into the formulas by hand:
    #   offset = ((t2-t1)+(t3-t4))/2 = ((100-0)+(110-90))/2 = 60
    #   rtt    = (t4-t1)-(t3-t2)     = (90-0)-(110-100)     = 80
    sample = PingSample(t1=0, t2=100, t3=110, t4=90)
    est = estimate_offset([sample])
    assert est.offset_ms == 60
    assert est.rtt_ms == 80
    assert est.sample_count == 1


def test_zero_everything():
    est = estimate_offset([PingSample(0, 0, 0, 0)])
    assert est.offset_ms == 0
    assert est.rtt_ms == 0


def test_min_rtt_sample_wins():
    slow = PingSample(t1=0, t2=140, t3=140, t4=80)   # rtt 80, offset 100
    fast = PingSample(t1=1000, t2=1070, t3=1070, t4=1020)  # rtt 20, offset 60
    est = estimate_offset([slow, fast])
    assert est.rtt_ms == 20
    assert est.offset_ms == 60
    assert est.sample_count == 2


def test_no_samples():
    with pytest.raises(NoSamples):
        estimate_offset([])


def test_simulated_link_symmetric_latency_recovers_skew_exactly():
    for skew in (-500, 0, 60, 1000):
        for seed in range(20):
            link = simulate_link(LatencyModel(mean_ms=20, jitter_ms=8), skew, seed)
            est = estimate_offset(link.ping_samples(10))
            assert est.offset_ms == skew, (skew, seed)


def test_simulated_link_asymmetry_error_bound():
    # NTP bound: |error| <= asymmetry/2 when only one direction carries the bias
    for asym in (10, 30, 101):
        for seed in range(20):
            link = simulate_link(
                LatencyModel(mean_ms=15, jitter_ms=5, asymmetry_ms=asym), 60, seed)
            est = estimate_offset(link.ping_samples(10))
            assert abs(est.offset_ms - 60) <= asym / 2, (asym, seed)


# --- apply_remote -------------------------------------------------------------------

def remote_envelope(ann: Annotation, seq=1) -> SyncEnvelope:
    return SyncEnvelope(MsgType.ANNOTATION, ann.author.instance_id, seq, ann.wall_time,
                        {"annotation": annotation_to_dict(ann)})


def make_live_run():
    session = Session(make_config(), instance_id="wiz-1")
    run = session.start_pilot("P1", "S1", 600_000, now=T0)
    return session, run


def observer_annotation(run_id, wall, note="obs"):
    return Annotation(
        id=uuid.uuid4(), run_id=run_id,
        author=Author(Role.OBSERVER, "obs-1"),
        kind=CORRECT, function_name="correct", color="#00AA00",
        wall_time=wall, media_offset=None, payload=__import__(
            "pilot_harness.model", fromlist=["EMPTY"]).EMPTY,
        note=note, origin=Origin.LIVE,
    )


def test_apply_remote_normalizes_clock():
    session, run = make_live_run()
    ann = observer_annotation(run.id, wall=T0 + 1000)
    stored = apply_remote(session, run, remote_envelope(ann),
                          ClockOffset(offset_ms=50, rtt_ms=10, sample_count=3))
    assert stored.wall_time == T0 + 950
    assert stored.origin == Origin.REMOTE
    assert stored.author.instance_id == "obs-1"


def test_apply_remote_zero_offset_identity():
    session, run = make_live_run()
    ann = observer_annotation(run.id, wall=T0 + 1234)
    stored = apply_remote(session, run, remote_envelope(ann), ZERO_OFFSET)
    assert stored.wall_time == T0 + 1234


def test_apply_remote_duplicate_delivery_is_noop():
    session, run = make_live_run()
    ann = observer_annotation(run.id, wall=T0 + 500)
    first = apply_remote(session, run, remote_envelope(ann), ZERO_OFFSET)
    second = apply_remote(session, run, remote_envelope(ann, seq=2), ZERO_OFFSET)
    assert first is second
    assert len(run.annotations) == 1


def test_apply_remote_run_mismatch():
    session, run = make_live_run()
    ann = observer_annotation(uuid.uuid4(), wall=T0 + 500)
    with pytest.raises(RunIdMismatch):
        apply_remote(session, run, remote_envelope(ann), ZERO_OFFSET)


# --- merge ---------------------------------------------------------------------------

def test_merge_with_empty_is_identity():
    rng = random.Random(5)
    local = random_run(rng, n=12)
    merged = merge_runs(local, [])
    assert merged.snapshot() == local.snapshot()
    assert merged.live_stats() == local.live_stats()


def test_merge_orders_across_logs():
    rng = random.Random(6)
    local = random_run(rng, n=0)
    a = observer_annotation(local.id, wall=T0 + 5000)
    b = observer_annotation(local.id, wall=T0 + 7000)
    local.insert(a)
    merged = merge_runs(local, [b], ZERO_OFFSET)
    assert [x.id for x in merged.annotations] == [a.id, b.id]


def test_merge_normalizes_remote_times():
    rng = random.Random(7)
    local = random_run(rng, n=0)
    remote = observer_annotation(local.id, wall=T0 + 1000)
    merged = merge_runs(local, [remote], ClockOffset(50, 0, 1))
    assert merged.annotations[0].wall_time == T0 + 950
    assert merged.annotations[0].media_offset == 950


def test_merge_algebra_randomized():
    from pilot_harness.export import export_csv

    for seed in range(120):
        rng = random.Random(seed)
        run_id = uuid.UUID(int=rng.getrandbits(128), version=4)
        wiz = random_run(rng, run_id=run_id, instance="wiz-1", role=Role.WIZARD)
        obs = random_run(rng, run_id=run_id, instance="obs-1", role=Role.OBSERVER)

        ab = merge_runs(wiz, obs.annotations)
        ba = merge_runs(obs, wiz.annotations)

        # idempotent
        again = merge_runs(ab, obs.annotations)
        assert again.snapshot() == ab.snapshot(), f"seed {seed}"
        # commutative in content and order
        assert [a.id for a in ab.annotations] == [a.id for a in ba.annotations]
        # associative in content across three logs
        extra = random_run(rng, run_id=run_id, instance="obs-2", role=Role.OBSERVER)
        left = merge_runs(merge_runs(wiz, obs.annotations), extra.annotations)
        right = merge_runs(wiz, merge_runs(obs, extra.annotations).annotations)
        assert left.snapshot() == right.snapshot(), f"seed {seed}"
        # duplicate delivery introduces nothing
        dup = merge_runs(ab, list(obs.annotations) + list(obs.annotations))
        assert len(dup.annotations) == len(ab.annotations)
        # converged logs export byte-identically
        assert export_csv(ab) == export_csv(ba), f"seed {seed}"


def test_merge_requires_same_run_id():
    rng = random.Random(9)
    local = random_run(rng, n=3)
    foreign = random_run(rng, n=3)
    with pytest.raises(RunIdMismatch):
        merge_runs(local, foreign.annotations)


# --- lossy two-instance session converges after the final merge -------------------------

def test_wizard_and_observer_converge_after_lossy_session():
    from pilot_harness.export import export_csv
    from pilot_harness.model import Role
    from pilot_harness.simulator import LatencyModel, seeded_uuid_factory, simulate_link

    for seed in range(25):
        rng = random.Random(seed)
        link = simulate_link(LatencyModel(mean_ms=25, jitter_ms=10), skew_ms=60,
                             seed=seed)
        wiz_cfg = make_config()
        wiz_cfg.role = Role.WIZARD
        obs_cfg = make_config()
        obs_cfg.role = Role.OBSERVER
        wizard = Session(wiz_cfg, instance_id="wiz-1",
                         id_factory=seeded_uuid_factory(seed * 2 + 1))
        observer = Session(obs_cfg, instance_id="obs-1",
                           id_factory=seeded_uuid_factory(seed * 2 + 2))

        # the observer measures the authority clock before annotating
        offset = estimate_offset(link.ping_samples(10, requester_a=False))
        assert offset.offset_ms == -60  # authority minus observer

        start_auth = link.clock_a.now()
        run_w = wizard.start_pilot("P1", "S1", 60_000, now=start_auth)
        run_o = observer.adopt_run(run_w.id, "P1", "S1", 60_000,
                                   start_time=start_auth, anchor_wall=start_auth)

        for step in range(rng.randint(5, 30)):
            link.advance(rng.randint(50, 900))
            if rng.random() < 0.5:
                ann = wizard.record_by_key(run_w, rng.choice("124"),
                                           link.clock_a.now())
                env = remote_envelope(ann, seq=step)
                if rng.random() < 0.7:  # best-effort relay loses some
                    apply_remote(observer, run_o, env, ZERO_OFFSET)
                if rng.random() < 0.2:  # and duplicates others
                    apply_remote(observer, run_o, env, ZERO_OFFSET)
            else:
                local = link.clock_b.now()
                stamped = local + round(offset.offset_ms)  # authority coordinates
                ann = observer.record_by_key(run_o, rng.choice("124"), stamped)
                env = remote_envelope(ann, seq=step)
                if rng.random() < 0.7:
                    apply_remote(wizard, run_w, env, ZERO_OFFSET)
                if rng.random() < 0.2:
                    apply_remote(wizard, run_w, env, ZERO_OFFSET)

        link.advance(1000)
        stop_auth = link.clock_a.now()
        wizard.stop_pilot(run_w, stop_auth)
        observer.close_adopted_run(run_o, stop_auth)

        merged_w = merge_runs(run_w, run_o.annotations)
        merged_o = merge_runs(run_o, run_w.annotations)
        assert {a.id for a in merged_w.annotations} == \
               {a.id for a in merged_o.annotations}
        assert export_csv(merged_w) == export_csv(merged_o), f"seed {seed}"
        assert merged_w.live_stats() == merged_o.live_stats(), f"seed {seed}"


# --- live TCP transport -------------------------------------------------------------------

def test_tcp_listener_and_client_relay_annotations():
    import time as _time

    from pilot_harness.model import Role
    from pilot_harness.simulator import seeded_uuid_factory
    from pilot_harness.sync import SyncClient, SyncListener

    wiz_cfg = make_config()
    wiz_cfg.role = Role.WIZARD
    obs_cfg = make_config()
    obs_cfg.role = Role.OBSERVER
    clock = lambda: int(_time.time() * 1000)
    wizard = Session(wiz_cfg, instance_id="wiz-1",
                     id_factory=seeded_uuid_factory(71))
    observer = Session(obs_cfg, instance_id="obs-1",
                       id_factory=seeded_uuid_factory(72))

    listener = SyncListener(wizard, clock, session_id="sess-1")
    listener.start()
    try:
        digests = []
        client = SyncClient(observer, clock, "sess-1",
                            listener.address[0], listener.address[1],
                            ping_count=4, on_stats=digests.append)
        # same host, same clock: estimated offset must be tiny
        assert abs(client.offset.offset_ms) < 250
        client.start()

        now = clock()
        run_w = wizard.start_pilot("P1", "S1", 60_000, now=now)
        run_o = observer.adopt_run(run_w.id, "P1", "S1", 60_000,
                                   start_time=now, anchor_wall=now)

        ann = observer.record_by_key(run_o, "1", clock())
        client.send_annotation(ann)
        deadline = _time.time() + 5
        while _time.time() < deadline and len(run_w.annotations) == 0:
            _time.sleep(0.02)
        assert [a.id for a in run_w.annotations] == [ann.id]
        assert run_w.annotations[0].origin.value == "remote"

        from pilot_harness.session import stats_to_dict
        listener.broadcast(MsgType.STATS_DIGEST, {
            "run_id": str(run_w.id),
            "stats": stats_to_dict(run_w.live_stats()),
        })
        deadline = _time.time() + 5
        while _time.time() < deadline and not digests:
            _time.sleep(0.02)
        assert digests and digests[0]["stats"]["correct"] == 1
        client.close()
    finally:
        listener.close()


def test_tcp_version_mismatch_gets_bye():
    import socket as _socket
    import time as _time

    from pilot_harness.model import Role
    from pilot_harness.sync import (
        MsgType as MT,
        SyncConnection,
        SyncListener,
        hello_body,
    )

    cfg = make_config()
    cfg.role = Role.WIZARD
    wizard = Session(cfg, instance_id="wiz-1")
    clock = lambda: int(_time.time() * 1000)
    listener = SyncListener(wizard, clock, session_id="sess-1")
    listener.start()
    try:
        sock = _socket.create_connection(listener.address, timeout=5)
        conn = SyncConnection(sock, "intruder", clock)
        body = hello_body("intruder", "observer", "sess-1")
        body["protocol_version"] = 99
        conn.send(MT.HELLO, body)
        reply = conn.recv(timeout=5)
        assert reply is not None and reply.msg_type == MT.BYE
        assert "version" in reply.body["reason"]
        conn.close()
    finally:
        listener.close()


# --- sequence tracking -----------------------------------------------------------------

def test_gap_detection_and_duplicate_suppression():
    gaps = []
    tracker = SequenceTracker(on_gap=lambda sender, lo, hi: gaps.append((sender, lo, hi)))
    assert tracker.admit("obs-1", 1)
    assert tracker.admit("obs-1", 2)
    assert not tracker.admit("obs-1", 2)  # replay
    assert tracker.admit("obs-1", 5)  # gap 3..4
    assert not tracker.admit("obs-1", 4)  # late arrival inside the gap is dropped
    assert gaps == [("obs-1", 3, 4)]
