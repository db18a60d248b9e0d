"""End-to-end multi-experimenter flow: two served instances over HTTP + TCP.

The wizard serves with a sync listener; the observer joins with --peer.
Annotations relay live in both directions, the observer mirrors run
lifecycle, and the post-pilot merge makes both CSV exports byte-identical.
"""
import json
import socket
import subprocess
import sys
import time
from pathlib import Path

import httpx

from pilot_harness.simulator import SimScript, default_session_doc, pattern_stream
from pilot_harness.storage import Storage


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def wait_until(predicate, timeout=10.0, interval=0.05, message="condition"):
    deadline = time.time() + timeout
    while time.time() < deadline:
        if predicate():
            return
        time.sleep(interval)
    raise AssertionError(f"timed out waiting for {message}")


def serve(args, tmp_path, name):
    proc = subprocess.Popen(
        [sys.executable, "-m", "pilot_harness.cli", "serve", *args],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
        cwd=tmp_path,
    )
    line = proc.stdout.readline().strip()
    if not line:
        raise AssertionError(f"{name} failed: {proc.stderr.read()[:2000]}")
    return proc, json.loads(line)


def push_frames(client, stream_id, frames):
    boundary = "e2e"
    body = b""
    for f in frames:
        body += (f"--{boundary}\r\nContent-Type: image/jpeg\r\n"
                 f"X-Seq: {f.seq}\r\nX-Capture-Time: {f.capture_time}\r\n"
                 f"X-Width: {f.width}\r\nX-Height: {f.height}\r\n\r\n"
                 ).encode() + f.data + b"\r\n"
    body += f"--{boundary}--\r\n".encode()
    resp = client.post(f"/ingest/{stream_id}", content=body, headers={
        "content-type": f"multipart/x-mixed-replace; boundary={boundary}"})
    assert resp.status_code == 200, resp.text


def test_wizard_observer_live_relay_and_merge(tmp_path):
    wiz_doc = default_session_doc()
    wiz_doc["role"] = "wizard"
    (tmp_path / "wiz.json").write_text(json.dumps(wiz_doc))
    obs_doc = default_session_doc()
    obs_doc["role"] = "observer"
    (tmp_path / "obs.json").write_text(json.dumps(obs_doc))

    wiz_port, obs_port, sync_port = free_port(), free_port(), free_port()
    wiz_proc = obs_proc = None
    try:
        wiz_proc, wiz_info = serve(
            ["--port", str(wiz_port), "--sync-port", str(sync_port),
             "--session", "wiz.json", "--data-dir", "dw",
             "--instance-id", "wiz-1"], tmp_path, "wizard")
        assert wiz_info["sync"].endswith(str(sync_port))

        obs_proc, obs_info = serve(
            ["--port", str(obs_port), "--session", "obs.json",
             "--data-dir", "do", "--peer", f"127.0.0.1:{sync_port}",
             "--instance-id", "obs-1"], tmp_path, "observer")

        wiz = httpx.Client(base_url=f"http://127.0.0.1:{wiz_port}", timeout=10)
        obs = httpx.Client(base_url=f"http://127.0.0.1:{obs_port}", timeout=10)

        now = int(time.time() * 1000)
        script = SimScript(seed=3, fps=15.0, duration_ms=2_000)
        for stream in ("fpv", "tpv"):
            push_frames(wiz, stream, list(pattern_stream(
                script, stream, base_epoch=now - 2_000)))

        session_id = wiz_info["session_id"]
        started = wiz.post(f"/sessions/{session_id}/start", json={
            "participant_id": "P1", "session_label": "live",
            "anticipated_duration_ms": 60_000,
        })
        assert started.status_code == 201, started.text
        run_id = started.json()["run"]["id"]

        # streams keep flowing after start so the archive anchors
        from dataclasses import replace
        for stream in ("fpv", "tpv"):
            frames = [replace(f, seq=f.seq + 1000)
                      for f in pattern_stream(script, stream, base_epoch=now)]
            push_frames(wiz, stream, frames)

        # observer mirrors the run via PhaseChange
        wait_until(lambda: obs.get(f"/runs/{run_id}/stats").status_code == 200,
                   message="observer run mirror")

        # wizard-side annotation relays down to the observer
        assert wiz.post(f"/runs/{run_id}/annotations",
                        json={"key": "1"}).status_code == 201
        wait_until(lambda: obs.get(f"/runs/{run_id}/stats").json()["correct"] == 1,
                   message="wizard annotation at observer")

        # observer-side annotation relays up to the wizard
        assert obs.post(f"/runs/{run_id}/annotations",
                        json={"key": "2"}).status_code == 201
        wait_until(lambda: wiz.get(f"/runs/{run_id}/stats").json()["incorrect"] == 1,
                   message="observer annotation at wizard")

        stopped = wiz.post(f"/runs/{run_id}/stop", json={})
        assert stopped.status_code == 200
        wait_until(lambda: Storage(tmp_path / "do").runs_dir
                   .joinpath(f"{run_id}.json").exists(),
                   message="observer persisted the mirrored run")

        wiz_csv = wiz.get(f"/runs/{run_id}/export.csv")
        obs_csv = obs.get(f"/runs/{run_id}/export.csv")
        assert wiz_csv.status_code == obs_csv.status_code == 200
        (tmp_path / "wiz.csv").write_bytes(wiz_csv.content)
        (tmp_path / "obs.csv").write_bytes(obs_csv.content)

        wiz.close()
        obs.close()
    finally:
        for proc in (wiz_proc, obs_proc):
            if proc is not None:
                proc.terminate()
                proc.wait(timeout=10)

    # post-pilot merge on both sides -> byte-identical canonical exports
    def run_cli(data_dir, remote_csv, out):
        return subprocess.run(
            [sys.executable, "-m", "pilot_harness.cli", "merge",
             "--run", run_id, "--remote-csv", remote_csv,
             "--out", out, "--data-dir", data_dir],
            cwd=tmp_path, capture_output=True, text=True)

    merged_w = run_cli("dw", "obs.csv", "merged_w.csv")
    assert merged_w.returncode == 0, merged_w.stderr
    merged_o = run_cli("do", "wiz.csv", "merged_o.csv")
    assert merged_o.returncode == 0, merged_o.stderr
    assert (tmp_path / "merged_w.csv").read_bytes() == \
           (tmp_path / "merged_o.csv").read_bytes()
    summary = json.loads(merged_w.stdout.splitlines()[0])
    assert summary["stats"]["correct"] == 1
    assert summary["stats"]["incorrect"] == 1
    assert summary["stats"]["accuracy"] == "0.5000"
