"""Operator entry points: serve, sim, export, merge, version.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration
error. All machine-readable output is one JSON document with sorted keys.
"""
from __future__ import annotations

import json
import signal
import socket
import sys
import threading
import time
import uuid
from pathlib import Path
from typing import Optional

import click

from . import __version__
from .errors import BadConfig, BadHeader, HarnessError, UnknownRun
from .export import export_csv, export_report
from .media import MediaEngine
from .model import Role
from .server import AppState, create_app, now_ms
from .session import Session, stats_to_dict
from .simulator import (
    SimScript,
    default_session_doc,
    scripted_run,
    seeded_uuid_factory,
)
from .storage import (
    Storage,
    config_from_dict,
    load_config_file,
    register_config_triggers,
)
from .sync import ClockOffset, MsgType, SyncClient, SyncListener, merge_runs
from .model import annotation_from_dict


def _echo_json(doc: dict) -> None:
    click.echo(json.dumps(doc, sort_keys=True))


def _fail(message: str, code: int):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


@click.group()
def main():
    """Wizard-of-Oz pilot study harness."""


@main.command()
def version():
    _echo_json({"version": __version__})


@main.command()
@click.option("--port", default=8080, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--data-dir", envvar="HARNESS_DATA_DIR", default="./harness-data",
              show_default=True, type=click.Path(path_type=Path))
@click.option("--session", "session_file", type=click.Path(path_type=Path),
              help="Session config JSON; served instances usually want one.")
@click.option("--role", type=click.Choice([r.value for r in Role]),
              help="Overrides the role in the session config.")
@click.option("--instance-id", default=None)
@click.option("--token", default=None, help="Shared bearer token for the API.")
@click.option("--sync-port", default=0, show_default="ephemeral",
              help="Wizard: TCP port for observer connections.")
@click.option("--peer", default=None, help="Observer: wizard host:port to join.")
@click.option("--static-dir", type=click.Path(path_type=Path), default=None,
              help="Console bundle to serve at / (e.g. frontend/dist).")
@click.option("--log-level", default="warning", show_default=True)
def serve(port, host, data_dir, session_file, role, instance_id, token,
          sync_port, peer, static_dir, log_level):
    """Run the HTTP API plus the wizard/observer sync endpoint."""
    import uvicorn

    try:
        http_sock = socket.create_server((host, port))
    except OSError as exc:
        _fail(f"port in use: {host}:{port} ({exc})", 2)

    instance_id = instance_id or f"{socket.gethostname()}-{port}"
    state = AppState(Path(data_dir), instance_id=instance_id, token=token)
    session = None
    session_id: Optional[uuid.UUID] = None
    doc = None
    if session_file is not None:
        try:
            _, doc = load_config_file(session_file)
            if role:
                doc["role"] = role
            session_id, session = state.create_session(doc)
        except HarnessError as exc:
            http_sock.close()
            _fail(str(exc), 2)

    listener = None
    client = None
    sync_address = None
    if session is not None and session.config.role == Role.WIZARD:
        listener = SyncListener(
            session, now_ms, str(session_id), host=host, port=sync_port,
            on_gap=lambda sender, lo, hi: state.bus.publish(
                "gap_warning", None,
                {"sender": sender, "from_seq": lo, "to_seq": hi}),
        )
        listener.start()
        sync_address = f"{listener.address[0]}:{listener.address[1]}"

        def relay(ann_dict: dict) -> None:
            listener.broadcast(MsgType.ANNOTATION, {"annotation": ann_dict})

        state.relay_annotation = relay

        def sink(event_type, run_id, data):
            state._event_sink(event_type, run_id, data)
            if event_type in ("run_started", "run_stopped"):
                run = session.runs.get(run_id)
                if run is not None:
                    listener.broadcast(MsgType.PHASE_CHANGE, {
                        "action": event_type,
                        "run_id": str(run_id),
                        "participant_id": run.participant_id,
                        "session_label": run.session_label,
                        "anticipated_duration_ms": run.anticipated_duration_ms,
                        "start_time": run.start_time,
                        "stop_time": run.stop_time,
                        "anchor_wall": run.anchor_wall,
                        "archive_duration_ms": run.archive_duration_ms,
                    })
            elif event_type == "stats":
                listener.broadcast(MsgType.STATS_DIGEST, {
                    "run_id": str(run_id), "stats": data,
                })

        session.event_sink = sink
    elif session is not None and session.config.role == Role.OBSERVER and peer:
        peer_host, _, peer_port = peer.partition(":")
        try:
            client = SyncClient(
                session, now_ms, doc.get("session_id", ""),
                peer_host, int(peer_port),
                on_gap=lambda sender, lo, hi: state.bus.publish(
                    "gap_warning", None,
                    {"sender": sender, "from_seq": lo, "to_seq": hi}),
                on_stats=lambda body: state.bus.publish(
                    "peer_stats", None, body),
            )
        except Exception as exc:
            http_sock.close()
            _fail(f"cannot join wizard at {peer}: {exc}", 2)
        state.authority_offset_ms = client.offset.offset_ms
        client.start()

        def relay_up(ann_dict: dict) -> None:
            ann = annotation_from_dict(ann_dict)
            if ann.author.instance_id == session.instance_id:
                client.send_annotation(ann)

        state.relay_annotation = relay_up

    app = create_app(state, static_dir=static_dir)
    config = uvicorn.Config(app, log_level=log_level, access_log=False)
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run,
                              kwargs={"sockets": [http_sock]}, daemon=True)
    thread.start()
    deadline = time.time() + 15
    while not server.started and thread.is_alive():
        if time.time() > deadline:
            _fail("server failed to start", 2)
        time.sleep(0.02)
    if not thread.is_alive():
        _fail("server failed to start", 2)

    _echo_json({
        "http": f"{host}:{http_sock.getsockname()[1]}",
        "sync": sync_address,
        "instance_id": instance_id,
        "session_id": str(session_id) if session_id else None,
        "data_dir": str(Path(data_dir).resolve()),
    })

    stop = threading.Event()

    def handle_signal(signum, frame):
        stop.set()

    signal.signal(signal.SIGINT, handle_signal)
    signal.signal(signal.SIGTERM, handle_signal)
    try:
        while thread.is_alive() and not stop.is_set():
            time.sleep(0.2)
    finally:
        server.should_exit = True
        if listener is not None:
            listener.close()
        if client is not None:
            client.close()
        thread.join(timeout=10)


@main.command()
@click.option("--script", "script_path", required=True,
              type=click.Path(path_type=Path))
@click.option("--session", "session_file", type=click.Path(path_type=Path),
              help="Session config JSON; defaults to the built-in sim setup.")
@click.option("--data-dir", envvar="HARNESS_DATA_DIR", default="./harness-data",
              show_default=True, type=click.Path(path_type=Path))
def sim(script_path, session_file, data_dir):
    """Run a scripted pilot end-to-end and verify tallies against the script."""
    try:
        script = SimScript.load(script_path)
        if session_file is not None:
            _, doc = load_config_file(session_file)
        else:
            doc = default_session_doc()
        config = config_from_dict(doc)
        storage = Storage(Path(data_dir))
        engine = MediaEngine(storage.archives_dir)
        session = Session(config, instance_id="sim-cli", media=engine,
                          id_factory=seeded_uuid_factory(script.seed),
                          event_sink=None)
        register_config_triggers(session, doc)
        for item in config.checklist:
            item.checked = True  # the simulator is its own pre-flight check
        report = scripted_run(script, session)
    except (BadConfig, HarnessError) as exc:
        _fail(str(exc), 2)

    run = session.runs[uuid.UUID(report.run_id)]
    storage.save_run(run)
    _echo_json(report.to_dict())
    if not report.matches:
        click.echo(f"tally mismatch: {json.dumps(report.diff(), sort_keys=True)}",
                   err=True)
        sys.exit(1)


@main.command()
@click.argument("run_id")
@click.option("--format", "fmt", type=click.Choice(["csv", "html"]), default="csv",
              show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path(path_type=Path))
@click.option("--data-dir", envvar="HARNESS_DATA_DIR", default="./harness-data",
              show_default=True, type=click.Path(path_type=Path))
@click.option("--convert-template", default=None,
              help="External converter, e.g. 'wkhtmltopdf {input} {output}'.")
@click.option("--convert-output", type=click.Path(path_type=Path), default=None,
              help="Target path for the converted document.")
def export(run_id, fmt, out_path, data_dir, convert_template, convert_output):
    """Write a stored run as canonical CSV or a self-contained HTML report."""
    from .export import run_conversion

    storage = Storage(Path(data_dir))
    try:
        run = storage.load_run(run_id)
    except UnknownRun:
        _fail(f"unknown run: {run_id}", 2)
    if fmt == "csv":
        content = export_csv(run)
    else:
        archive = storage.archive_for_run(run)
        resolve = None
        if archive is not None:
            from .media import render_image

            def resolve(ref):
                try:
                    frame = archive.frame_by_seq(ref.stream_id, ref.seq)
                except HarnessError:
                    return None
                return render_image(frame, ref.region)

        content = export_report(run, resolve=resolve)
    Path(out_path).write_text(content, newline="")
    converted = None
    if convert_template:
        if convert_output is None:
            _fail("--convert-template needs --convert-output", 2)
        try:
            result = run_conversion(convert_template,
                                    input=str(out_path), output=str(convert_output))
        except (KeyError, ValueError) as exc:
            _fail(f"bad converter template: {exc}", 2)
        if result.returncode != 0:
            click.echo(result.stderr, err=True)
            _fail(f"converter exited {result.returncode}", 1)
        converted = str(convert_output)
    _echo_json({"run_id": run_id, "format": fmt, "out": str(out_path),
                "bytes": len(content.encode("utf-8")), "converted": converted})


@main.command()
@click.argument("run_id")
@click.option("--stream", default="fpv", show_default=True)
@click.option("--out-dir", type=click.Path(path_type=Path), required=True,
              help="Frames land at {out-dir}/frames/{stream}/{seq:06}.jpg, the "
                   "same layout the CSV data column references.")
@click.option("--data-dir", envvar="HARNESS_DATA_DIR", default="./harness-data",
              show_default=True, type=click.Path(path_type=Path))
@click.option("--encode-template", default=None,
              help="External encoder, e.g. "
                   "'ffmpeg -framerate {fps} -i {frames_dir}/%06d.jpg {output}'.")
@click.option("--output", "encode_output", type=click.Path(path_type=Path),
              default=None, help="Target path for the encoded video.")
def frames(run_id, stream, out_dir, data_dir, encode_template, encode_output):
    """Dump a run's archived frames to disk, optionally piping them through
    an external encoder."""
    from .export import run_conversion

    storage = Storage(Path(data_dir))
    try:
        run = storage.load_run(run_id)
    except UnknownRun:
        _fail(f"unknown run: {run_id}", 2)
    archive = storage.archive_for_run(run)
    if archive is None:
        _fail(f"run {run_id} has no archive", 2)
    frames_dir = Path(out_dir) / "frames" / stream
    frames_dir.mkdir(parents=True, exist_ok=True)
    count = 0
    fps = 0.0
    capture_times: list[int] = []
    for frame in archive.iter_frames(stream):
        suffix = "jpg" if frame.encoding.value == "jpeg" else "rgb"
        (frames_dir / f"{frame.seq:06d}.{suffix}").write_bytes(frame.data)
        capture_times.append(frame.capture_time)
        count += 1
    if count == 0:
        _fail(f"archive has no {stream!r} frames", 2)
    span = capture_times[-1] - capture_times[0]
    if span > 0 and count > 1:
        fps = 1000.0 * (count - 1) / span
    encoded = None
    if encode_template:
        if encode_output is None:
            _fail("--encode-template needs --output", 2)
        try:
            result = run_conversion(encode_template, frames_dir=str(frames_dir),
                                    fps=f"{fps:.3f}", output=str(encode_output))
        except (KeyError, ValueError) as exc:
            _fail(f"bad encoder template: {exc}", 2)
        if result.returncode != 0:
            click.echo(result.stderr, err=True)
            _fail(f"encoder exited {result.returncode}", 1)
        encoded = str(encode_output)
    _echo_json({"run_id": run_id, "stream": stream, "frames": count,
                "fps": round(fps, 3), "dir": str(frames_dir), "encoded": encoded})


@main.command()
@click.option("--run", "run_id", required=True)
@click.option("--remote-csv", required=True, type=click.Path(path_type=Path))
@click.option("--offset-ms", default=0.0, show_default=True,
              help="Remote clock minus local clock; remote times are shifted back.")
@click.option("--out", "out_path", type=click.Path(path_type=Path), default=None)
@click.option("--data-dir", envvar="HARNESS_DATA_DIR", default="./harness-data",
              show_default=True, type=click.Path(path_type=Path))
def merge(run_id, remote_csv, offset_ms, out_path, data_dir):
    """Union a stored run with a peer's exported CSV."""
    from .export import import_csv

    storage = Storage(Path(data_dir))
    try:
        run = storage.load_run(run_id)
        remote_doc = Path(remote_csv).read_text()
        remote = import_csv(remote_doc, run_id=run.id)
    except UnknownRun:
        _fail(f"unknown run: {run_id}", 2)
    except (OSError, BadHeader) as exc:
        _fail(str(exc), 2)
    except HarnessError as exc:
        _fail(str(exc), 2)

    merged = merge_runs(run, remote, ClockOffset(offset_ms, 0.0, 0))
    storage.save_run(merged)
    if out_path is not None:
        Path(out_path).write_text(export_csv(merged), newline="")
    _echo_json({
        "run_id": str(merged.id),
        "local_annotations": len(run.annotations),
        "remote_annotations": len(remote),
        "merged_annotations": len(merged.annotations),
        "stats": stats_to_dict(merged.live_stats()),
        "out": str(out_path) if out_path else None,
    })


if __name__ == "__main__":
    main()
