"""Flat-file persistence: one JSON document per session and run, archives
as frame containers. Everything under one data_dir, inspectable and diffable.

    {data_dir}/
        sessions/{session_id}.json
        runs/{run_id}.json
        archives/{archive_id}/...
"""
from __future__ import annotations

import json
import uuid
from pathlib import Path
from typing import Optional

from .errors import BadConfig, UnknownRun
from .media import RecordingArchive, StreamDescriptor
from .model import ChecklistItem, Role, binding_from_dict, binding_to_dict
from .session import PilotRun, Session, SessionConfig, TriggerKind, TriggerSource


def stream_to_dict(desc: StreamDescriptor) -> dict:
    out = {
        "stream_id": desc.stream_id,
        "source_url": desc.source_url,
        "expected_fps": desc.expected_fps,
    }
    if desc.credentials is not None:
        out["credentials"] = desc.credentials
    return out


def stream_from_dict(d: dict) -> StreamDescriptor:
    return StreamDescriptor(
        stream_id=d["stream_id"],
        source_url=d["source_url"],
        expected_fps=d["expected_fps"],
        credentials=d.get("credentials"),
    )


def config_to_dict(config: SessionConfig) -> dict:
    return {
        "session_name": config.session_name,
        "role": config.role.value,
        "fpv_source": stream_to_dict(config.fpv_source),
        "tpv_source": stream_to_dict(config.tpv_source) if config.tpv_source else None,
        "wizarding_url": config.wizarding_url,
        "checklist": [{"text": c.text, "checked": c.checked} for c in config.checklist],
        "bindings": [binding_to_dict(b) for b in config.bindings],
        "record_inputs": list(config.record_inputs),
    }


def config_from_dict(d: dict) -> SessionConfig:
    try:
        return SessionConfig(
            session_name=d["session_name"],
            role=Role(d.get("role", "single_user")),
            fpv_source=stream_from_dict(d["fpv_source"]),
            tpv_source=stream_from_dict(d["tpv_source"]) if d.get("tpv_source") else None,
            wizarding_url=d.get("wizarding_url", ""),
            checklist=[ChecklistItem(c["text"], bool(c.get("checked", False)))
                       for c in d.get("checklist", [])],
            bindings=[binding_from_dict(b) for b in d.get("bindings", [])],
            record_inputs=d.get("record_inputs"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise BadConfig(f"bad session config: {exc}") from exc


def parse_trigger_source(text: str) -> TriggerSource:
    kind, _, name = text.partition(":")
    try:
        return TriggerSource(TriggerKind(kind), name)
    except ValueError as exc:
        raise BadConfig(f"bad trigger source {text!r}") from exc


def register_config_triggers(session: Session, doc: dict) -> None:
    """Wire up the ``auto_triggers`` section of a session config document.

    Each entry names its emitter, which doubles as the source declaration:
    ``{"source": "wizard:slide_changed", "binding": {...}}``.
    """
    for entry in doc.get("auto_triggers", []):
        source = parse_trigger_source(entry["source"])
        session.declare_event_source(source)
        session.register_auto_trigger(source, binding_from_dict(entry["binding"]))


def load_config_file(path: Path) -> tuple[SessionConfig, dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise BadConfig(f"cannot read session config {path}: {exc}") from exc
    return config_from_dict(doc), doc


class Storage:
    def __init__(self, data_dir: Path):
        self.data_dir = Path(data_dir)
        self.sessions_dir = self.data_dir / "sessions"
        self.runs_dir = self.data_dir / "runs"
        self.archives_dir = self.data_dir / "archives"
        for d in (self.sessions_dir, self.runs_dir, self.archives_dir):
            d.mkdir(parents=True, exist_ok=True)

    # -- sessions --------------------------------------------------------------

    def save_session(self, session_id: uuid.UUID, config: SessionConfig,
                     extra: Optional[dict] = None) -> Path:
        doc = config_to_dict(config)
        doc["id"] = str(session_id)
        if extra:
            doc.update(extra)
        path = self.sessions_dir / f"{session_id}.json"
        path.write_text(json.dumps(doc, sort_keys=True, indent=2))
        return path

    # -- runs ------------------------------------------------------------------

    def save_run(self, run: PilotRun, session_id: Optional[uuid.UUID] = None) -> Path:
        doc = run.to_dict()
        if session_id is not None:
            doc["session_id"] = str(session_id)
        path = self.runs_dir / f"{run.id}.json"
        path.write_text(json.dumps(doc, sort_keys=True, indent=2))
        return path

    def load_run(self, run_id: uuid.UUID | str) -> PilotRun:
        path = self.runs_dir / f"{run_id}.json"
        if not path.exists():
            raise UnknownRun(str(run_id))
        return PilotRun.from_dict(json.loads(path.read_text()))

    def list_runs(self) -> list[str]:
        return sorted(p.stem for p in self.runs_dir.glob("*.json"))

    # -- archives ----------------------------------------------------------------

    def load_archive(self, archive_id: uuid.UUID | str) -> Optional[RecordingArchive]:
        path = self.archives_dir / str(archive_id)
        if not (path / "archive.json").exists():
            return None
        return RecordingArchive.load(path)

    def archive_for_run(self, run: PilotRun) -> Optional[RecordingArchive]:
        if run.archive_ref is None:
            return None
        return self.load_archive(run.archive_ref)
