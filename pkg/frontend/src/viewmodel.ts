// The console holds no authoritative state: everything on screen derives
// from REST reads plus the ordered event feed. Reloading mid-pilot and
// rebuilding from the server must produce the same view model.

import type { Annotation, LiveStats, Phase, ServerEvent } from "./types.js";

export interface AnnotationRow {
  id: string;
  wallTime: number;
  mediaOffset: number | null;
  kind: string;
  functionName: string;
  color: string;
  note: string;
  author: string;
  origin: string;
  thumbnailSeq: number | null; // archive frame for screenshot rows
  pending: boolean; // optimistic row awaiting the server echo
}

export interface ViewModel {
  phase: Phase;
  runId: string | null;
  startTime: number | null;
  anticipatedMs: number;
  stats: LiveStats;
  rows: AnnotationRow[];
  elapsedNotified: boolean;
  lastEventSeq: number;
  connected: boolean;
}

export const EMPTY_STATS: LiveStats = {
  correct: 0,
  incorrect: 0,
  counter_total: 0,
  accuracy: null,
  pinned_counts: {},
};

export function emptyViewModel(): ViewModel {
  return {
    phase: "setup",
    runId: null,
    startTime: null,
    anticipatedMs: 0,
    stats: EMPTY_STATS,
    rows: [],
    elapsedNotified: false,
    lastEventSeq: 0,
    connected: false,
  };
}

export function annotationToRow(a: Annotation, pending = false): AnnotationRow {
  return {
    id: a.id,
    wallTime: a.wall_time,
    mediaOffset: a.media_offset,
    kind: a.kind,
    functionName: a.function,
    color: a.color,
    note: a.note,
    author: a.author,
    origin: a.origin,
    thumbnailSeq: a.payload.type === "image" ? a.payload.seq ?? null : null,
    pending,
  };
}

function sortRows(rows: AnnotationRow[]): AnnotationRow[] {
  return rows.sort((x, y) =>
    x.wallTime - y.wallTime
    || x.author.localeCompare(y.author)
    || x.id.localeCompare(y.id));
}

/** Apply one server event; returns a new model (inputs stay untouched). */
export function applyEvent(model: ViewModel, event: ServerEvent): ViewModel {
  const next: ViewModel = { ...model, rows: [...model.rows] };
  if (event.seq <= model.lastEventSeq) return model; // replay, already seen
  next.lastEventSeq = event.seq;
  const data = event.data as Record<string, any>;
  switch (event.type) {
    case "run_started":
      next.phase = "pilot";
      next.runId = event.run_id;
      next.startTime = data.start_time as number;
      next.rows = [];
      next.stats = EMPTY_STATS;
      next.elapsedNotified = false;
      break;
    case "run_stopped":
      next.phase = "analyzer";
      break;
    case "phase_change":
      next.phase = data.phase as Phase;
      break;
    case "annotation": {
      const row = annotationToRow(data as Annotation);
      const existing = next.rows.findIndex((r) => r.id === row.id);
      if (existing >= 0) next.rows[existing] = row; // server echo clears pending
      else next.rows.push(row);
      sortRows(next.rows);
      break;
    }
    case "annotation_edited": {
      const idx = next.rows.findIndex((r) => r.id === data.annotation_id);
      if (idx >= 0) {
        const row = { ...next.rows[idx] };
        const changes = data.changes as Record<string, [unknown, unknown]>;
        if (changes.note) row.note = changes.note[1] as string;
        if (changes.wall_time) row.wallTime = changes.wall_time[1] as number;
        if (changes.media_offset) row.mediaOffset = changes.media_offset[1] as number;
        if (changes.kind) row.kind = changes.kind[1] as string;
        next.rows[idx] = row;
        sortRows(next.rows);
      }
      break;
    }
    case "stats":
      next.stats = data as LiveStats;
      break;
    case "anticipated_elapsed":
      next.elapsedNotified = true;
      break;
    default:
      break;
  }
  return next;
}

/** Add an optimistic row for a locally fired key, pending the server echo. */
export function addPending(model: ViewModel, row: AnnotationRow): ViewModel {
  if (model.rows.some((r) => r.id === row.id)) return model;
  const rows = sortRows([...model.rows, { ...row, pending: true }]);
  return { ...model, rows };
}

/** Rebuild the whole model from REST reads (what a reload does). */
export function buildFromServer(args: {
  phase: Phase;
  runId: string | null;
  startTime: number | null;
  anticipatedMs: number;
  annotations: Annotation[];
  stats: LiveStats;
  elapsedNotified: boolean;
  lastEventSeq: number;
}): ViewModel {
  return {
    phase: args.phase,
    runId: args.runId,
    startTime: args.startTime,
    anticipatedMs: args.anticipatedMs,
    stats: args.stats,
    rows: sortRows(args.annotations.map((a) => annotationToRow(a))),
    elapsedNotified: args.elapsedNotified,
    lastEventSeq: args.lastEventSeq,
    connected: false,
  };
}

/** Progress toward the anticipated duration, clamped to [0, 1]. */
export function progressFraction(model: ViewModel, nowMs: number): number {
  if (model.startTime === null || model.anticipatedMs <= 0) return 0;
  const fraction = (nowMs - model.startTime) / model.anticipatedMs;
  return Math.min(1, Math.max(0, fraction));
}

export function accuracyLabel(stats: LiveStats): string {
  if (stats.accuracy === null) return "—";
  const pct = Math.round(parseFloat(stats.accuracy) * 100);
  return `${pct}%`;
}
