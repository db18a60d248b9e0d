// DTOs mirroring the harness HTTP API. The server is the single source of
// truth; the console never mutates these locally.

export type Phase = "setup" | "pilot" | "analyzer";
export type Role = "single_user" | "wizard" | "observer";

export interface StreamDescriptor {
  stream_id: string;
  source_url: string;
  expected_fps: number;
  credentials?: string | null;
}

export interface ShortcutBinding {
  key: string;
  kind: string; // "correct" | ... | "custom:<name>"
  name: string;
  color: string;
  pinned: boolean;
}

export interface ChecklistItem {
  text: string;
  checked: boolean;
}

export interface SessionConfig {
  session_name: string;
  role: Role;
  fpv_source: StreamDescriptor;
  tpv_source: StreamDescriptor | null;
  wizarding_url: string;
  checklist: ChecklistItem[];
  bindings: ShortcutBinding[];
  record_inputs: string[];
}

export interface SessionInfo {
  session_id: string;
  phase: Phase;
  config: SessionConfig;
  current_run: string | null;
}

export interface AnnotationPayload {
  type: "empty" | "image" | "count" | "transcript";
  stream_id?: string;
  seq?: number;
  region?: { x: number; y: number; w: number; h: number } | null;
  value?: number;
  text?: string;
  span_ms?: number;
}

export interface Annotation {
  id: string;
  run_id: string;
  author: string;
  kind: string;
  function: string;
  color: string;
  wall_time: number;
  media_offset: number | null;
  payload: AnnotationPayload;
  note: string;
  origin: "live" | "auto" | "retrospective" | "remote";
}

export interface RunInfo {
  id: string;
  participant_id: string;
  session_label: string;
  anticipated_duration_ms: number;
  start_time: number;
  stop_time: number | null;
  annotations: Annotation[];
}

export interface LiveStats {
  correct: number;
  incorrect: number;
  counter_total: number;
  accuracy: string | null; // decimal with 4 places, or null when undefined
  pinned_counts: Record<string, number>;
}

export interface TimelineMarker {
  media_offset: number;
  annotation_id: string;
  kind: string;
  color: string;
}

export interface Timeline {
  run_id: string;
  duration_ms: number;
  markers: TimelineMarker[];
}

export interface ServerEvent {
  seq: number;
  type: string;
  run_id: string | null;
  data: Record<string, unknown>;
  server_time: number;
}
