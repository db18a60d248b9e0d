// Thin typed client over the harness HTTP API. Injectable fetch keeps the
// client unit-testable without a browser or server.

import type {
  Annotation,
  LiveStats,
  RunInfo,
  ServerEvent,
  SessionInfo,
  Timeline,
} from "./types.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export interface AnnotationResponse {
  annotation: Annotation;
  time_substituted: boolean;
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

export class HarnessApi {
  constructor(
    private base: string = "",
    private token: string | null = null,
    private fetchImpl: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const headers: Record<string, string> = {};
    if (body !== undefined) headers["content-type"] = "application/json";
    if (this.token) headers["authorization"] = `Bearer ${this.token}`;
    const resp = await this.fetchImpl(this.base + path, {
      method,
      headers,
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    if (!resp.ok) {
      throw new ApiError(resp.status, await resp.text());
    }
    return (await resp.json()) as T;
  }

  createSession(config: unknown): Promise<{ session_id: string }> {
    return this.request("POST", "/sessions", config);
  }

  getSession(sessionId: string): Promise<SessionInfo> {
    return this.request("GET", `/sessions/${sessionId}`);
  }

  setChecklistItem(sessionId: string, index: number, checked: boolean) {
    return this.request<{ checklist: { text: string; checked: boolean }[] }>(
      "POST", `/sessions/${sessionId}/checklist/${index}`, { checked });
  }

  startPilot(sessionId: string, participantId: string, sessionLabel: string,
             anticipatedMs: number): Promise<{ run: RunInfo }> {
    return this.request("POST", `/sessions/${sessionId}/start`, {
      participant_id: participantId,
      session_label: sessionLabel,
      anticipated_duration_ms: anticipatedMs,
    });
  }

  stopRun(runId: string): Promise<{ run: RunInfo }> {
    return this.request("POST", `/runs/${runId}/stop`, {});
  }

  postKeyAnnotation(runId: string, key: string,
                    eventTime: number): Promise<AnnotationResponse> {
    return this.request("POST", `/runs/${runId}/annotations`,
      { key, event_time: eventTime });
  }

  addRetroNote(runId: string, mediaOffset: number,
               note: string): Promise<AnnotationResponse> {
    return this.request("POST", `/runs/${runId}/annotations`, {
      kind: "note", origin: "retrospective", media_offset: mediaOffset, note,
    });
  }

  patchAnnotation(runId: string, annotationId: string,
                  patch: Record<string, unknown>): Promise<{ annotation: Annotation }> {
    return this.request("PATCH", `/runs/${runId}/annotations/${annotationId}`, patch);
  }

  getStats(runId: string): Promise<LiveStats> {
    return this.request("GET", `/runs/${runId}/stats`);
  }

  getAnnotations(runId: string, filter: {
    kinds?: string[]; authors?: string[]; fromMs?: number; toMs?: number; q?: string;
  } = {}): Promise<{ annotations: Annotation[] }> {
    const params = new URLSearchParams();
    if (filter.kinds?.length) params.set("kinds", filter.kinds.join(","));
    if (filter.authors?.length) params.set("authors", filter.authors.join(","));
    if (filter.fromMs !== undefined) params.set("from_ms", String(filter.fromMs));
    if (filter.toMs !== undefined) params.set("to_ms", String(filter.toMs));
    if (filter.q) params.set("q", filter.q);
    const qs = params.toString();
    return this.request("GET", `/runs/${runId}/annotations${qs ? "?" + qs : ""}`);
  }

  getTimeline(runId: string): Promise<Timeline> {
    return this.request("GET", `/runs/${runId}/timeline`);
  }

  getStatus(): Promise<{ instance_id: string; session_id: string | null;
                         phase: Phase | null; server_time: number }> {
    return this.request("GET", "/status");
  }

  streamUrl(streamId: string): string {
    const token = this.token ? `?token=${encodeURIComponent(this.token)}` : "";
    return `${this.base}/streams/${streamId}.mjpeg${token}`;
  }

  frameUrl(runId: string, offsetMs: number, stream?: string): string {
    const params = new URLSearchParams({ offset: String(Math.max(0, offsetMs)) });
    if (stream) params.set("stream", stream);
    if (this.token) params.set("token", this.token);
    return `${this.base}/runs/${runId}/frame?${params}`;
  }

  exportCsvUrl(runId: string): string {
    return `${this.base}/runs/${runId}/export.csv`;
  }

  reportUrl(runId: string): string {
    return `${this.base}/runs/${runId}/report.html`;
  }

  eventsUrl(after?: number): string {
    const params = new URLSearchParams();
    if (after !== undefined) params.set("after", String(after));
    if (this.token) params.set("token", this.token);
    const qs = params.toString();
    return `${this.base}/events${qs ? "?" + qs : ""}`;
  }
}

type Phase = import("./types.js").Phase;

/** Parse one SSE chunk into events; exported for tests. */
export function parseSseChunk(chunk: string): ServerEvent[] {
  const events: ServerEvent[] = [];
  for (const block of chunk.split("\n\n")) {
    for (const line of block.split("\n")) {
      if (line.startsWith("data: ")) {
        try {
          events.push(JSON.parse(line.slice("data: ".length)) as ServerEvent);
        } catch {
          // ignore malformed keepalive noise
        }
      }
    }
  }
  return events;
}
