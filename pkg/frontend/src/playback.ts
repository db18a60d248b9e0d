// Archive playback without a video codec: the timeline is fetched once and a
// local clock drives frame requests by media offset, so marker clicks and
// frame display stay aligned to the recording's own index.

import type { Timeline, TimelineMarker } from "./types.js";

export interface PlaybackState {
  offsetMs: number;
  playing: boolean;
  rate: number;
  durationMs: number;
}

export function initialPlayback(timeline: Timeline): PlaybackState {
  return { offsetMs: 0, playing: false, rate: 1, durationMs: timeline.duration_ms };
}

export function clampOffset(offsetMs: number, durationMs: number): number {
  return Math.min(durationMs, Math.max(0, Math.round(offsetMs)));
}

/** Advance by wall-clock dt at the current rate (paused -> unchanged). */
export function tick(state: PlaybackState, dtMs: number): PlaybackState {
  if (!state.playing) return state;
  const offsetMs = clampOffset(state.offsetMs + dtMs * state.rate, state.durationMs);
  return { ...state, offsetMs, playing: offsetMs < state.durationMs };
}

export function seekTo(state: PlaybackState, offsetMs: number): PlaybackState {
  return { ...state, offsetMs: clampOffset(offsetMs, state.durationMs) };
}

/** Marker click: playback lands on the marker's own media offset. */
export function seekToMarker(state: PlaybackState, marker: TimelineMarker): PlaybackState {
  return seekTo(state, marker.media_offset);
}

/** Replay from a few seconds before an annotated moment. */
export function jumpBack(state: PlaybackState, backMs = 5_000): PlaybackState {
  return seekTo(state, state.offsetMs - backMs);
}

/** Timeline pixel position -> media offset for click-to-seek. */
export function offsetForClick(clickX: number, trackWidth: number,
                               durationMs: number): number {
  if (trackWidth <= 0) return 0;
  return clampOffset((clickX / trackWidth) * durationMs, durationMs);
}

/** Marker -> percent position along the strip (for rendering). */
export function markerPercent(marker: TimelineMarker, durationMs: number): number {
  if (durationMs <= 0) return 0;
  return Math.min(100, (marker.media_offset / durationMs) * 100);
}

/** The frame interval the archive was recorded at, from the configured fps. */
export function frameIntervalMs(fps: number): number {
  return fps > 0 ? 1000 / fps : 0;
}

/**
 * True when the frame shown for a marker click is within one frame interval
 * of the marker offset (floor lookup can never land further back than that
 * while frames keep arriving at the nominal rate). Capture times sit on an
 * integer-millisecond grid, so the interval rounds up: at 15 fps successive
 * frames alternate 66 and 67 ms apart.
 */
export function withinOneFrame(markerOffsetMs: number, frameCaptureOffsetMs: number,
                               fps: number): boolean {
  const delta = markerOffsetMs - frameCaptureOffsetMs;
  return delta >= 0 && delta <= Math.ceil(frameIntervalMs(fps));
}
