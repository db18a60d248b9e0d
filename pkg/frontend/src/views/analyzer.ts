// Analyzer view: index-driven playback (pause/rewind/fast-forward,
// click-to-seek with colored markers), a New Note box, filters, an editable
// table, and export links.

import { HarnessApi } from "../api.js";
import { clear, el, fmtOffset } from "../dom.js";
import {
  PlaybackState,
  initialPlayback,
  jumpBack,
  markerPercent,
  offsetForClick,
  seekTo,
  tick,
} from "../playback.js";
import type { Annotation, Timeline } from "../types.js";

export async function renderAnalyzer(
  root: HTMLElement,
  api: HarnessApi,
  runId: string,
  fps = 15,
): Promise<() => void> {
  clear(root);
  let timeline: Timeline;
  try {
    timeline = await api.getTimeline(runId);
  } catch {
    root.append(el("p", { class: "error" },
      ["archive missing: playback disabled"]));
    return () => undefined;
  }
  let playback: PlaybackState = initialPlayback(timeline);
  let annotations: Annotation[] = [];
  const frameInterval = 1000 / fps;

  const frame = el("img", { class: "playback-frame", alt: "recorded frame" });
  const offsetLabel = el("span", { class: "offset-label" });
  const track = el("div", { class: "timeline-track" });
  const cursor = el("div", { class: "timeline-cursor" });
  track.append(cursor);
  for (const marker of timeline.markers) {
    const mark = el("div", {
      class: "timeline-mark",
      style: `left:${markerPercent(marker, timeline.duration_ms)}%;` +
             `background:${marker.color}`,
      title: marker.kind,
    });
    mark.addEventListener("click", (ev) => {
      ev.stopPropagation();
      playback = seekTo(playback, marker.media_offset);
      refreshFrame();
    });
    track.append(mark);
  }
  track.addEventListener("click", (ev) => {
    const rect = track.getBoundingClientRect();
    playback = seekTo(playback, offsetForClick(
      (ev as MouseEvent).clientX - rect.left, rect.width, timeline.duration_ms));
    refreshFrame();
  });

  function refreshFrame(): void {
    frame.setAttribute("src", api.frameUrl(runId, playback.offsetMs));
    offsetLabel.textContent =
      `${fmtOffset(playback.offsetMs)} / ${fmtOffset(timeline.duration_ms)}`;
    cursor.style.left =
      `${timeline.duration_ms > 0
        ? (playback.offsetMs / timeline.duration_ms) * 100 : 0}%`;
  }

  const rewind = el("button", {}, ["⏪ 5s"]);
  rewind.addEventListener("click", () => {
    playback = jumpBack(playback);
    refreshFrame();
  });
  const playPause = el("button", {}, ["▶"]);
  playPause.addEventListener("click", () => {
    playback = { ...playback, playing: !playback.playing };
    playPause.textContent = playback.playing ? "⏸" : "▶";
  });
  const forward = el("button", {}, ["5s ⏩"]);
  forward.addEventListener("click", () => {
    playback = seekTo(playback, playback.offsetMs + 5_000);
    refreshFrame();
  });

  const noteText = el("input", {
    type: "text", placeholder: "new note at the cursor",
  }) as HTMLInputElement;
  const noteAdd = el("button", {}, ["Add note"]);
  noteAdd.addEventListener("click", async () => {
    if (!noteText.value) return;
    await api.addRetroNote(runId, playback.offsetMs, noteText.value);
    noteText.value = "";
    await refreshTable();
  });

  const filterKind = el("select", {}, [
    el("option", { value: "" }, ["all kinds"]),
    ...["voice", "correct", "incorrect", "screenshot", "counter", "note"].map(
      (k) => el("option", { value: k }, [k])),
  ]) as HTMLSelectElement;
  const filterText = el("input", {
    type: "search", placeholder: "search notes/transcripts",
  }) as HTMLInputElement;
  const applyFilters = el("button", {}, ["Filter"]);
  applyFilters.addEventListener("click", () => void refreshTable());

  const tbody = el("tbody");

  async function refreshTable(): Promise<void> {
    const resp = await api.getAnnotations(runId, {
      kinds: filterKind.value ? [filterKind.value] : undefined,
      q: filterText.value || undefined,
    });
    annotations = resp.annotations;
    clear(tbody);
    for (const a of annotations) {
      const noteCell = el("td", { class: "editable", tabindex: "0" }, [a.note]);
      noteCell.addEventListener("dblclick", async () => {
        const text = window.prompt("note:", a.note);
        if (text !== null) {
          await api.patchAnnotation(runId, a.id, { note: text });
          await refreshTable();
        }
      });
      const row = el("tr", {}, [
        el("td", {}, [el("span", {
          class: "swatch", style: `background:${a.color}`,
        })]),
        el("td", {}, [fmtOffset(a.media_offset)]),
        el("td", {}, [a.kind]),
        el("td", {}, [a.function]),
        noteCell,
      ]);
      row.addEventListener("click", () => {
        if (a.media_offset !== null) {
          playback = seekTo(playback, a.media_offset);
          refreshFrame();
        }
      });
      tbody.append(row);
    }
  }

  const exportCsv = el("a", { href: api.exportCsvUrl(runId), download: "run.csv" },
    ["Export CSV"]);
  const exportReport = el("a", { href: api.reportUrl(runId), target: "_blank" },
    ["Report"]);

  root.append(
    el("div", { class: "analyzer" }, [
      el("section", { class: "video-panel" }, [
        frame, track,
        el("div", { class: "controls" },
           [rewind, playPause, forward, offsetLabel]),
        el("div", { class: "new-note" }, [noteText, noteAdd]),
      ]),
      el("section", { class: "annotation-panel" }, [
        el("div", { class: "filters" }, [filterKind, filterText, applyFilters]),
        el("table", {}, [
          el("thead", {}, [el("tr", {}, [
            el("th"), el("th", {}, ["offset"]), el("th", {}, ["type"]),
            el("th", {}, ["function"]), el("th", {}, ["note"]),
          ])]),
          tbody,
        ]),
        el("div", { class: "exports" }, [exportCsv, " ", exportReport]),
      ]),
    ]),
  );

  refreshFrame();
  await refreshTable();

  let last = Date.now();
  const timer = window.setInterval(() => {
    const now = Date.now();
    const before = playback.offsetMs;
    playback = tick(playback, now - last);
    last = now;
    // re-request the frame only when playback crossed into the next interval
    if (Math.floor(playback.offsetMs / frameInterval)
        !== Math.floor(before / frameInterval)) {
      refreshFrame();
    }
  }, Math.max(33, frameInterval / 2));
  return () => window.clearInterval(timer);
}
