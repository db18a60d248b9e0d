// Pilot view: FPV with grid overlay, TPV, the wizarding iframe, the live
// stats top bar with progress, and the annotation sidebar.

import { HarnessApi } from "../api.js";
import { clear, el, fmtOffset } from "../dom.js";
import { installHotkeys } from "../hotkeys.js";
import type { SessionInfo } from "../types.js";
import {
  ViewModel,
  accuracyLabel,
  addPending,
  annotationToRow,
  progressFraction,
} from "../viewmodel.js";

export interface PilotCallbacks {
  onStopped(): void;
  onModel(model: ViewModel): void;
  model(): ViewModel;
}

function gridOverlay(): HTMLElement {
  const grid = el("div", { class: "grid-overlay" });
  for (let i = 0; i < 9; i++) grid.append(el("div", { class: "grid-cell" }));
  return grid;
}

export function renderPilot(
  root: HTMLElement,
  api: HarnessApi,
  info: SessionInfo,
  runId: string,
  callbacks: PilotCallbacks,
): () => void {
  clear(root);
  const config = info.config;

  const statsBar = el("div", { class: "stats", id: "stats-bar" });
  const progress = el("div", { class: "progress-fill" });
  const progressWrap = el("div", { class: "progress" }, [progress]);
  const elapsedNote = el("span", { class: "elapsed-note" });
  const stop = el("button", {}, ["Stop"]) as HTMLButtonElement;
  stop.addEventListener("click", async () => {
    await api.stopRun(runId);
    callbacks.onStopped();
  });

  const tableBody = el("tbody");
  const sidebar = el("aside", { class: "sidebar" }, [
    el("h3", {}, ["Annotations"]),
    el("table", {}, [
      el("thead", {}, [el("tr", {}, [
        el("th"), el("th", {}, ["offset"]), el("th", {}, ["function"]),
        el("th", {}, ["note"]),
      ])]),
      tableBody,
    ]),
  ]);

  const fpvTile = el("div", { class: "tile fpv" }, [
    el("img", { src: api.streamUrl(config.fpv_source.stream_id), alt: "FPV" }),
    gridOverlay(),
  ]);
  const tiles = el("div", { class: "tiles" }, [fpvTile]);
  if (config.tpv_source) {
    tiles.append(el("div", { class: "tile" }, [
      el("img", { src: api.streamUrl(config.tpv_source.stream_id), alt: "TPV" }),
    ]));
  }
  if (config.role !== "observer" && config.wizarding_url) {
    tiles.append(el("div", { class: "tile wizarding" }, [
      el("iframe", { src: config.wizarding_url, title: "wizarding interface" }),
    ]));
  }

  function renderModel(): void {
    const model = callbacks.model();
    clear(statsBar);
    for (const [name, count] of Object.entries(model.stats.pinned_counts)) {
      statsBar.append(el("span", {}, [`${name}: ${count}`]));
    }
    statsBar.append(el("span", {}, [`accuracy: ${accuracyLabel(model.stats)}`]));
    progress.style.width = `${progressFraction(model, Date.now()) * 100}%`;
    elapsedNote.textContent = model.elapsedNotified
      ? "anticipated time elapsed" : "";
    clear(tableBody);
    for (const row of [...model.rows].reverse()) {
      const cells = [
        el("td", {}, [el("span", {
          class: "swatch", style: `background:${row.color}`,
        })]),
        el("td", {}, [fmtOffset(row.mediaOffset)]),
        el("td", {}, [row.functionName]),
      ];
      const noteCell = el("td", { class: "note-cell" }, [row.note]);
      if (row.thumbnailSeq !== null) {
        noteCell.prepend(el("button", { class: "note-pop" }, ["add note"]));
        noteCell.querySelector("button")!.addEventListener("click", async () => {
          const text = window.prompt("note for this screenshot:", row.note);
          if (text !== null) {
            await api.patchAnnotation(runId, row.id, { note: text });
          }
        });
      }
      cells.push(noteCell);
      const tr = el("tr", { class: row.pending ? "pending" : "" }, cells);
      tableBody.append(tr);
    }
  }

  const uninstall = installHotkeys(
    window,
    () => config.bindings,
    async (binding, atMs) => {
      // optimistic row until the server echoes the annotation event
      const tempId = `pending-${atMs}-${binding.key}`;
      callbacks.onModel(addPending(callbacks.model(), annotationToRow({
        id: tempId, run_id: runId, author: "local", kind: binding.kind,
        function: binding.name, color: binding.color, wall_time: atMs,
        media_offset: null, payload: { type: "empty" }, note: "",
        origin: "live",
      }, true)));
      renderModel();
      await api.postKeyAnnotation(runId, binding.key, atMs);
    },
  );

  root.append(
    el("header", { class: "topbar" }, [
      statsBar, progressWrap, elapsedNote,
      el("span", { class: "run-info" },
         [`${info.config.session_name} / run ${runId.slice(0, 8)}`]),
      stop,
    ]),
    el("main", { class: "pilot-main" }, [tiles, sidebar]),
  );
  renderModel();

  const timer = window.setInterval(renderModel, 500);
  return () => {
    uninstall();
    window.clearInterval(timer);
  };
}
