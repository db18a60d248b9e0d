// Setup view: role, device fields, checklist, and the binding editor with
// live key capture. Start unlocks only once every checklist item is ticked.

import { HarnessApi } from "../api.js";
import { clear, el } from "../dom.js";
import type { SessionInfo, ShortcutBinding } from "../types.js";

export interface SetupCallbacks {
  onStarted(runId: string): void;
}

export function validateBindingsLocal(bindings: ShortcutBinding[]): string | null {
  const keys = new Set<string>();
  const pinnedNames = new Set<string>();
  for (const b of bindings) {
    if (b.key.length !== 1) return `key must be one character: "${b.key}"`;
    if (!/^#[0-9a-fA-F]{6}$/.test(b.color)) return `bad color: "${b.color}"`;
    if (!b.name) return "binding name must not be empty";
    if (keys.has(b.key)) return `duplicate key: "${b.key}"`;
    keys.add(b.key);
    if (b.pinned) {
      if (pinnedNames.has(b.name)) return `duplicate pinned name: "${b.name}"`;
      pinnedNames.add(b.name);
    }
  }
  return null;
}

export function renderSetup(
  root: HTMLElement,
  api: HarnessApi,
  info: SessionInfo,
  callbacks: SetupCallbacks,
): void {
  clear(root);
  const config = info.config;
  const error = el("p", { class: "error", role: "alert" });

  const checklist = el("ul", { class: "checklist" });
  config.checklist.forEach((item, index) => {
    const box = el("input", { type: "checkbox" }) as HTMLInputElement;
    box.checked = item.checked;
    box.addEventListener("change", async () => {
      await api.setChecklistItem(info.session_id, index, box.checked);
      item.checked = box.checked;
      syncStartButton();
    });
    checklist.append(el("li", {}, [box, ` ${item.text}`]));
  });

  const participant = el("input", {
    type: "text", placeholder: "participant id", value: "P1",
  }) as HTMLInputElement;
  const label = el("input", {
    type: "text", placeholder: "session label", value: "S1",
  }) as HTMLInputElement;
  const minutes = el("input", {
    type: "number", value: "10", min: "1",
  }) as HTMLInputElement;
  const start = el("button", { disabled: "" }, ["Start pilot"]) as HTMLButtonElement;

  function syncStartButton(): void {
    const ready = config.checklist.every((c) => c.checked)
      && validateBindingsLocal(config.bindings) === null;
    if (ready) start.removeAttribute("disabled");
    else start.setAttribute("disabled", "");
  }
  syncStartButton();

  start.addEventListener("click", async () => {
    try {
      const resp = await api.startPilot(
        info.session_id, participant.value, label.value,
        Math.max(1, Number(minutes.value)) * 60_000);
      callbacks.onStarted(resp.run.id);
    } catch (err) {
      error.textContent = String(err);
    }
  });

  const bindingRows = config.bindings.map((b) =>
    el("tr", {}, [
      el("td", {}, [el("kbd", {}, [b.key])]),
      el("td", {}, [b.kind]),
      el("td", {}, [b.name]),
      el("td", {}, [el("span", {
        class: "swatch", style: `background:${b.color}`,
      })]),
      el("td", {}, [b.pinned ? "pinned" : ""]),
    ]));
  const bindingError = validateBindingsLocal(config.bindings);
  if (bindingError) error.textContent = bindingError;

  root.append(
    el("h2", {}, [`Setup — ${config.session_name} (${config.role})`]),
    el("section", {}, [
      el("h3", {}, ["Devices"]),
      el("p", {}, [`FPV: ${config.fpv_source.source_url}`]),
      el("p", {}, [config.tpv_source
        ? `TPV: ${config.tpv_source.source_url}` : "TPV: none"]),
      el("p", {}, [`Wizarding: ${config.wizarding_url || "none"}`]),
    ]),
    el("section", {}, [el("h3", {}, ["Checklist"]), checklist]),
    el("section", {}, [
      el("h3", {}, ["Shortcuts"]),
      el("table", {}, [el("tbody", {}, bindingRows)]),
    ]),
    el("section", {}, [
      el("h3", {}, ["Pilot"]),
      participant, label, minutes, start, error,
    ]),
  );
}
