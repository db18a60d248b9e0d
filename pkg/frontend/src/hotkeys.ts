// Shortcut capture. The one iron rule: keystrokes typed into any text entry
// surface must never fire annotations.

import type { ShortcutBinding } from "./types.js";

export interface KeyTarget {
  tagName?: string;
  isContentEditable?: boolean;
  type?: string;
}

export interface KeyStroke {
  key: string;
  ctrlKey?: boolean;
  metaKey?: boolean;
  altKey?: boolean;
  target?: KeyTarget | null;
}

const TEXT_INPUT_TYPES = new Set([
  "text", "search", "url", "tel", "email", "password", "number", undefined, "",
]);

/** True when the event target accepts typed text (so capture must stand down). */
export function isTextEntryTarget(target: KeyTarget | null | undefined): boolean {
  if (!target) return false;
  if (target.isContentEditable) return true;
  const tag = (target.tagName ?? "").toUpperCase();
  if (tag === "TEXTAREA" || tag === "SELECT") return true;
  if (tag === "INPUT") {
    const type = target.type?.toLowerCase();
    return TEXT_INPUT_TYPES.has(type) || type === undefined;
  }
  return false;
}

/** The binding a keystroke should fire, or null when it must be ignored. */
export function resolveShortcut(
  stroke: KeyStroke,
  bindings: ShortcutBinding[],
): ShortcutBinding | null {
  if (stroke.ctrlKey || stroke.metaKey || stroke.altKey) return null;
  if (isTextEntryTarget(stroke.target)) return null;
  if (stroke.key.length !== 1) return null; // F-keys, arrows, Escape, ...
  return bindings.find((b) => b.key === stroke.key) ?? null;
}

export type ShortcutHandler = (binding: ShortcutBinding, atMs: number) => void;

/** Wire keydown capture onto a window-like target; returns the unsubscribe. */
export function installHotkeys(
  target: { addEventListener: Function; removeEventListener: Function },
  bindings: () => ShortcutBinding[],
  onFire: ShortcutHandler,
  now: () => number = () => Date.now(),
): () => void {
  const listener = (event: KeyboardEvent) => {
    const binding = resolveShortcut(
      {
        key: event.key,
        ctrlKey: event.ctrlKey,
        metaKey: event.metaKey,
        altKey: event.altKey,
        target: event.target as unknown as KeyTarget,
      },
      bindings(),
    );
    if (binding) {
      event.preventDefault();
      onFire(binding, now());
    }
  };
  target.addEventListener("keydown", listener);
  return () => target.removeEventListener("keydown", listener);
}
