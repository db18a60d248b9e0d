// Entry point: find (or adopt) the active session, rebuild the view model
// from server state, then follow the event feed. All truth lives server-side,
// so a reload lands exactly where the pilot stands.

import { HarnessApi, parseSseChunk } from "./api.js";
import { el } from "./dom.js";
import type { ServerEvent, SessionInfo } from "./types.js";
import { renderAnalyzer } from "./views/analyzer.js";
import { renderPilot } from "./views/pilot.js";
import { renderSetup } from "./views/setup.js";
import {
  ViewModel,
  applyEvent,
  buildFromServer,
  emptyViewModel,
} from "./viewmodel.js";

const api = new HarnessApi("");
let model: ViewModel = emptyViewModel();
let teardown: () => void = () => undefined;
let sessionInfo: SessionInfo | null = null;

function root(): HTMLElement {
  return document.getElementById("app")!;
}

async function rebuildFromServer(): Promise<void> {
  const status = await api.getStatus();
  if (!status.session_id) {
    root().replaceChildren(el("p", {}, [
      "no active session — create one over the API or start with --session",
    ]));
    return;
  }
  sessionInfo = await api.getSession(status.session_id);
  if (sessionInfo.current_run) {
    const [stats, anns] = await Promise.all([
      api.getStats(sessionInfo.current_run),
      api.getAnnotations(sessionInfo.current_run),
    ]);
    model = buildFromServer({
      phase: sessionInfo.phase,
      runId: sessionInfo.current_run,
      startTime: null,
      anticipatedMs: 0,
      annotations: anns.annotations,
      stats,
      elapsedNotified: false,
      lastEventSeq: model.lastEventSeq,
    });
  } else {
    model = { ...emptyViewModel(), phase: sessionInfo.phase };
  }
  render();
}

function render(): void {
  teardown();
  teardown = () => undefined;
  if (!sessionInfo) return;
  if (model.phase === "pilot" && model.runId) {
    teardown = renderPilot(root(), api, sessionInfo, model.runId, {
      onStopped: () => void rebuildFromServer(),
      onModel: (m) => { model = m; },
      model: () => model,
    });
  } else if (model.phase === "analyzer" && model.runId) {
    let cancel: () => void = () => undefined;
    void renderAnalyzer(root(), api, model.runId,
      sessionInfo.config.fpv_source.expected_fps).then((c) => { cancel = c; });
    teardown = () => cancel();
  } else {
    renderSetup(root(), api, sessionInfo, {
      onStarted: () => void rebuildFromServer(),
    });
  }
}

function followEvents(): void {
  const source = new EventSource(api.eventsUrl(model.lastEventSeq));
  source.onmessage = (msg) => {
    const events = parseSseChunk(`data: ${msg.data}\n\n`);
    let phaseChanged = false;
    for (const event of events as ServerEvent[]) {
      const before = model.phase;
      model = applyEvent(model, event);
      if (event.type === "run_started") model.runId = event.run_id;
      phaseChanged ||= model.phase !== before;
    }
    if (phaseChanged) void rebuildFromServer().then(render);
  };
  source.onerror = () => {
    source.close();
    window.setTimeout(followEvents, 1_000);
  };
}

void rebuildFromServer().then(() => followEvents());
