// Live experiment panel: one card per virtual connection with send / flash /
// reset controls, a filterable trace stream, and flash progress driven by
// the session's asynchronous status updates.

import { ApiClient } from "./api.js";
import { Ring, liveRecords, StopFn, EventSourceFactory } from "./stream.js";
import type { SessionDoc, TraceRecord } from "./types.js";

export const TRACE_RING_CAPACITY = 5000;

export interface SessionState {
  doc: SessionDoc;
  trace: Ring<TraceRecord>;
  perNode: Map<string, TraceRecord[]>;
  flashProgress: Map<string, number>;
  flashStatus: Map<string, string>;
}

export function newSessionState(doc: SessionDoc): SessionState {
  return {
    doc,
    trace: new Ring<TraceRecord>(TRACE_RING_CAPACITY),
    perNode: new Map(),
    flashProgress: new Map(),
    flashStatus: new Map(),
  };
}

/** Fold one server trace record into the panel state (pure bookkeeping). */
export function applyTraceRecord(state: SessionState, record: TraceRecord): void {
  state.trace.push(record);
  if (record.kind === "output" && record.urn) {
    let list = state.perNode.get(record.urn);
    if (!list) {
      list = [];
      state.perNode.set(record.urn, list);
    }
    list.push(record);
  } else if (record.kind === "flash-progress" && record.urn) {
    state.flashProgress.set(record.urn, record.progress ?? 0);
  } else if (record.kind === "flash-failed" && record.urn) {
    state.flashStatus.set(record.urn, "failed");
  } else if (record.kind === "flash-done") {
    for (const urn of record.completed ?? []) state.flashStatus.set(urn, "complete");
    for (const urn of record.failed ?? []) state.flashStatus.set(urn, "failed");
  }
}

export function traceLine(record: TraceRecord): string {
  if (record.kind === "output") {
    const body = record.payload?.text ?? record.payload?.b64 ?? "";
    return `[${record.t}] ${record.urn} #${record.seq ?? "-"}: ${body}`;
  }
  const rest = Object.entries(record)
    .filter(([k]) => !["t", "kind"].includes(k))
    .map(([k, v]) => `${k}=${JSON.stringify(v)}`)
    .join(" ");
  return `[${record.t}] ${record.kind} ${rest}`;
}

export interface SessionHandle {
  state: SessionState;
  ingest(record: TraceRecord): void;
  renderTrace(): void;
  renderProgress(): void;
  stop: StopFn;
  root: HTMLElement;
}

export function renderSessionPanel(
  container: HTMLElement,
  api: ApiClient,
  doc: SessionDoc,
  makeSource?: EventSourceFactory,
): SessionHandle {
  container.innerHTML = `
    <div class="session-panel">
      <div class="session-head">
        <h3>session <code>${doc.session}</code></h3>
        <span class="endpoint">${doc.endpoint}</span>
        <span class="expiry">expires @ ${doc.expires}</span>
      </div>
      <div class="flash-bar">
        <label>behavior
          <select class="flash-behavior">
            <option>echo</option><option>blink</option>
            <option>flood-routing</option><option>default-sense</option>
          </select>
        </label>
        <label>mode
          <select class="flash-mode">
            <option>multicast</option><option>unicast</option><option>broadcast</option>
          </select>
        </label>
        <label>size <input class="flash-size" type="number" value="1024"></label>
        <button class="flash-selected">flash checked nodes</button>
      </div>
      <div class="node-cards"></div>
      <div class="trace-head">
        <h4>trace</h4>
        <select class="trace-filter"><option value="">all nodes</option></select>
      </div>
      <ul class="trace-view"></ul>
    </div>`;

  const cards = container.querySelector(".node-cards") as HTMLElement;
  const traceView = container.querySelector(".trace-view") as HTMLUListElement;
  const traceFilter = container.querySelector(".trace-filter") as HTMLSelectElement;
  const state = newSessionState(doc);

  for (const urn of doc.nodes) {
    const card = document.createElement("div");
    card.className = "node-card";
    card.dataset.urn = urn;
    card.innerHTML = `
      <div class="card-head">
        <input type="checkbox" class="flash-pick" checked>
        <span class="urn">${urn}</span>
      </div>
      <div class="progress"><div class="bar" style="width:0%"></div><span class="pct"></span></div>
      <div class="card-actions">
        <input class="payload" placeholder="payload">
        <button class="send">send</button>
        <button class="reset">reset</button>
      </div>`;
    (card.querySelector(".send") as HTMLButtonElement).addEventListener("click", () => {
      const text = (card.querySelector(".payload") as HTMLInputElement).value;
      void api.send(doc.session, urn, text);
    });
    (card.querySelector(".reset") as HTMLButtonElement).addEventListener("click", () => {
      void api.reset(doc.session, urn);
    });
    cards.appendChild(card);
    const option = document.createElement("option");
    option.value = urn;
    option.textContent = urn.split(":").pop() ?? urn;
    traceFilter.appendChild(option);
  }

  (container.querySelector(".flash-selected") as HTMLButtonElement).addEventListener(
    "click",
    () => {
      const targets = [...cards.querySelectorAll(".node-card")]
        .filter((card) => (card.querySelector(".flash-pick") as HTMLInputElement).checked)
        .map((card) => (card as HTMLElement).dataset.urn as string);
      const behavior = (container.querySelector(".flash-behavior") as HTMLSelectElement).value;
      const mode = (container.querySelector(".flash-mode") as HTMLSelectElement).value;
      const size = Number((container.querySelector(".flash-size") as HTMLInputElement).value);
      void api.flash(doc.session, targets, behavior, mode, new Uint8Array(size));
    },
  );

  const handle: SessionHandle = {
    state,
    root: container,
    ingest(record: TraceRecord) {
      applyTraceRecord(state, record);
      handle.renderProgress();
      handle.renderTrace();
    },
    renderProgress() {
      for (const card of cards.querySelectorAll(".node-card")) {
        const urn = (card as HTMLElement).dataset.urn as string;
        const pct = state.flashProgress.get(urn) ?? 0;
        (card.querySelector(".bar") as HTMLElement).style.width = `${pct}%`;
        const label = card.querySelector(".pct") as HTMLElement;
        const status = state.flashStatus.get(urn);
        label.textContent = status === "failed" ? "failed" : pct ? `${pct}%` : "";
        card.classList.toggle("flash-complete", pct >= 100);
        card.classList.toggle("flash-failed", status === "failed");
      }
    },
    renderTrace() {
      const filter = traceFilter.value;
      const records = state.trace
        .toArray()
        .filter((r) => !filter || r.urn === filter);
      traceView.replaceChildren(
        ...records.slice(-400).map((r) => {
          const item = document.createElement("li");
          item.className = `trace-${r.kind}`;
          item.textContent = traceLine(r);
          return item;
        }),
      );
    },
    stop: () => undefined,
  };

  traceFilter.addEventListener("change", () => handle.renderTrace());

  handle.stop = liveRecords(
    api.traceStreamUrl(doc.session),
    (record) => handle.ingest(record as TraceRecord),
    () => api.traceHistory(doc.session),
    makeSource,
  );
  return handle;
}
