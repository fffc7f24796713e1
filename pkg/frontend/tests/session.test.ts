// Experiment panel against a recorded session + flash trace.

import { describe, expect, it } from "vitest";
import { ApiClient } from "../src/api.js";
import {
  applyTraceRecord,
  newSessionState,
  renderSessionPanel,
} from "../src/session.js";
import { Ring } from "../src/stream.js";
import type { EventSourceLike } from "../src/stream.js";
import type { SessionDoc, TraceRecord } from "../src/types.js";

import sessionFixture from "./fixtures/session.json";
import traceFixture from "./fixtures/trace_flash.json";

const sessionDoc = sessionFixture as unknown as SessionDoc;
const traceRecords = traceFixture as unknown as TraceRecord[];

class FakeSource implements EventSourceLike {
  onmessage: ((ev: { data: string }) => void) | null = null;
  onerror: ((ev: unknown) => void) | null = null;
  closed = false;

  close(): void {
    this.closed = true;
  }

  emit(record: unknown): void {
    this.onmessage?.({ data: JSON.stringify(record) });
  }
}

function stubApi(): ApiClient {
  return new ApiClient("", async () =>
    new Response("[]", { status: 200, headers: { "Content-Type": "application/json" } }),
  );
}

describe("experiment panel", () => {
  it("tracks flash progress to 100% for every completed target", () => {
    const container = document.createElement("div");
    const source = new FakeSource();
    const panel = renderSessionPanel(container, stubApi(), sessionDoc, () => source);
    for (const record of traceRecords) source.emit(record);
    const done = traceRecords.find((r) => r.kind === "flash-done")!;
    expect(done.completed!.length).toBe(sessionDoc.nodes.length);
    for (const urn of done.completed!) {
      expect(panel.state.flashProgress.get(urn)).toBe(100);
      const card = container.querySelector(`.node-card[data-urn="${urn}"]`)!;
      expect((card.querySelector(".bar") as HTMLElement).style.width).toBe("100%");
      expect(card.classList.contains("flash-complete")).toBe(true);
    }
  });

  it("keeps per-node trace order identical to the server trace log", () => {
    const state = newSessionState(sessionDoc);
    for (const record of traceRecords) applyTraceRecord(state, record);
    for (const urn of sessionDoc.nodes) {
      const mine = state.perNode.get(urn) ?? [];
      const server = traceRecords.filter((r) => r.kind === "output" && r.urn === urn);
      expect(mine).toEqual(server);
      const seqs = mine.map((r) => r.seq);
      expect(seqs).toEqual([...seqs].sort((a, b) => (a ?? 0) - (b ?? 0)));
    }
  });

  it("renders echoed payloads into the trace view", () => {
    const container = document.createElement("div");
    const source = new FakeSource();
    renderSessionPanel(container, stubApi(), sessionDoc, () => source);
    for (const record of traceRecords) source.emit(record);
    const text = container.querySelector(".trace-view")!.textContent ?? "";
    expect(text).toContain("fixture-ping-0");
    expect(text).toContain("boot:echo");
  });

  it("bounds the trace buffer (ring semantics)", () => {
    const ring = new Ring<number>(100);
    for (let i = 0; i < 1000; i += 1) ring.push(i);
    expect(ring.length).toBe(100);
    expect(ring.toArray()[0]).toBe(900);
  });

  it("builds one card per virtual connection", () => {
    const container = document.createElement("div");
    const source = new FakeSource();
    renderSessionPanel(container, stubApi(), sessionDoc, () => source);
    expect(container.querySelectorAll(".node-card").length).toBe(sessionDoc.nodes.length);
  });
});
