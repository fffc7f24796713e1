// Contract: the client calls only documented endpoints, and the secret
// reservation key travels to the session service and nowhere else.

import { describe, expect, it } from "vitest";
import { ApiClient, UndocumentedEndpoint } from "../src/api.js";

interface Captured {
  url: string;
  method: string;
  body: string;
}

function capturingClient(): { api: ApiClient; calls: Captured[] } {
  const calls: Captured[] = [];
  const fetchImpl = async (url: string, init?: RequestInit) => {
    calls.push({
      url,
      method: init?.method ?? "GET",
      body: typeof init?.body === "string" ? init.body : "",
    });
    return new Response("{}", {
      status: 200,
      headers: { "Content-Type": "application/json" },
    });
  };
  return { api: new ApiClient("", fetchImpl), calls };
}

describe("api client", () => {
  it("refuses undocumented endpoints", () => {
    const { api } = capturingClient();
    expect(() => api.streamUrl("/internal/debug")).toThrow(UndocumentedEndpoint);
    expect(() => api.streamUrl("/resources")).not.toThrow();
  });

  it("every method hits a documented path", async () => {
    const { api, calls } = capturingClient();
    const sid = "0123456789abcdef";
    await api.resources({ phenomenon: "temperature" });
    await api.resource("urn:citytb:santander:n01");
    await api.resourcesSummary();
    await api.nodes();
    await api.time();
    await api.reserve({ user: "a", token: "t", urns: ["urn:citytb:santander:n01"], from: 0, to: 1000 });
    await api.availability(0, 1000);
    await api.openSession("cafe");
    await api.session(sid);
    await api.send(sid, "urn:citytb:santander:n01", "ping");
    await api.reset(sid, "urn:citytb:santander:n01");
    await api.flash(sid, ["urn:citytb:santander:n01"], "echo", "unicast", new Uint8Array(8));
    await api.flashStatus(sid, "motap-0001");
    await api.traceHistory(sid);
    await api.observations({ phenomenon: "temperature" });
    await api.busLog("registration.request");
    expect(calls.length).toBe(16);
  });

  it("sends the secret key to the session service only", async () => {
    const { api, calls } = capturingClient();
    const KEY = "deadbeef".repeat(8);
    const sid = "0123456789abcdef";
    await api.openSession(KEY);
    await api.resources();
    await api.reserve({ user: "a", token: "t", urns: [], from: 0, to: 1 });
    await api.send(sid, "urn:citytb:santander:n01", "hello");
    await api.traceHistory(sid);
    await api.busLog();
    const carrying = calls.filter(
      (c) => c.url.includes(KEY) || c.body.includes(KEY),
    );
    expect(carrying.length).toBe(1);
    expect(carrying[0].url.split("?")[0]).toBe("/sessions");
    expect(carrying[0].method).toBe("POST");
  });
});
