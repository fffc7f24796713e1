// Reservation flow: selection -> documented POST body -> key shown locally
// and handed to the session opener only.

import { describe, expect, it } from "vitest";
import { ApiClient } from "../src/api.js";
import { renderReserveForm } from "../src/reserve.js";

import reservationFixture from "./fixtures/reservation.json";

function formApi(calls: { url: string; body: string }[]): ApiClient {
  return new ApiClient("", async (url, init) => {
    calls.push({ url, body: typeof init?.body === "string" ? init.body : "" });
    const payload = url.startsWith("/time")
      ? { now: 120_000 }
      : reservationFixture;
    return new Response(JSON.stringify(payload), {
      status: 200,
      headers: { "Content-Type": "application/json" },
    });
  });
}

describe("reservation flow", () => {
  it("submits the selected urns over the documented endpoint", async () => {
    const calls: { url: string; body: string }[] = [];
    const container = document.createElement("div");
    const opened: string[] = [];
    const form = renderReserveForm(container, formApi(calls), (key) => opened.push(key));
    form.setSelection(["urn:citytb:santander:n01", "urn:citytb:santander:n02"]);
    const doc = await form.submit();
    expect(doc).not.toBeNull();
    const post = calls.find((c) => c.url === "/reservations")!;
    const body = JSON.parse(post.body);
    expect(body.urns).toEqual(["urn:citytb:santander:n01", "urn:citytb:santander:n02"]);
    expect(body.from).toBeGreaterThanOrEqual(120_000);
    expect(body.from % 1000).toBe(0);
    expect(body.to - body.from).toBe(600_000);
    // the key is displayed to the experimenter...
    expect(container.querySelector("code.key")!.textContent).toBe(
      (reservationFixture as { key: string }).key,
    );
    // ...and flows only into the session opener callback
    (container.querySelector(".open-session") as HTMLButtonElement).click();
    expect(opened).toEqual([(reservationFixture as { key: string }).key]);
  });

  it("keeps the submit button disabled with nothing selected", () => {
    const container = document.createElement("div");
    const form = renderReserveForm(container, formApi([]), () => undefined);
    const button = container.querySelector("button") as HTMLButtonElement;
    expect(button.disabled).toBe(true);
    form.setSelection(["urn:citytb:santander:n01"]);
    expect(button.disabled).toBe(false);
  });
});
