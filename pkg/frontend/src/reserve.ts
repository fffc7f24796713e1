// Reservation flow: selection -> interval + credentials -> secret key.
// The key stays in this panel (and the session opener); it is never shown
// to any other endpoint.

import { ApiClient, ApiError } from "./api.js";
import type { ReservationDoc } from "./types.js";

export interface ReserveHandle {
  setSelection(urns: string[]): void;
  submit(): Promise<ReservationDoc | null>;
  lastReservation: ReservationDoc | null;
}

export function renderReserveForm(
  container: HTMLElement,
  api: ApiClient,
  onSession: (key: string) => void,
): ReserveHandle {
  container.innerHTML = `
    <div class="reserve-panel">
      <h3>reserve</h3>
      <ul class="picked"></ul>
      <form class="reserve-form">
        <label>user <input name="user" value="alice"></label>
        <label>token <input name="token" type="password" value="wonderland"></label>
        <label>start in (s) <input name="lead" type="number" value="10"></label>
        <label>duration (s) <input name="duration" type="number" value="600"></label>
        <button type="submit" disabled>reserve</button>
      </form>
      <div class="reserve-result"></div>
    </div>`;

  const list = container.querySelector(".picked") as HTMLUListElement;
  const form = container.querySelector("form.reserve-form") as HTMLFormElement;
  const submitButton = form.querySelector("button") as HTMLButtonElement;
  const result = container.querySelector(".reserve-result") as HTMLElement;
  let urns: string[] = [];

  const handle: ReserveHandle = {
    lastReservation: null,
    setSelection(next: string[]) {
      urns = next;
      list.replaceChildren(
        ...urns.map((u) => {
          const item = document.createElement("li");
          item.textContent = u;
          return item;
        }),
      );
      submitButton.disabled = urns.length === 0;
    },
    async submit() {
      const data = new FormData(form);
      const now = (await api.time()).now;
      const lead = Number(data.get("lead") ?? 10) * 1000;
      const duration = Number(data.get("duration") ?? 600) * 1000;
      const start = Math.ceil((now + lead) / 1000) * 1000;
      try {
        const doc = await api.reserve({
          user: String(data.get("user") ?? ""),
          token: String(data.get("token") ?? ""),
          urns,
          from: start,
          to: start + duration,
        });
        handle.lastReservation = doc;
        result.innerHTML = `
          <p class="ok">reservation <b>${doc.id}</b> [${doc.start} .. ${doc.end})</p>
          <p>secret key (kept in this browser): <code class="key">${doc.key}</code></p>
          <button class="open-session">open session</button>`;
        const openButton = result.querySelector(".open-session") as HTMLButtonElement;
        openButton.addEventListener("click", () => onSession(doc.key ?? ""));
        return doc;
      } catch (err) {
        if (err instanceof ApiError && err.detail["kind"] === "conflict") {
          result.innerHTML = `<p class="err">conflict on: ${(err.detail["colliding"] as string[]).join(", ")}</p>`;
        } else {
          result.innerHTML = `<p class="err">${(err as Error).message}</p>`;
        }
        return null;
      }
    },
  };

  form.addEventListener("submit", (ev) => {
    ev.preventDefault();
    void handle.submit();
  });
  return handle;
}
