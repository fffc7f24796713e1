// App shell: four tabs over one API client; every UI mutation funnels
// through a single event queue so view updates never interleave.

import { ApiClient } from "./api.js";
import { renderAdminView } from "./admin.js";
import { renderResourceBrowser } from "./browser.js";
import { renderReserveForm } from "./reserve.js";
import { renderSessionPanel } from "./session.js";

export class EventQueue {
  private chain: Promise<void> = Promise.resolve();

  post(task: () => void | Promise<void>): Promise<void> {
    this.chain = this.chain.then(task).catch((err) => {
      console.error("ui task failed", err);
    });
    return this.chain;
  }
}

export function boot(root: HTMLElement, api: ApiClient): void {
  const queue = new EventQueue();
  root.innerHTML = `
    <header>
      <h1>city testbed console</h1>
      <nav>
        <button data-tab="browse" class="active">resources</button>
        <button data-tab="reserve">reserve</button>
        <button data-tab="session">session</button>
        <button data-tab="admin">admin</button>
      </nav>
      <span class="clock"></span>
    </header>
    <main>
      <section data-panel="browse"></section>
      <section data-panel="reserve" hidden></section>
      <section data-panel="session" hidden>
        <div class="session-opener">
          <input class="session-key" placeholder="secret reservation key">
          <button class="session-open">open session</button>
          <p class="session-error"></p>
        </div>
        <div class="session-mount"></div>
      </section>
      <section data-panel="admin" hidden></section>
    </main>`;

  const show = (tab: string) =>
    queue.post(() => {
      root.querySelectorAll("nav button").forEach((b) => {
        b.classList.toggle("active", (b as HTMLElement).dataset.tab === tab);
      });
      root.querySelectorAll("main section").forEach((s) => {
        (s as HTMLElement).hidden = (s as HTMLElement).dataset.panel !== tab;
      });
    });

  root.querySelectorAll("nav button").forEach((b) =>
    b.addEventListener("click", () => void show((b as HTMLElement).dataset.tab ?? "browse")),
  );

  const browsePanel = root.querySelector('[data-panel="browse"]') as HTMLElement;
  const reservePanel = root.querySelector('[data-panel="reserve"]') as HTMLElement;
  const adminPanel = root.querySelector('[data-panel="admin"]') as HTMLElement;
  const sessionMount = root.querySelector(".session-mount") as HTMLElement;
  const keyInput = root.querySelector(".session-key") as HTMLInputElement;
  const sessionError = root.querySelector(".session-error") as HTMLElement;

  const openSession = (key: string) =>
    queue.post(async () => {
      try {
        const doc = await api.openSession(key);
        renderSessionPanel(sessionMount, api, doc);
        sessionError.textContent = "";
        await show("session");
      } catch (err) {
        sessionError.textContent = (err as Error).message;
        await show("session");
      }
    });

  const reserveForm = renderReserveForm(reservePanel, api, (key) => {
    keyInput.value = key;
    void openSession(key);
  });
  const browser = renderResourceBrowser(browsePanel, api, (urns) => {
    reserveForm.setSelection(urns);
    void show("reserve");
  });
  renderAdminView(adminPanel, api);
  (root.querySelector(".session-open") as HTMLButtonElement).addEventListener("click", () =>
    void openSession(keyInput.value.trim()),
  );

  const clock = root.querySelector(".clock") as HTMLElement;
  setInterval(() => {
    void queue.post(async () => {
      try {
        const { now } = await api.time();
        clock.textContent = `sim t = ${(now / 1000).toFixed(0)} s`;
      } catch {
        clock.textContent = "api unreachable";
      }
    });
  }, 2000);

  void queue.post(() => browser.refresh());
}

if (typeof document !== "undefined" && document.getElementById("app")) {
  boot(document.getElementById("app") as HTMLElement, new ApiClient(""));
}
