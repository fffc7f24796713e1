// Resource browser: filter form, map + table of lookup results, and a
// selection basket handed to the reservation flow.

import { ApiClient } from "./api.js";
import { renderMap, MapHandle } from "./map.js";
import type { ResourceDoc } from "./types.js";

export interface BrowserHandle {
  refresh(): Promise<void>;
  renderResults(docs: ResourceDoc[]): void;
  selection: Set<string>;
  map: MapHandle | null;
  tableBody: HTMLTableSectionElement;
}

export function renderResourceTable(
  tbody: HTMLTableSectionElement,
  docs: ResourceDoc[],
  selection: Set<string>,
  onToggle: (urn: string) => void,
): void {
  tbody.replaceChildren();
  for (const doc of docs) {
    const row = document.createElement("tr");
    row.dataset.urn = doc.urn;
    row.className = `state-${doc.state}`;
    const phenomena = doc.capabilities.map((c) => c.phenomenon).join(", ");
    const reservable = doc.role === "experimentation";
    row.innerHTML = `
      <td><input type="checkbox" ${reservable ? "" : "disabled"} ${
        selection.has(doc.urn) ? "checked" : ""
      }></td>
      <td class="urn">${doc.urn}</td>
      <td>${doc.role}</td>
      <td><span class="state ${doc.state}">${doc.state}</span></td>
      <td>${phenomena || "-"}</td>
      <td>${doc.position === "mobile" ? "mobile" : "fixed"}</td>`;
    const box = row.querySelector("input") as HTMLInputElement;
    box.addEventListener("change", () => onToggle(doc.urn));
    tbody.appendChild(row);
  }
}

export function renderResourceBrowser(
  container: HTMLElement,
  api: ApiClient,
  onReserveSelection: (urns: string[]) => void,
): BrowserHandle {
  container.innerHTML = `
    <form class="filters">
      <input name="phenomenon" placeholder="phenomenon (e.g. temperature)">
      <select name="role">
        <option value="">any role</option>
        <option>experimentation</option>
        <option>service-only</option>
        <option>infrastructural</option>
        <option>participatory</option>
      </select>
      <select name="state">
        <option value="">active</option>
        <option value="*">any state</option>
        <option value="disabled">disabled</option>
        <option value="deleted">deleted</option>
      </select>
      <button type="submit">search</button>
      <span class="result-count"></span>
    </form>
    <div class="map-panel"></div>
    <div class="table-panel">
      <table>
        <thead><tr><th></th><th>urn</th><th>role</th><th>state</th><th>senses</th><th>mount</th></tr></thead>
        <tbody></tbody>
      </table>
    </div>
    <div class="selection-bar">
      <span class="selection-count">0 selected</span>
      <button class="reserve-button" disabled>reserve selection</button>
    </div>`;

  const form = container.querySelector("form.filters") as HTMLFormElement;
  const tbody = container.querySelector("tbody") as HTMLTableSectionElement;
  const mapPanel = container.querySelector(".map-panel") as HTMLElement;
  const countLabel = container.querySelector(".result-count") as HTMLElement;
  const selectionLabel = container.querySelector(".selection-count") as HTMLElement;
  const reserveButton = container.querySelector(".reserve-button") as HTMLButtonElement;

  const handle: BrowserHandle = {
    selection: new Set<string>(),
    map: null,
    tableBody: tbody,
    renderResults(docs: ResourceDoc[]) {
      countLabel.textContent = `${docs.length} resources`;
      handle.map = renderMap(mapPanel, docs, toggle);
      renderResourceTable(tbody, docs, handle.selection, toggle);
      handle.map.setSelected(handle.selection);
    },
    async refresh() {
      const params: Record<string, string> = {};
      const data = new FormData(form);
      for (const key of ["phenomenon", "role", "state"]) {
        const value = String(data.get(key) ?? "");
        if (value) params[key] = value;
      }
      const docs = await api.resources(params);
      handle.renderResults(docs);
    },
  };

  function toggle(urn: string): void {
    if (handle.selection.has(urn)) handle.selection.delete(urn);
    else handle.selection.add(urn);
    selectionLabel.textContent = `${handle.selection.size} selected`;
    reserveButton.disabled = handle.selection.size === 0;
    handle.map?.setSelected(handle.selection);
    tbody.querySelectorAll("tr").forEach((row) => {
      const box = row.querySelector("input") as HTMLInputElement | null;
      if (box && row.dataset.urn) box.checked = handle.selection.has(row.dataset.urn);
    });
  }

  form.addEventListener("submit", (ev) => {
    ev.preventDefault();
    void handle.refresh();
  });
  reserveButton.addEventListener("click", () => {
    onReserveSelection([...handle.selection].sort());
  });
  return handle;
}
