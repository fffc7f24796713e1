// Admin view: one durable eye on the three management channels. A live feed
// of every published event, with per-channel counts -- a registration storm
// is visible the moment it hits the bus.

import { ApiClient } from "./api.js";
import { Ring, liveRecords, StopFn, EventSourceFactory } from "./stream.js";
import type { BusRecord } from "./types.js";

export interface AdminHandle {
  ingest(record: BusRecord): void;
  counts: Map<string, number>;
  stop: StopFn;
}

const CHANNELS = [
  "registration.request",
  "registration.reply",
  "monitoring.request",
  "monitoring.reply",
  "reconfiguration.request",
  "reconfiguration.reply",
];

export function renderAdminView(
  container: HTMLElement,
  api: ApiClient,
  makeSource?: EventSourceFactory,
): AdminHandle {
  container.innerHTML = `
    <div class="admin-panel">
      <div class="channel-counts">
        ${CHANNELS.map(
          (c) => `<span class="channel" data-channel="${c}">${c}: <b>0</b></span>`,
        ).join("")}
      </div>
      <table class="bus-table">
        <thead><tr><th>t</th><th>topic</th><th>type</th><th>resource</th></tr></thead>
        <tbody></tbody>
      </table>
    </div>`;

  const tbody = container.querySelector("tbody") as HTMLTableSectionElement;
  const ring = new Ring<BusRecord>(300);
  const counts = new Map<string, number>(CHANNELS.map((c) => [c, 0]));

  const handle: AdminHandle = {
    counts,
    ingest(record: BusRecord) {
      ring.push(record);
      counts.set(record.topic, (counts.get(record.topic) ?? 0) + 1);
      const badge = container.querySelector(
        `.channel[data-channel="${record.topic}"] b`,
      ) as HTMLElement | null;
      if (badge) badge.textContent = String(counts.get(record.topic));
      const row = document.createElement("tr");
      row.className = `event-${record.type}`;
      row.innerHTML = `
        <td>${record.at}</td>
        <td>${record.topic}</td>
        <td class="event-type">${record.type}</td>
        <td class="urn">${record.urn ?? ""}</td>`;
      tbody.prepend(row);
      while (tbody.children.length > 300) {
        tbody.removeChild(tbody.lastChild as Node);
      }
    },
    stop: () => undefined,
  };

  handle.stop = liveRecords(
    api.busStreamUrl(),
    (record) => handle.ingest(record as BusRecord),
    () => api.busLog(),
    makeSource,
  );
  return handle;
}
