// Document shapes returned by the testbed HTTP API (docs/ENDPOINTS.md).

export interface Capability {
  phenomenon: string;
  unit: string;
  accuracy?: number;
}

export interface ResourceDoc {
  urn: string;
  role: "infrastructural" | "experimentation" | "service-only" | "participatory";
  capabilities: Capability[];
  position: { lat: number; lon: number } | "mobile";
  "parent-gateway"?: string;
  connection: { address: string; type: "mesh" | "gprs" | "wired" };
  state: "new" | "active" | "disabled" | "deleted";
  "hw-meta": Record<string, string>;
  "registered-at": number;
  "last-seen": number;
}

export interface ReservationDoc {
  id: string;
  urns: string[];
  start: number;
  end: number;
  owner: string;
  status: string;
  key?: string; // present exactly once, in the POST /reservations response
}

export interface SessionDoc {
  session: string;
  endpoint: string;
  reservation: string;
  nodes: string[];
  expires: number;
  closed: boolean;
  now: number;
}

export interface TraceRecord {
  t: number;
  kind: "output" | "status" | "flash-progress" | "flash-failed" | "flash-done";
  urn?: string;
  seq?: number;
  payload?: { text?: string; b64: string };
  event?: string;
  transfer?: string;
  progress?: number;
  status?: string;
  completed?: string[];
  failed?: string[];
  [extra: string]: unknown;
}

export interface TransferDoc {
  id: string;
  mode: string;
  status: "running" | "complete" | "partial-failure";
  chunks: number;
  rounds: number;
  frames: number;
  targets: string[];
  completed: string[];
  failed: string[];
  progress: Record<string, number>;
}

export interface BusRecord {
  topic: string;
  offset: number;
  type: string;
  at: number;
  correlation: string;
  urn?: string;
}

export interface ObservationDoc {
  source: string;
  phenomenon: string;
  value: number;
  unit: string;
  position: { lat: number; lon: number };
  timestamp: number;
  plane: string;
  speed?: number;
  course?: number;
}
