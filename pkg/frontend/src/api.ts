// HTTP client for the testbed. Two hard rules, both enforced here and
// pinned by the contract tests:
//  1. only documented endpoints are ever called (allow-list below mirrors
//     docs/ENDPOINTS.md);
//  2. the secret reservation key is sent to the session service (POST
//     /sessions) and nowhere else.

import type {
  BusRecord,
  ObservationDoc,
  ReservationDoc,
  ResourceDoc,
  SessionDoc,
  TraceRecord,
  TransferDoc,
} from "./types.js";

const DOCUMENTED: RegExp[] = [
  /^\/health$/,
  /^\/resources-summary$/,
  /^\/time$/,
  /^\/resources$/,
  /^\/resources\/urn:[^/]+$/,
  /^\/subscriptions$/,
  /^\/subscriptions\/[\w-]+\/stream$/,
  /^\/nodes$/,
  /^\/reservations$/,
  /^\/reservations\/[\w-]+$/,
  /^\/availability$/,
  /^\/sessions$/,
  /^\/sessions\/[0-9a-f]+$/,
  /^\/sessions\/[0-9a-f]+\/send$/,
  /^\/sessions\/[0-9a-f]+\/reset$/,
  /^\/sessions\/[0-9a-f]+\/flash$/,
  /^\/sessions\/[0-9a-f]+\/flash\/[\w-]+$/,
  /^\/sessions\/[0-9a-f]+\/trace$/,
  /^\/observations$/,
  /^\/asi\/subscriptions$/,
  /^\/asi\/subscriptions\/[\w-]+\/stream$/,
  /^\/heatmap$/,
  /^\/bus\/stream$/,
  /^\/bus\/log$/,
];

export class UndocumentedEndpoint extends Error {}

export class ApiError extends Error {
  constructor(
    public status: number,
    message: string,
    public detail: Record<string, unknown> = {},
  ) {
    super(message);
  }
}

type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

function qs(params: Record<string, string | number | undefined>): string {
  const pairs = Object.entries(params).filter(([, v]) => v !== undefined && v !== "");
  if (!pairs.length) return "";
  return "?" + pairs.map(([k, v]) => `${encodeURIComponent(k)}=${encodeURIComponent(String(v))}`).join("&");
}

export class ApiClient {
  constructor(
    public base: string = "",
    private fetchImpl: FetchLike = (url, init) => fetch(url, init),
  ) {}

  streamUrl(path: string): string {
    this.assertDocumented(path);
    return this.base + path;
  }

  private assertDocumented(path: string): void {
    const bare = path.split("?")[0];
    if (!DOCUMENTED.some((re) => re.test(bare))) {
      throw new UndocumentedEndpoint(`refusing to call undocumented ${bare}`);
    }
  }

  private async request<T>(
    method: string,
    path: string,
    body?: unknown,
    raw?: Uint8Array,
  ): Promise<T> {
    this.assertDocumented(path);
    const init: RequestInit = { method, headers: {} };
    if (raw !== undefined) {
      init.body = raw as unknown as BodyInit;
      (init.headers as Record<string, string>)["Content-Type"] = "application/octet-stream";
    } else if (body !== undefined) {
      init.body = JSON.stringify(body);
      (init.headers as Record<string, string>)["Content-Type"] = "application/json";
    }
    const resp = await this.fetchImpl(this.base + path, init);
    const text = await resp.text();
    const parsed = text ? JSON.parse(text) : null;
    if (!resp.ok) {
      const detail = (parsed ?? {}) as Record<string, unknown>;
      throw new ApiError(resp.status, String(detail["error"] ?? resp.status), detail);
    }
    return parsed as T;
  }

  // directory -----------------------------------------------------------

  resources(params: Record<string, string> = {}): Promise<ResourceDoc[]> {
    return this.request("GET", "/resources" + qs(params));
  }

  resource(urn: string): Promise<ResourceDoc> {
    return this.request("GET", `/resources/${urn}`);
  }

  resourcesSummary(): Promise<{ total: number; "by-state": Record<string, number> }> {
    return this.request("GET", "/resources-summary");
  }

  // runtime ----------------------------------------------------------------

  nodes(): Promise<{ nodes: unknown[]; gateways: unknown[] }> {
    return this.request("GET", "/nodes");
  }

  time(): Promise<{ now: number }> {
    return this.request("GET", "/time");
  }

  reserve(body: {
    user: string;
    token: string;
    urns: string[];
    from: number;
    to: number;
  }): Promise<ReservationDoc> {
    return this.request("POST", "/reservations", body);
  }

  availability(from: number, to: number): Promise<{ available: string[] }> {
    return this.request("GET", "/availability" + qs({ from, to }));
  }

  // The one and only place the secret key ever leaves the browser.
  openSession(key: string, controllerUrl?: string): Promise<SessionDoc> {
    const body: Record<string, string> = { key };
    if (controllerUrl) body["controller-url"] = controllerUrl;
    return this.request("POST", "/sessions", body);
  }

  session(id: string): Promise<SessionDoc> {
    return this.request("GET", `/sessions/${id}`);
  }

  send(id: string, urn: string, text: string): Promise<{ seq: number }> {
    return this.request("POST", `/sessions/${id}/send`, { urn, text });
  }

  reset(id: string, urn: string): Promise<{ reset: string }> {
    return this.request("POST", `/sessions/${id}/reset`, { urn });
  }

  flash(
    id: string,
    targets: string[],
    behavior: string,
    mode: string,
    image: Uint8Array,
  ): Promise<TransferDoc> {
    const params = qs({ behavior, mode, targets: targets.join(","), "image-id": "console-image" });
    return this.request("POST", `/sessions/${id}/flash${params}`, undefined, image);
  }

  flashStatus(id: string, transferId: string): Promise<TransferDoc> {
    return this.request("GET", `/sessions/${id}/flash/${transferId}`);
  }

  traceHistory(id: string): Promise<TraceRecord[]> {
    return this.request("GET", `/sessions/${id}/trace` + qs({ history: "1" }));
  }

  traceStreamUrl(id: string): string {
    return this.streamUrl(`/sessions/${id}/trace`);
  }

  // application support -------------------------------------------------------

  observations(params: Record<string, string | number>): Promise<ObservationDoc[]> {
    return this.request("GET", "/observations" + qs(params));
  }

  // bus admin -------------------------------------------------------------------

  busLog(topic?: string): Promise<BusRecord[]> {
    return this.request("GET", "/bus/log" + qs({ topic }));
  }

  busStreamUrl(): string {
    return this.streamUrl("/bus/stream");
  }
}
