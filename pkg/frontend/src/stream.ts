// Live record delivery: SSE first, polling fallback every 2 s when the
// stream cannot be established (or drops repeatedly).

export type RecordHandler = (record: unknown) => void;
export type StopFn = () => void;

export interface EventSourceLike {
  onmessage: ((ev: { data: string }) => void) | null;
  onerror: ((ev: unknown) => void) | null;
  close(): void;
}

export type EventSourceFactory = (url: string) => EventSourceLike;

export const POLL_INTERVAL_MS = 2000;

export function liveRecords(
  url: string,
  onRecord: RecordHandler,
  poll: (() => Promise<unknown[]>) | null,
  makeSource: EventSourceFactory = (u) => new EventSource(u) as unknown as EventSourceLike,
  setIntervalImpl: typeof setInterval = setInterval,
  clearIntervalImpl: typeof clearInterval = clearInterval,
): StopFn {
  let stopped = false;
  let pollTimer: ReturnType<typeof setInterval> | null = null;
  let seen = 0;
  let source: EventSourceLike | null = null;

  const startPolling = () => {
    if (stopped || pollTimer !== null || poll === null) return;
    pollTimer = setIntervalImpl(async () => {
      try {
        const records = await poll();
        for (const record of records.slice(seen)) onRecord(record);
        seen = records.length;
      } catch {
        // endpoint temporarily unreachable; keep polling
      }
    }, POLL_INTERVAL_MS);
  };

  try {
    source = makeSource(url);
    source.onmessage = (ev) => {
      seen += 1;
      onRecord(JSON.parse(ev.data));
    };
    source.onerror = () => {
      if (!stopped) startPolling();
    };
  } catch {
    startPolling();
  }

  return () => {
    stopped = true;
    if (source) source.close();
    if (pollTimer !== null) clearIntervalImpl(pollTimer);
  };
}

/** Bounded ring buffer for trace views (the invariant: memory stays flat). */
export class Ring<T> {
  private items: T[] = [];

  constructor(public capacity: number) {}

  push(item: T): void {
    this.items.push(item);
    if (this.items.length > this.capacity) {
      this.items.splice(0, this.items.length - this.capacity);
    }
  }

  toArray(): T[] {
    return [...this.items];
  }

  get length(): number {
    return this.items.length;
  }
}
