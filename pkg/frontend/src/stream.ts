import type { Alert } from "./types.js";
import type { StreamStatus } from "./store.js";

export type StreamEvent =
  | { kind: "alert"; alert: Alert }
  | { kind: "status"; status: StreamStatus };

/** The slice of EventSource the stream needs; tests substitute a fake. */
export interface EventSourceLike {
  addEventListener(type: string, listener: (event: MessageEvent) => void): void;
  close(): void;
  onopen: ((event: unknown) => void) | null;
  onerror: ((event: unknown) => void) | null;
}

export interface Timers {
  setTimeout(fn: () => void, ms: number): number;
  clearTimeout(id: number): void;
  setInterval(fn: () => void, ms: number): number;
  clearInterval(id: number): void;
}

export interface AlertStreamOptions {
  url: string;
  onEvent: (event: StreamEvent) => void;
  makeEventSource?: (url: string) => EventSourceLike;
  /** Fallback source while the stream is down; typically the history page. */
  poll?: () => Promise<Alert[]>;
  pollIntervalMs?: number;
  reconnectBackoffMs?: number[];
  timers?: Timers;
}

const DEFAULT_BACKOFF_MS = [1000, 2000, 5000, 10000];
export const POLL_INTERVAL_MS = 2000;

/**
 * Live alert subscription over server-sent events.
 *
 * On stream loss it reports "reconnecting", retries with capped backoff and,
 * when a poll function is provided, falls back to polling it every 2 s until
 * the stream is live again. Duplicate delivery across the gap is fine: the
 * store dedups by alert_id.
 */
export class AlertStream {
  private source: EventSourceLike | null = null;
  private attempts = 0;
  private reconnectTimer: number | null = null;
  private pollTimer: number | null = null;
  private stopped = false;
  private readonly timers: Timers;
  private readonly backoff: number[];
  private readonly pollIntervalMs: number;
  private readonly makeEventSource: (url: string) => EventSourceLike;

  constructor(private options: AlertStreamOptions) {
    this.timers = options.timers ?? (globalThis as unknown as Timers);
    this.backoff = options.reconnectBackoffMs ?? DEFAULT_BACKOFF_MS;
    this.pollIntervalMs = options.pollIntervalMs ?? POLL_INTERVAL_MS;
    this.makeEventSource = options.makeEventSource
      ?? ((url) => new EventSource(url) as unknown as EventSourceLike);
  }

  start(): void {
    this.stopped = false;
    this.connect();
  }

  stop(): void {
    this.stopped = true;
    if (this.reconnectTimer !== null) this.timers.clearTimeout(this.reconnectTimer);
    this.stopPolling();
    this.source?.close();
    this.source = null;
  }

  private connect(): void {
    this.source = this.makeEventSource(this.options.url);
    this.source.onopen = () => {
      this.attempts = 0;
      this.stopPolling();
      this.options.onEvent({ kind: "status", status: "live" });
    };
    this.source.onerror = () => this.handleLoss();
    this.source.addEventListener("alert", (event) => {
      try {
        this.options.onEvent({ kind: "alert", alert: JSON.parse(event.data) });
      } catch {
        // malformed frame; the next one will be fine
      }
    });
    this.source.addEventListener("end", () => this.handleLoss());
  }

  private handleLoss(): void {
    if (this.stopped) return;
    this.source?.close();
    this.source = null;
    this.startPolling();
    const delay = this.backoff[Math.min(this.attempts, this.backoff.length - 1)]!;
    this.attempts += 1;
    this.options.onEvent({
      kind: "status",
      status: this.options.poll ? "polling" : "reconnecting",
    });
    this.reconnectTimer = this.timers.setTimeout(() => {
      this.reconnectTimer = null;
      if (!this.stopped) this.connect();
    }, delay);
  }

  private startPolling(): void {
    const poll = this.options.poll;
    if (!poll || this.pollTimer !== null) return;
    this.pollTimer = this.timers.setInterval(() => {
      poll().then((alerts) => {
        for (const alert of alerts) {
          this.options.onEvent({ kind: "alert", alert });
        }
      }).catch(() => {
        // gateway unreachable; keep polling
      });
    }, this.pollIntervalMs);
  }

  private stopPolling(): void {
    if (this.pollTimer !== null) {
      this.timers.clearInterval(this.pollTimer);
      this.pollTimer = null;
    }
  }
}
