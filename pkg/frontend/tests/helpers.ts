import type { EventSourceLike, Timers } from "../src/stream.js";

// Deterministic substitutes for the browser pieces the dashboard injects:
// a manual clock, a scriptable EventSource and a seeded RNG.

type Task = {
  id: number;
  at: number;
  fn: () => void;
  intervalMs?: number;
};

export class FakeTimers implements Timers {
  now = 0;
  private tasks: Task[] = [];
  private seq = 1;

  setTimeout(fn: () => void, ms: number): number {
    const id = this.seq;
    this.seq += 1;
    this.tasks.push({ id, at: this.now + ms, fn });
    return id;
  }

  clearTimeout(id: number): void {
    this.tasks = this.tasks.filter((t) => t.id !== id);
  }

  setInterval(fn: () => void, ms: number): number {
    const id = this.seq;
    this.seq += 1;
    this.tasks.push({ id, at: this.now + ms, fn, intervalMs: ms });
    return id;
  }

  clearInterval(id: number): void {
    this.clearTimeout(id);
  }

  /** Runs due tasks in timestamp order, flushing microtasks in between. */
  async advance(ms: number): Promise<void> {
    const target = this.now + ms;
    for (;;) {
      const due = this.tasks
        .filter((t) => t.at <= target)
        .sort((a, b) => a.at - b.at || a.id - b.id)[0];
      if (due === undefined) break;
      this.now = due.at;
      if (due.intervalMs === undefined) {
        this.tasks = this.tasks.filter((t) => t.id !== due.id);
      } else {
        due.at += due.intervalMs;
      }
      due.fn();
      await flush();
    }
    this.now = target;
  }

  pendingCount(): number {
    return this.tasks.length;
  }
}

/** Lets promise chains settle between fake-clock steps. */
export function flush(): Promise<void> {
  return new Promise((resolve) => {
    setTimeout(resolve, 0);
  });
}

export class FakeEventSource implements EventSourceLike {
  onopen: ((event: unknown) => void) | null = null;
  onerror: ((event: unknown) => void) | null = null;
  closed = false;
  private listeners = new Map<string, Array<(event: MessageEvent) => void>>();

  addEventListener(type: string, listener: (event: MessageEvent) => void): void {
    const existing = this.listeners.get(type) ?? [];
    existing.push(listener);
    this.listeners.set(type, existing);
  }

  close(): void {
    this.closed = true;
  }

  open(): void {
    this.onopen?.({});
  }

  fail(): void {
    this.onerror?.({});
  }

  emit(type: string, data: string): void {
    for (const listener of this.listeners.get(type) ?? []) {
      listener({ data } as MessageEvent);
    }
  }
}

/** mulberry32; same seed, same sequence. */
export function seededRandom(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a = (a + 0x6d2b79f5) >>> 0;
    let t = a;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}
