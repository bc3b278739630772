import type { ParameterUpdateBody } from "./api.js";
import { renderAlertFeed, formatEventTime } from "./feed.js";
import { renderCellMap } from "./hexmap.js";
import type { MapCell } from "./hexmap.js";
import { ParameterForm } from "./params.js";
import {
  cellStatus, initialState, reduce,
} from "./store.js";
import type { DashboardEvent, DashboardState } from "./store.js";
import type { StreamEvent, Timers } from "./stream.js";
import type {
  CellView, Metrics, SensorParams, UpdateReceipt,
} from "./types.js";

// Wires the pure store to the DOM. Every change goes through one dispatch
// queue: events are reduced in arrival order and the view re-renders once per
// drained batch, so concurrent fetches and stream callbacks cannot interleave
// half-applied states.

export interface GatewayClient {
  cells(): Promise<CellView[]>;
  sensors(): Promise<SensorParams[]>;
  metrics(): Promise<Metrics>;
  submitParameters(body: ParameterUpdateBody): Promise<UpdateReceipt>;
}

export interface StreamHandle {
  start(): void;
  stop(): void;
}

export interface AppDeps {
  api: GatewayClient;
  makeStream: (onEvent: (event: StreamEvent) => void) => StreamHandle;
  timers?: Timers;
  now?: () => number;
  /** Cells, sensors and metrics poll cadence. */
  refreshIntervalMs?: number;
}

export interface AppHandle {
  dispatch(event: DashboardEvent): void;
  getState(): DashboardState;
  refresh(): Promise<void>;
  stop(): void;
}

export const REFRESH_INTERVAL_MS = 2000;

const SHELL_HTML = `
<header class="topbar">
  <h1>urbanflow</h1>
  <span class="stream-status" data-stream-status>connecting</span>
  <span class="metrics-line" data-metrics></span>
</header>
<main class="layout">
  <section class="panel map-panel">
    <h2>cells</h2>
    <div class="map" data-map></div>
    <div class="cell-detail" data-cell-detail></div>
  </section>
  <section class="panel feed-panel">
    <h2>alerts</h2>
    <div class="feed" data-feed></div>
  </section>
  <section class="panel params-panel">
    <h2>calibration</h2>
    <div class="params" data-params></div>
  </section>
</main>
`;

function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

/** Nearest cell center by planar distance; matches the hex assignment for
 * any sensor whose own cell is present in the list. */
export function nearestCell(cells: CellView[], latitude: number,
                            longitude: number): string | null {
  const mPerDegLat = 111_320;
  let best: string | null = null;
  let bestDistance = Infinity;
  for (const cell of cells) {
    const dLat = (latitude - cell.center_latitude) * mPerDegLat;
    const dLon = (longitude - cell.center_longitude) * mPerDegLat
      * Math.cos((cell.center_latitude * Math.PI) / 180);
    const distance = dLat * dLat + dLon * dLon;
    if (distance < bestDistance) {
      bestDistance = distance;
      best = cell.cell;
    }
  }
  return best;
}

function renderCellDetail(state: DashboardState): string {
  const cellId = state.selectedCell;
  if (cellId === null) {
    return `<p class="detail-empty">click a cell for details</p>`;
  }
  const view = state.cells.find((c) => c.cell === cellId);
  if (view === undefined) {
    return `<p class="detail-empty">cell ${escapeHtml(cellId)} is gone</p>`;
  }
  const cep = state.metrics?.cep_config;
  const band = cep === undefined
    ? "" : ` &plusmn; ${cep.band_delta} over ${cep.window_seconds} s`;
  const avg = view.rolling_average === null
    ? "warming up" : view.rolling_average.toFixed(4) + band;
  const sensors = state.sensors
    .filter((s) => nearestCell(state.cells, s.latitude, s.longitude) === cellId)
    .map((s) => `<li>${escapeHtml(s.sensor_name)} `
      + `(${escapeHtml(s.quantity)}, v${s.version})</li>`)
    .join("");
  return `<h3>${escapeHtml(view.cell)}</h3>
<dl class="detail-grid">
  <dt>rolling average</dt><dd data-detail-avg>${avg}</dd>
  <dt>windows</dt><dd>${view.window_count}</dd>
  <dt>newest event</dt><dd>${formatEventTime(view.newest_event_time)}</dd>
  <dt>violations</dt><dd>${view.violations_total}</dd>
  <dt>alerts</dt><dd>${view.alerts_total}</dd>
  <dt>late dropped</dt><dd>${view.late_dropped}</dd>
  <dt>dedup dropped</dt><dd>${view.dedup_dropped}</dd>
</dl>
<h4>sensors (${view.sensors})</h4>
<ul class="cell-sensors">${sensors || "<li>none known</li>"}</ul>`;
}

function metricsLine(metrics: Metrics | null): string {
  if (metrics === null) return "";
  return `enriched ${metrics.enrichment.enriched}`
    + ` / alerts ${metrics.cep.alerts_total}`
    + ` / sensors ${metrics.registry.sensors ?? 0}`;
}

export function createApp(root: HTMLElement, deps: AppDeps): AppHandle {
  const timers = deps.timers ?? (globalThis as unknown as Timers);
  const now = deps.now ?? (() => Date.now());
  const refreshMs = deps.refreshIntervalMs ?? REFRESH_INTERVAL_MS;

  root.innerHTML = SHELL_HTML;
  const statusEl = root.querySelector("[data-stream-status]") as HTMLElement;
  const metricsEl = root.querySelector("[data-metrics]") as HTMLElement;
  const mapEl = root.querySelector("[data-map]") as HTMLElement;
  const detailEl = root.querySelector("[data-cell-detail]") as HTMLElement;
  const feedEl = root.querySelector("[data-feed]") as HTMLElement;
  const paramsEl = root.querySelector("[data-params]") as HTMLElement;

  let state = initialState();
  const queue: DashboardEvent[] = [];
  let draining = false;

  function render(): void {
    statusEl.textContent = state.stream;
    statusEl.className = `stream-status ${state.stream}`;
    metricsEl.textContent = metricsLine(state.metrics);
    const nowMs = now();
    const mapCells: MapCell[] = state.cells.map((view) => ({
      view,
      status: cellStatus(view, state, nowMs),
    }));
    mapEl.innerHTML = renderCellMap(mapCells, { selected: state.selectedCell });
    detailEl.innerHTML = renderCellDetail(state);
    feedEl.innerHTML = renderAlertFeed(state.alerts);
    form.update(state);
  }

  function dispatch(event: DashboardEvent): void {
    queue.push(event);
    if (draining) return;
    draining = true;
    try {
      while (queue.length > 0) {
        state = reduce(state, queue.shift()!);
        if (queue.length === 0) render();
      }
    } finally {
      draining = false;
    }
  }

  const form = new ParameterForm(
    paramsEl,
    (body) => deps.api.submitParameters(body),
    dispatch,
    now,
  );

  root.addEventListener("click", (event) => {
    const target = event.target as Element;
    const hit = target.closest?.("[data-cell]");
    if (!hit) return;
    const cell = hit.getAttribute("data-cell");
    if (cell === null) return;
    dispatch({
      kind: "select-cell",
      cell: cell === state.selectedCell ? null : cell,
    });
  });

  async function refresh(): Promise<void> {
    const [cells, sensors, metrics] = await Promise.allSettled([
      deps.api.cells(), deps.api.sensors(), deps.api.metrics(),
    ]);
    if (cells.status === "fulfilled") {
      dispatch({ kind: "cells", cells: cells.value });
    }
    if (sensors.status === "fulfilled") {
      dispatch({ kind: "sensors", sensors: sensors.value });
    }
    if (metrics.status === "fulfilled") {
      dispatch({ kind: "metrics", metrics: metrics.value });
    }
  }

  const stream = deps.makeStream((event) => {
    if (event.kind === "alert") {
      dispatch({ kind: "alert", alert: event.alert, receivedAt: now() });
    } else {
      dispatch({ kind: "stream-status", status: event.status });
    }
  });

  render();
  stream.start();
  void refresh();
  const refreshTimer = timers.setInterval(() => void refresh(), refreshMs);

  return {
    dispatch,
    getState: () => state,
    refresh,
    stop(): void {
      timers.clearInterval(refreshTimer);
      stream.stop();
    },
  };
}
