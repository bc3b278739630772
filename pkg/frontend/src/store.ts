import type {
  Alert, CellView, Metrics, SensorParams, UpdateReceipt,
} from "./types.js";

// UI state is a pure function of the events received from the gateway plus
// local pending edits: reduce() never mutates, so any event log can be
// replayed to reproduce the exact state.

export type StreamStatus = "connecting" | "live" | "reconnecting" | "polling";

export type PendingStatus = "pending" | "confirmed" | "conflict" | "invalid" | "failed";

export type PendingUpdate = {
  sensorName: string;
  submittedAt: number;
  status: PendingStatus;
  /** Version returned by the gateway; confirmation clears against it. */
  awaitedVersion: number | null;
  currentVersion?: number;
  fieldErrors?: Record<string, string>;
  message?: string;
};

export type DashboardEvent =
  | { kind: "cells"; cells: CellView[] }
  | { kind: "sensors"; sensors: SensorParams[] }
  | { kind: "metrics"; metrics: Metrics }
  | { kind: "alert"; alert: Alert; receivedAt: number }
  | { kind: "stream-status"; status: StreamStatus }
  | { kind: "select-cell"; cell: string | null }
  | { kind: "update-submitted"; sensorName: string; at: number }
  | { kind: "update-accepted"; sensorName: string; receipt: UpdateReceipt }
  | { kind: "update-conflict"; sensorName: string; currentVersion: number; message: string }
  | { kind: "update-invalid"; sensorName: string; fieldErrors: Record<string, string> }
  | { kind: "update-failed"; sensorName: string; message: string }
  | { kind: "update-dismissed"; sensorName: string };

export type DashboardState = {
  cells: CellView[];
  sensors: SensorParams[];
  metrics: Metrics | null;
  /** Newest first, bounded, no alert_id appears twice. */
  alerts: Alert[];
  /** cell id -> wall-clock ms the latest alert for it arrived. */
  lastAlertAt: Record<string, number>;
  stream: StreamStatus;
  selectedCell: string | null;
  pending: Record<string, PendingUpdate>;
};

export const ALERT_RING_SIZE = 100;
/** Fallback min_window_count until the first metrics poll arrives. */
export const COLD_START_WINDOW_COUNT = 3;
/** How long a cell stays highlighted after its latest alert. */
export const ALERTING_HOLD_MS = 120_000;

export function initialState(): DashboardState {
  return {
    cells: [],
    sensors: [],
    metrics: null,
    alerts: [],
    lastAlertAt: {},
    stream: "connecting",
    selectedCell: null,
    pending: {},
  };
}

function withPending(state: DashboardState, sensorName: string,
                     update: PendingUpdate | null): DashboardState {
  const pending = { ...state.pending };
  if (update === null) delete pending[sensorName];
  else pending[sensorName] = update;
  return { ...state, pending };
}

/** Clears pendings whose awaited version is now visible in the registry. */
function confirmFromSensors(state: DashboardState,
                            sensors: SensorParams[]): Record<string, PendingUpdate> {
  const byName = new Map(sensors.map((s) => [s.sensor_name, s.version]));
  const pending: Record<string, PendingUpdate> = {};
  for (const [name, entry] of Object.entries(state.pending)) {
    const version = byName.get(name);
    if (entry.status === "pending" && entry.awaitedVersion !== null
        && version !== undefined && version >= entry.awaitedVersion) {
      pending[name] = { ...entry, status: "confirmed" };
    } else {
      pending[name] = entry;
    }
  }
  return pending;
}

export function reduce(state: DashboardState, event: DashboardEvent): DashboardState {
  switch (event.kind) {
    case "cells":
      return { ...state, cells: event.cells };
    case "sensors":
      return {
        ...state,
        sensors: event.sensors,
        pending: confirmFromSensors(state, event.sensors),
      };
    case "metrics":
      return { ...state, metrics: event.metrics };
    case "alert": {
      if (state.alerts.some((a) => a.alert_id === event.alert.alert_id)) {
        // replayed or polled duplicate; still refreshes the cell highlight
        return {
          ...state,
          lastAlertAt: { ...state.lastAlertAt, [event.alert.cell]: event.receivedAt },
        };
      }
      return {
        ...state,
        alerts: [event.alert, ...state.alerts].slice(0, ALERT_RING_SIZE),
        lastAlertAt: { ...state.lastAlertAt, [event.alert.cell]: event.receivedAt },
      };
    }
    case "stream-status":
      return { ...state, stream: event.status };
    case "select-cell":
      return { ...state, selectedCell: event.cell };
    case "update-submitted":
      return withPending(state, event.sensorName, {
        sensorName: event.sensorName,
        submittedAt: event.at,
        status: "pending",
        awaitedVersion: null,
      });
    case "update-accepted": {
      const entry = state.pending[event.sensorName];
      if (!entry) return state;
      return withPending(state, event.sensorName, {
        ...entry,
        // the gateway replies only after the registry consumed the commit
        // offset (committed=true); otherwise hold pending until a sensors
        // refresh shows the awaited version
        status: event.receipt.committed ? "confirmed" : "pending",
        awaitedVersion: event.receipt.version,
      });
    }
    case "update-conflict": {
      const entry = state.pending[event.sensorName];
      if (!entry) return state;
      return withPending(state, event.sensorName, {
        ...entry,
        status: "conflict",
        currentVersion: event.currentVersion,
        message: event.message,
      });
    }
    case "update-invalid": {
      const entry = state.pending[event.sensorName];
      if (!entry) return state;
      return withPending(state, event.sensorName, {
        ...entry,
        status: "invalid",
        fieldErrors: event.fieldErrors,
      });
    }
    case "update-failed": {
      const entry = state.pending[event.sensorName];
      if (!entry) return state;
      return withPending(state, event.sensorName, {
        ...entry,
        status: "failed",
        message: event.message,
      });
    }
    case "update-dismissed":
      return withPending(state, event.sensorName, null);
  }
}

export type CellStatus = "ok" | "alerting" | "cold_start";

export function cellStatus(view: CellView, state: DashboardState,
                           nowMs: number): CellStatus {
  const last = state.lastAlertAt[view.cell];
  if (last !== undefined && nowMs - last <= ALERTING_HOLD_MS) return "alerting";
  const minCount = state.metrics?.cep_config.min_window_count
    ?? COLD_START_WINDOW_COUNT;
  if (view.window_count < minCount) return "cold_start";
  return "ok";
}

/** Replays a whole event log from scratch; tests use this for determinism. */
export function replay(events: DashboardEvent[]): DashboardState {
  return events.reduce(reduce, initialState());
}
