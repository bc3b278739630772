// Wire shapes of the gateway's HTTP/event-stream API.

export type Violation = {
  event_time: number;
  value: number;
  rolling_average: number;
};

export type Alert = {
  alert_id: string;
  cell: string;
  sensor_name: string;
  violations: Violation[];
  emitted_at: number;
};

export type CellView = {
  cell: string;
  q: number;
  r: number;
  center_latitude: number;
  center_longitude: number;
  hex_circumradius_m: number;
  sensors: number;
  window_count: number;
  rolling_average: number | null;
  newest_event_time: number;
  violations_total: number;
  alerts_total: number;
  late_dropped: number;
  dedup_dropped: number;
  updated_at: number;
};

export type SensorParams = {
  sensor_name: string;
  kind: "analog" | "digital";
  quantity: string;
  unit: string;
  calibration_slope: number;
  calibration_offset: number;
  latitude: number;
  longitude: number;
  version: number;
};

export type CepSettings = {
  band_delta: number;
  window_seconds: number;
  pattern_window_seconds: number;
  min_window_count: number;
  allowed_lateness_seconds: number;
};

export type Metrics = {
  uptime_seconds: number;
  cep_config: CepSettings;
  topics: Record<string, Record<string, number>>;
  jobs: Record<string, unknown>;
  enrichment: { enriched: number; dead_lettered: number };
  cep: {
    violations_total: number;
    alerts_total: number;
    late_dropped: number;
    dedup_dropped: number;
  };
  registry: Record<string, number>;
};

export type UpdateReceipt = {
  version: number;
  partition: number;
  offset: number;
  committed: boolean;
};

export type HistoryPage = {
  alerts: Alert[];
  next_token: string | null;
};
