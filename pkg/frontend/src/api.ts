import type {
  CellView, HistoryPage, Metrics, SensorParams, UpdateReceipt,
} from "./types.js";

/** Non-2xx response with the decoded error payload attached. */
export class ApiError extends Error {
  constructor(public status: number, public detail: unknown) {
    super(typeof detail === "string" ? detail : `request failed (${status})`);
  }
}

/** 409: someone else updated the sensor first. */
export class ConflictError extends ApiError {
  constructor(detail: unknown, public currentVersion: number) {
    super(409, detail);
  }
}

/** 422: per-field messages extracted from the validation payload. */
export class ValidationError extends ApiError {
  constructor(detail: unknown, public fieldErrors: Record<string, string>) {
    super(422, detail);
  }
}

function fieldErrorsFrom(detail: unknown): Record<string, string> {
  // FastAPI model validation sends [{loc: [..., field], msg, ...}];
  // domain validation sends a plain string that names no field.
  const errors: Record<string, string> = {};
  if (Array.isArray(detail)) {
    for (const item of detail) {
      const loc = (item as { loc?: unknown[] }).loc ?? [];
      const field = String(loc[loc.length - 1] ?? "");
      if (field) errors[field] = String((item as { msg?: string }).msg ?? "invalid");
    }
  } else if (typeof detail === "string") {
    errors[""] = detail;
  }
  return errors;
}

export type ParameterUpdateBody = Omit<SensorParams, "version"> & {
  expected_version?: number;
  create?: boolean;
};

export class Api {
  constructor(private base: string = "", private token: string | null = null) {}

  private headers(): Record<string, string> {
    const h: Record<string, string> = { "Content-Type": "application/json" };
    if (this.token) h["Authorization"] = `Bearer ${this.token}`;
    return h;
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const response = await fetch(this.base + path, {
      method,
      headers: this.headers(),
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    const payload = await response.json().catch(() => null);
    if (response.ok) return payload as T;
    const detail = (payload as { detail?: unknown; current_version?: number }) ?? {};
    if (response.status === 409) {
      throw new ConflictError(detail.detail, detail.current_version ?? 0);
    }
    if (response.status === 422) {
      throw new ValidationError(detail.detail, fieldErrorsFrom(detail.detail));
    }
    throw new ApiError(response.status, detail.detail);
  }

  cells(): Promise<CellView[]> {
    return this.request("GET", "/api/cells");
  }

  sensors(): Promise<SensorParams[]> {
    return this.request("GET", "/api/sensors");
  }

  metrics(): Promise<Metrics> {
    return this.request("GET", "/api/metrics");
  }

  history(limit = 50): Promise<HistoryPage> {
    return this.request("GET", `/api/history?limit=${limit}`);
  }

  submitParameters(body: ParameterUpdateBody): Promise<UpdateReceipt> {
    return this.request("POST", "/api/parameters", body);
  }

  /** URL for the EventSource, which cannot set an Authorization header. */
  streamUrl(): string {
    const query = this.token ? `?token=${encodeURIComponent(this.token)}` : "";
    return `${this.base}/api/alerts/stream${query}`;
  }
}
