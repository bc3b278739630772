import { ConflictError, ValidationError } from "./api.js";
import type { ParameterUpdateBody } from "./api.js";
import type { DashboardEvent, DashboardState, PendingUpdate } from "./store.js";
import type { SensorParams, UpdateReceipt } from "./types.js";

// Calibration editor. The form shell is rendered once so refreshes never
// clobber in-progress input; update() only touches the sensor datalist, the
// version hint, the status rows and the inline error slots.

export type SubmitFn = (body: ParameterUpdateBody) => Promise<UpdateReceipt>;

const FIELD_NAMES = [
  "sensor_name", "quantity", "unit", "calibration_slope",
  "calibration_offset", "latitude", "longitude", "expected_version",
] as const;

function field(name: string, label: string, value = ""): string {
  return `<div class="field"><label>${label}`
    + `<input name="${name}" value="${value}" autocomplete="off"`
    + `${name === "sensor_name" ? ` list="sensor-names"` : ""}></label>`
    + `<span class="field-error" data-error-for="${name}"></span></div>`;
}

const FORM_HTML = `
<form class="params-form" novalidate>
  ${field("sensor_name", "sensor")}
  <datalist id="sensor-names"></datalist>
  <div class="field"><label>kind<select name="kind">
    <option value="analog">analog</option>
    <option value="digital">digital</option>
  </select></label><span class="field-error" data-error-for="kind"></span></div>
  ${field("quantity", "quantity", "temperature")}
  ${field("unit", "unit", "degC")}
  ${field("calibration_slope", "slope", "1.0")}
  ${field("calibration_offset", "offset", "0.0")}
  ${field("latitude", "latitude")}
  ${field("longitude", "longitude")}
  ${field("expected_version", "expected version")}
  <span class="version-hint" data-version-hint></span>
  <div class="field"><label class="inline">
    <input type="checkbox" name="create">create if missing</label></div>
  <button type="submit" class="apply">apply</button>
  <span class="field-error" data-error-for=""></span>
</form>
<div class="update-status"></div>
`;

function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

function statusRow(entry: PendingUpdate): string {
  const name = escapeHtml(entry.sensorName);
  const dismiss = `<button type="button" class="dismiss" `
    + `data-dismiss="${name}">dismiss</button>`;
  switch (entry.status) {
    case "pending":
      return `<div class="update-row pending" data-update-for="${name}">`
        + `<span class="badge pending">pending</span> ${name}: `
        + `awaiting commit confirmation</div>`;
    case "confirmed":
      return `<div class="update-row confirmed" data-update-for="${name}">`
        + `<span class="badge confirmed">confirmed</span> ${name} is now `
        + `v${entry.awaitedVersion ?? "?"} ${dismiss}</div>`;
    case "conflict":
      return `<div class="update-row conflict" data-update-for="${name}">`
        + `<span class="badge conflict">conflict</span> ${name}: `
        + `${escapeHtml(entry.message ?? "version mismatch")} `
        + `<button type="button" class="use-version" `
        + `data-use-version="${entry.currentVersion ?? 0}">`
        + `retry against v${entry.currentVersion ?? 0}</button> ${dismiss}</div>`;
    case "invalid": {
      const formLevel = entry.fieldErrors?.[""]
        ? ` ${escapeHtml(entry.fieldErrors[""])}` : "";
      return `<div class="update-row invalid" data-update-for="${name}">`
        + `<span class="badge invalid">rejected</span> ${name}: `
        + `fix the highlighted fields${formLevel} ${dismiss}</div>`;
    }
    case "failed":
      return `<div class="update-row failed" data-update-for="${name}">`
        + `<span class="badge failed">failed</span> ${name}: `
        + `${escapeHtml(entry.message ?? "request failed")} ${dismiss}</div>`;
  }
}

export class ParameterForm {
  private sensors: SensorParams[] = [];

  constructor(private container: HTMLElement,
              private submitFn: SubmitFn,
              private dispatch: (event: DashboardEvent) => void,
              private now: () => number = () => Date.now()) {
    container.innerHTML = FORM_HTML;
    this.form().addEventListener("submit", (event) => {
      event.preventDefault();
      void this.submit();
    });
    this.input("sensor_name").addEventListener("change", () => this.prefill());
    this.container.addEventListener("click", (event) => {
      const target = event.target as HTMLElement;
      const dismiss = target.getAttribute("data-dismiss");
      if (dismiss !== null) {
        this.dispatch({ kind: "update-dismissed", sensorName: dismiss });
      }
      const version = target.getAttribute("data-use-version");
      if (version !== null) this.input("expected_version").value = version;
    });
  }

  private form(): HTMLFormElement {
    return this.container.querySelector("form")!;
  }

  input(name: string): HTMLInputElement {
    return this.container.querySelector(`[name="${name}"]`)!;
  }

  private errorSlot(name: string): HTMLElement {
    return this.container.querySelector(`[data-error-for="${name}"]`)!;
  }

  /** Copies the registry's view of the chosen sensor into the form. */
  private prefill(): void {
    const name = this.input("sensor_name").value.trim();
    const sensor = this.sensors.find((s) => s.sensor_name === name);
    const create = this.input("create");
    if (sensor === undefined) {
      create.checked = true;
      this.input("expected_version").value = "";
      return;
    }
    create.checked = false;
    (this.container.querySelector(`[name="kind"]`) as HTMLSelectElement)
      .value = sensor.kind;
    this.input("quantity").value = sensor.quantity;
    this.input("unit").value = sensor.unit;
    this.input("calibration_slope").value = String(sensor.calibration_slope);
    this.input("calibration_offset").value = String(sensor.calibration_offset);
    this.input("latitude").value = String(sensor.latitude);
    this.input("longitude").value = String(sensor.longitude);
    this.input("expected_version").value = String(sensor.version);
  }

  private readBody(name: string): ParameterUpdateBody {
    const num = (f: string) => Number(this.input(f).value);
    const body: ParameterUpdateBody = {
      sensor_name: name,
      kind: (this.container.querySelector(`[name="kind"]`) as HTMLSelectElement)
        .value as "analog" | "digital",
      quantity: this.input("quantity").value.trim(),
      unit: this.input("unit").value.trim(),
      calibration_slope: num("calibration_slope"),
      calibration_offset: num("calibration_offset"),
      latitude: num("latitude"),
      longitude: num("longitude"),
    };
    const expected = this.input("expected_version").value.trim();
    if (expected !== "") body.expected_version = Number(expected);
    if (this.input("create").checked) body.create = true;
    return body;
  }

  async submit(): Promise<void> {
    const name = this.input("sensor_name").value.trim();
    if (name === "") {
      this.errorSlot("sensor_name").textContent = "required";
      return;
    }
    this.dispatch({ kind: "update-submitted", sensorName: name, at: this.now() });
    try {
      const receipt = await this.submitFn(this.readBody(name));
      this.dispatch({ kind: "update-accepted", sensorName: name, receipt });
    } catch (error) {
      if (error instanceof ConflictError) {
        this.dispatch({
          kind: "update-conflict",
          sensorName: name,
          currentVersion: error.currentVersion,
          message: error.message,
        });
      } else if (error instanceof ValidationError) {
        this.dispatch({
          kind: "update-invalid",
          sensorName: name,
          fieldErrors: error.fieldErrors,
        });
      } else {
        this.dispatch({
          kind: "update-failed",
          sensorName: name,
          message: error instanceof Error ? error.message : String(error),
        });
      }
    }
  }

  update(state: DashboardState): void {
    this.sensors = state.sensors;
    const datalist = this.container.querySelector("#sensor-names")!;
    datalist.innerHTML = state.sensors
      .map((s) => `<option value="${escapeHtml(s.sensor_name)}"></option>`)
      .join("");

    const current = this.input("sensor_name").value.trim();
    const known = this.sensors.find((s) => s.sensor_name === current);
    this.container.querySelector("[data-version-hint]")!.textContent =
      known === undefined ? "" : `registry is at v${known.version}`;

    const statusBox = this.container.querySelector(".update-status")!;
    statusBox.innerHTML = Object.values(state.pending)
      .sort((a, b) => a.submittedAt - b.submittedAt)
      .map(statusRow)
      .join("");

    for (const fieldName of FIELD_NAMES) {
      this.errorSlot(fieldName).textContent = "";
    }
    this.errorSlot("").textContent = "";
    const entry = state.pending[current];
    if (entry?.status === "invalid" && entry.fieldErrors) {
      for (const [fieldName, message] of Object.entries(entry.fieldErrors)) {
        const slot = this.container.querySelector(
          `[data-error-for="${fieldName}"]`,
        );
        if (slot) slot.textContent = message;
      }
    }
  }
}
