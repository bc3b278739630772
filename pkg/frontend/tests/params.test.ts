import { expect, test } from "vitest";

import { ConflictError, ValidationError } from "../src/api.js";
import type { ParameterUpdateBody } from "../src/api.js";
import { ParameterForm } from "../src/params.js";
import { initialState, reduce } from "../src/store.js";
import type { DashboardState } from "../src/store.js";
import type { SensorParams, UpdateReceipt } from "../src/types.js";
import { flush } from "./helpers.js";

type SubmitFn = (body: ParameterUpdateBody) => Promise<UpdateReceipt>;

function makeHarness(submitFn: SubmitFn) {
  const container = document.createElement("div");
  document.body.appendChild(container);
  let state: DashboardState = initialState();
  const harness = {
    container,
    form: null as unknown as ParameterForm,
    getState: () => state,
    dispatch: (event: Parameters<typeof reduce>[1]) => {
      state = reduce(state, event);
      harness.form.update(state);
    },
    setInput(name: string, value: string) {
      harness.form.input(name).value = value;
    },
    click(selector: string) {
      const el = container.querySelector(selector) as HTMLElement;
      el.dispatchEvent(new MouseEvent("click", { bubbles: true }));
    },
  };
  harness.form = new ParameterForm(container, submitFn,
                                   (e) => harness.dispatch(e), () => 1234);
  harness.form.update(state);
  return harness;
}

function knownSensor(version = 3): SensorParams {
  return {
    sensor_name: "s-1",
    kind: "analog",
    quantity: "temperature",
    unit: "degC",
    calibration_slope: 2.5,
    calibration_offset: -1.0,
    latitude: 52.51,
    longitude: 13.41,
    version,
  };
}

test("a submitted edit shows pending and then a confirmed badge", async () => {
  const bodies: ParameterUpdateBody[] = [];
  const h = makeHarness((body) => {
    bodies.push(body);
    return Promise.resolve({ version: 2, partition: 0, offset: 5, committed: true });
  });
  h.setInput("sensor_name", "s-9");
  h.setInput("latitude", "52.5");
  h.setInput("longitude", "13.4");
  h.form.input("create").checked = true;

  await h.form.submit();

  expect(bodies).toHaveLength(1);
  expect(bodies[0]!.sensor_name).toBe("s-9");
  expect(bodies[0]!.create).toBe(true);
  expect(bodies[0]!.calibration_slope).toBe(1.0);
  const row = h.container.querySelector(".update-row.confirmed");
  expect(row).not.toBeNull();
  expect(row!.textContent).toContain("v2");
});

test("the submit event on the form element drives the same path", async () => {
  const h = makeHarness(() => Promise.resolve(
    { version: 1, partition: 0, offset: 0, committed: true },
  ));
  h.setInput("sensor_name", "s-2");
  h.setInput("latitude", "52.5");
  h.setInput("longitude", "13.4");
  h.container.querySelector("form")!
    .dispatchEvent(new Event("submit", { cancelable: true, bubbles: true }));
  await flush();
  expect(h.container.querySelector(".update-row.confirmed")).not.toBeNull();
});

test("validation rejections render per-field messages inline", async () => {
  const h = makeHarness(() => Promise.reject(new ValidationError(
    [{ loc: ["body", "latitude"], msg: "Input should be a valid number" }],
    { latitude: "Input should be a valid number" },
  )));
  h.setInput("sensor_name", "s-1");
  h.setInput("latitude", "not-a-number");
  h.setInput("longitude", "13.4");

  await h.form.submit();

  expect(h.container.querySelector(".update-row.invalid")).not.toBeNull();
  const slot = h.container.querySelector(`[data-error-for="latitude"]`);
  expect(slot!.textContent).toBe("Input should be a valid number");
  // the other slots stay clean
  expect(h.container.querySelector(`[data-error-for="longitude"]`)!.textContent)
    .toBe("");
});

test("form-level validation messages land in the unnamed slot", async () => {
  const h = makeHarness(() => Promise.reject(new ValidationError(
    "calibration_slope must be finite",
    { "": "calibration_slope must be finite" },
  )));
  h.setInput("sensor_name", "s-1");
  await h.form.submit();
  expect(h.container.querySelector(`[data-error-for=""]`)!.textContent)
    .toBe("calibration_slope must be finite");
});

test("a version conflict shows the current version and offers a retry", async () => {
  const h = makeHarness(() => Promise.reject(
    new ConflictError("version conflict: expected 3, registry has 7", 7),
  ));
  h.setInput("sensor_name", "s-1");
  h.setInput("expected_version", "3");

  await h.form.submit();

  const row = h.container.querySelector(".update-row.conflict");
  expect(row).not.toBeNull();
  expect(row!.textContent).toContain("registry has 7");
  expect(row!.textContent).toContain("retry against v7");

  h.click("[data-use-version]");
  expect(h.form.input("expected_version").value).toBe("7");
});

test("network failures surface as a failed row and can be dismissed", async () => {
  const h = makeHarness(() => Promise.reject(new Error("connection refused")));
  h.setInput("sensor_name", "s-1");
  await h.form.submit();

  const row = h.container.querySelector(".update-row.failed");
  expect(row).not.toBeNull();
  expect(row!.textContent).toContain("connection refused");

  h.click(".dismiss");
  expect(h.container.querySelector(".update-row")).toBeNull();
  expect(h.getState().pending["s-1"]).toBeUndefined();
});

test("an empty sensor name never reaches the gateway", async () => {
  let calls = 0;
  const h = makeHarness(() => {
    calls += 1;
    return Promise.resolve({ version: 1, partition: 0, offset: 0, committed: true });
  });
  await h.form.submit();
  expect(calls).toBe(0);
  expect(h.getState().pending).toEqual({});
  expect(h.container.querySelector(`[data-error-for="sensor_name"]`)!.textContent)
    .toBe("required");
});

test("picking a known sensor prefills its registry values", () => {
  const h = makeHarness(() => Promise.reject(new Error("unused")));
  h.dispatch({ kind: "sensors", sensors: [knownSensor(3)] });

  h.setInput("sensor_name", "s-1");
  h.form.input("sensor_name").dispatchEvent(new Event("change"));

  expect(h.form.input("calibration_slope").value).toBe("2.5");
  expect(h.form.input("calibration_offset").value).toBe("-1");
  expect(h.form.input("expected_version").value).toBe("3");
  expect(h.form.input("create").checked).toBe(false);

  h.form.update(h.getState());
  expect(h.container.querySelector("[data-version-hint]")!.textContent)
    .toBe("registry is at v3");
});

test("an unknown sensor name flips the form into create mode", () => {
  const h = makeHarness(() => Promise.reject(new Error("unused")));
  h.dispatch({ kind: "sensors", sensors: [knownSensor()] });
  h.setInput("sensor_name", "brand-new");
  h.form.input("sensor_name").dispatchEvent(new Event("change"));
  expect(h.form.input("create").checked).toBe(true);
  expect(h.form.input("expected_version").value).toBe("");
});
