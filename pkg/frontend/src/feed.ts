import type { Alert } from "./types.js";

// Renders the live alert feed as an HTML string, newest first. The store
// already deduplicates by alert_id, so every row here is a distinct alert.

function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

export function formatEventTime(epochSeconds: number): string {
  return new Date(epochSeconds * 1000).toISOString().slice(11, 19);
}

export function renderAlertRow(alert: Alert): string {
  const last = alert.violations[alert.violations.length - 1];
  const detail = last === undefined
    ? ""
    : `last ${last.value.toFixed(3)} vs avg ${last.rolling_average.toFixed(3)}`;
  return `<li class="alert-row" data-alert-id="${escapeHtml(alert.alert_id)}">`
    + `<span class="alert-time">${formatEventTime(alert.emitted_at)}</span>`
    + `<span class="alert-sensor">${escapeHtml(alert.sensor_name)}</span>`
    + `<span class="alert-cell" data-cell="${escapeHtml(alert.cell)}">`
    + `${escapeHtml(alert.cell)}</span>`
    + `<span class="alert-detail">${alert.violations.length} violations`
    + `${detail ? ", " + detail : ""}</span>`
    + `</li>`;
}

export function renderAlertFeed(alerts: Alert[]): string {
  if (alerts.length === 0) {
    return `<p class="feed-empty">no alerts yet</p>`;
  }
  return `<ul class="alert-list">${alerts.map(renderAlertRow).join("")}</ul>`;
}
