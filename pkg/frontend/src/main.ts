import { Api, ApiError } from "./api.js";
import { createApp } from "./app.js";
import { AlertStream } from "./stream.js";

// Entry point: ask for the gateway token once per browser session, then hand
// the page to createApp. The token lives in sessionStorage only.

const TOKEN_KEY = "urbanflow_token";

export function showLogin(root: HTMLElement): void {
  root.innerHTML = `
<div class="login">
  <h1>urbanflow</h1>
  <form class="login-form">
    <label>api token
      <input type="password" name="token" autocomplete="off"></label>
    <button type="submit">open dashboard</button>
  </form>
</div>`;
  root.querySelector("form")!.addEventListener("submit", (event) => {
    event.preventDefault();
    const input = root.querySelector(`[name="token"]`) as HTMLInputElement;
    const token = input.value.trim();
    if (token === "") return;
    sessionStorage.setItem(TOKEN_KEY, token);
    boot(root, token);
  });
}

function boot(root: HTMLElement, token: string): void {
  const api = new Api("", token);
  const app = createApp(root, {
    api,
    makeStream: (onEvent) => new AlertStream({
      url: api.streamUrl(),
      onEvent,
      poll: () => api.history(20).then((page) => page.alerts),
    }),
  });
  // a 401 means the stored token went stale; drop it and ask again
  void api.metrics().catch((error: unknown) => {
    if (error instanceof ApiError && error.status === 401) {
      sessionStorage.removeItem(TOKEN_KEY);
      app.stop();
      showLogin(root);
    }
  });
}

export function start(root: HTMLElement): void {
  const token = sessionStorage.getItem(TOKEN_KEY);
  if (token !== null && token !== "") boot(root, token);
  else showLogin(root);
}

const rootEl = document.getElementById("app");
if (rootEl !== null) start(rootEl);
