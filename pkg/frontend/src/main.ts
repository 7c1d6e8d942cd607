// Wiring: boot fetches, delegated events, keyboard review flow.

import { Client, ConflictError, newIdempotencyKey, Unreachable } from "./api.js";
import { render } from "./render.js";
import { Store, type Filters, type PendingOp } from "./state.js";
import type { Decision, OutcomeCode, Status } from "./types.js";
import { OUTCOME_CODES } from "./types.js";

export interface App {
  store: Store;
  refresh: () => Promise<void>;
  decide: (id: string, decision: Decision, note?: string) => Promise<void>;
  recordOutcome: (id: string, code: OutcomeCode) => Promise<void>;
  retryOp: (op: PendingOp) => Promise<void>;
  loadMore: () => Promise<void>;
}

export async function boot(
  root: HTMLElement,
  client: Client = new Client(),
  pollMs = 0,
): Promise<App> {
  const store = new Store();
  store.subscribe(() => render(root, store));

  async function refreshMetrics(): Promise<void> {
    try {
      store.setMetrics(await client.getMetrics());
    } catch {
      store.markUnreachable();
    }
  }

  async function refresh(): Promise<void> {
    try {
      store.setQueuePage(await client.getQueue(), false);
    } catch {
      store.markUnreachable();
      return;
    }
    await refreshMetrics();
  }

  async function loadMore(): Promise<void> {
    if (!store.cursor) return;
    try {
      store.setQueuePage(await client.getQueue(store.cursor), true);
    } catch {
      store.markUnreachable();
    }
  }

  async function settle(op: PendingOp, task: Promise<{ status: string }>) {
    try {
      const reply = await task;
      store.confirmOp(op, reply.status as Status);
      await refreshMetrics();
    } catch (err) {
      if (err instanceof ConflictError) {
        store.rollbackOp(op, err.detail);
      } else if (err instanceof Unreachable) {
        store.holdForRetry(op);
      } else {
        store.rollbackOp(op, String(err));
      }
    }
  }

  async function decide(
    id: string,
    decision: Decision,
    note?: string,
  ): Promise<void> {
    const op = store.applyDecision(id, decision, newIdempotencyKey(), note);
    if (!op) return; // illegal or already in flight: no second event
    await settle(op, client.submitDecision(id, decision, op.key, op.note));
  }

  async function recordOutcome(id: string, code: OutcomeCode): Promise<void> {
    const op = store.applyOutcome(id, code, newIdempotencyKey());
    if (!op) return;
    await settle(op, client.submitOutcome(id, code, op.key));
  }

  async function retryOp(op: PendingOp): Promise<void> {
    store.clearBanner();
    const task =
      op.kind === "decision"
        ? client.submitDecision(op.entryId, op.decision!, op.key, op.note)
        : client.submitOutcome(op.entryId, op.outcome!, op.key);
    await settle(op, task);
  }

  const app: App = { store, refresh, decide, recordOutcome, retryOp, loadMore };

  root.addEventListener("click", (event) => {
    const target = event.target as HTMLElement | null;
    const button = target?.closest<HTMLElement>("[data-action]");
    if (!button) {
      const cardEl = target?.closest<HTMLElement>(".card");
      if (cardEl?.dataset.id) {
        store.focusId = cardEl.dataset.id;
        store.moveFocus(0);
      }
      return;
    }
    const cardEl = button.closest<HTMLElement>(".card");
    const id = cardEl?.dataset.id;
    switch (button.dataset.action) {
      case "refer":
      case "dismiss": {
        if (!id) return;
        const note =
          cardEl?.querySelector<HTMLInputElement>("[data-note]")?.value ?? "";
        void decide(
          id,
          button.dataset.action === "refer" ? "Referred" : "Dismissed",
          note || undefined,
        );
        return;
      }
      case "outcome": {
        if (!id) return;
        const code = cardEl?.querySelector<HTMLSelectElement>(
          "[data-outcome-code]",
        )?.value as OutcomeCode | undefined;
        void recordOutcome(id, code ?? "PersonFound");
        return;
      }
      case "load-more":
        void loadMore();
        return;
      case "reload":
        store.clearBanner();
        void refresh();
        return;
      case "retry-op": {
        const op = store.banner?.retryOp;
        if (op) void retryOp(op);
        return;
      }
      case "dismiss-banner":
        store.clearBanner();
        return;
    }
  });

  root.addEventListener("change", (event) => {
    const select = event.target as HTMLSelectElement | null;
    const name = select?.dataset.filter as keyof Filters | undefined;
    if (select && name) {
      store.setFilter(name, select.value as never);
    }
  });

  document.addEventListener("keydown", (event) => {
    const at = event.target as HTMLElement | null;
    if (at && ["INPUT", "SELECT", "TEXTAREA"].includes(at.tagName)) return;
    const focused = store.focused();
    switch (event.key) {
      case "j":
      case "ArrowDown":
        store.moveFocus(1);
        event.preventDefault();
        break;
      case "k":
      case "ArrowUp":
        store.moveFocus(-1);
        event.preventDefault();
        break;
      case "r":
        if (focused) void decide(focused.id, "Referred");
        break;
      case "d":
        if (focused) void decide(focused.id, "Dismissed");
        break;
      case "o":
      case "1":
        if (focused) void recordOutcome(focused.id, "PersonFound");
        break;
      case "2":
        if (focused) void recordOutcome(focused.id, "PersonNotFound");
        break;
      case "Escape":
        store.clearBanner();
        break;
    }
  });

  render(root, store);
  await refresh();
  if (pollMs > 0) {
    setInterval(() => {
      void refreshMetrics();
    }, pollMs);
  }
  return app;
}

// real page boot; tests mount their own root and call boot() directly
const mount = typeof document !== "undefined"
  ? document.getElementById("app")
  : null;
if (mount) {
  void boot(mount, new Client(), 30_000);
}

export { Client, OUTCOME_CODES };
