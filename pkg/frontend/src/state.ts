// Client-side session state: the server queue, session-local decisions,
// optimistic transitions with rollback, filters, and focus. The queue is
// rendered exactly in server order; filters only hide entries.

import { quadrantTag, type QuadrantTag } from "./quadrant.js";
import type {
  Decision,
  Metrics,
  OutcomeCode,
  QueueEntry,
  QueuePage,
  Status,
} from "./types.js";
import { OUTCOME_READY } from "./types.js";

export type View = "pending" | "decided" | "all";

export interface Filters {
  view: View;
  quadrant: QuadrantTag | "all";
  platform: string;
  demographic: string;
}

export interface PendingOp {
  entryId: string;
  kind: "decision" | "outcome";
  key: string;
  prevStatus: Status;
  queueIndex: number;
  decision?: Decision;
  note?: string;
  outcome?: OutcomeCode;
}

export interface Banner {
  kind: "conflict" | "offline" | "stale" | "error";
  text: string;
  retryOp?: PendingOp;
}

const START_FILTERS: Filters = {
  view: "pending",
  quadrant: "all",
  platform: "all",
  demographic: "all",
};

export class Store {
  entries: QueueEntry[] = []; // server order, pending only
  decided: QueueEntry[] = []; // session-local, in decision order
  cursor: string | null = null;
  pendingTotal: number | null = null;
  metrics: Metrics | null = null;
  trend: number[] = []; // found_rate samples seen this session
  filters: Filters = { ...START_FILTERS };
  focusId: string | null = null;
  banner: Banner | null = null;
  loading = true;
  reachable = true;

  private ops = new Map<string, PendingOp>();
  private listeners: (() => void)[] = [];

  subscribe(listener: () => void): void {
    this.listeners.push(listener);
  }

  private emit(): void {
    for (const listener of this.listeners) listener();
  }

  // ---- server data ------------------------------------------------------

  setQueuePage(page: QueuePage, append: boolean): void {
    const fresh = append ? [...this.entries, ...page.entries] : page.entries;
    // the server is the authority: a reappearing id leaves the session list
    const pendingIds = new Set(fresh.map((e) => e.id));
    this.decided = this.decided.filter((e) => !pendingIds.has(e.id));
    this.entries = fresh;
    this.cursor = page.cursor;
    if (page.pending_total !== null) this.pendingTotal = page.pending_total;
    this.loading = false;
    this.reachable = true;
    this.ensureFocus();
    this.emit();
  }

  setMetrics(metrics: Metrics): void {
    this.metrics = metrics;
    if (metrics.found_rate !== null) this.trend.push(metrics.found_rate);
    this.reachable = true;
    this.emit();
  }

  markUnreachable(): void {
    this.reachable = false;
    this.loading = false;
    this.banner = {
      kind: "stale",
      text: "Service unreachable. Showing last known data.",
    };
    this.emit();
  }

  // ---- optimistic transitions -------------------------------------------

  opFor(entryId: string, kind: PendingOp["kind"]): PendingOp | undefined {
    return this.ops.get(`${kind}:${entryId}`);
  }

  applyDecision(
    entryId: string,
    decision: Decision,
    key: string,
    note?: string,
  ): PendingOp | null {
    if (this.ops.has(`decision:${entryId}`)) return null; // already going out
    const index = this.entries.findIndex((e) => e.id === entryId);
    if (index < 0) return null;
    const entry = this.entries[index]!;
    if (entry.status !== "PendingReview") return null;
    const op: PendingOp = {
      entryId,
      kind: "decision",
      key,
      prevStatus: entry.status,
      queueIndex: index,
      decision,
      note,
    };
    this.ops.set(`decision:${entryId}`, op);
    this.entries.splice(index, 1);
    this.decided.push({ ...entry, status: decision });
    this.ensureFocus();
    this.emit();
    return op;
  }

  applyOutcome(
    entryId: string,
    outcome: OutcomeCode,
    key: string,
  ): PendingOp | null {
    if (this.ops.has(`outcome:${entryId}`)) return null;
    const index = this.decided.findIndex((e) => e.id === entryId);
    if (index < 0) return null;
    const entry = this.decided[index]!;
    if (!OUTCOME_READY.includes(entry.status)) return null;
    const op: PendingOp = {
      entryId,
      kind: "outcome",
      key,
      prevStatus: entry.status,
      queueIndex: index,
      outcome,
    };
    this.ops.set(`outcome:${entryId}`, op);
    this.decided[index] = { ...entry, status: "OutcomeRecorded" };
    this.emit();
    return op;
  }

  confirmOp(op: PendingOp, serverStatus: Status): void {
    this.ops.delete(`${op.kind}:${op.entryId}`);
    const held = this.decided.findIndex((e) => e.id === op.entryId);
    if (held >= 0) {
      this.decided[held] = { ...this.decided[held]!, status: serverStatus };
    }
    this.emit();
  }

  rollbackOp(op: PendingOp, reason: string): void {
    this.ops.delete(`${op.kind}:${op.entryId}`);
    const held = this.decided.findIndex((e) => e.id === op.entryId);
    if (held >= 0) {
      const entry = { ...this.decided[held]!, status: op.prevStatus };
      if (op.kind === "decision") {
        // back into the queue at its old slot: server order survives
        this.decided.splice(held, 1);
        const at = Math.min(op.queueIndex, this.entries.length);
        this.entries.splice(at, 0, entry);
      } else {
        this.decided[held] = entry;
      }
    }
    this.banner = { kind: "conflict", text: reason };
    this.ensureFocus();
    this.emit();
  }

  holdForRetry(op: PendingOp): void {
    // optimistic state stays; the banner offers to resend with the same key
    this.banner = {
      kind: "offline",
      text: `Could not reach the service for ${op.entryId}.`,
      retryOp: op,
    };
    this.emit();
  }

  // ---- filters, focus ----------------------------------------------------

  setFilter<K extends keyof Filters>(name: K, value: Filters[K]): void {
    this.filters[name] = value;
    this.ensureFocus();
    this.emit();
  }

  clearBanner(): void {
    this.banner = null;
    this.emit();
  }

  visible(): QueueEntry[] {
    const { view, quadrant, platform, demographic } = this.filters;
    let pool: QueueEntry[];
    if (view === "pending") pool = this.entries;
    else if (view === "decided") pool = this.decided;
    else pool = [...this.entries, ...this.decided];
    return pool.filter((e) => {
      if (quadrant !== "all") {
        if (quadrantTag(e, this.metrics?.quadrant) !== quadrant) return false;
      }
      if (platform !== "all" && e.alert.platform !== platform) return false;
      if (
        demographic !== "all" &&
        e.alert.gender !== demographic &&
        e.alert.age_band !== demographic
      ) {
        return false;
      }
      return true;
    });
  }

  focused(): QueueEntry | null {
    return this.visible().find((e) => e.id === this.focusId) ?? null;
  }

  moveFocus(step: number): void {
    const visible = this.visible();
    if (visible.length === 0) return;
    const at = visible.findIndex((e) => e.id === this.focusId);
    const next = at < 0 ? 0 : Math.min(Math.max(at + step, 0), visible.length - 1);
    this.focusId = visible[next]!.id;
    this.emit();
  }

  private ensureFocus(): void {
    const visible = this.visible();
    if (!visible.some((e) => e.id === this.focusId)) {
      this.focusId = visible.length ? visible[0]!.id : null;
    }
  }
}
