// Thin client over the service endpoints. Submits are deduplicated while
// in flight and retried through transient network failures with a stable
// idempotency key, so a double click or a flaky link still lands exactly
// one server event.

import type {
  Decision,
  Health,
  Metrics,
  OutcomeCode,
  QueuePage,
  TransitionReply,
} from "./types.js";

export type Transport = (
  url: string,
  init?: RequestInit,
) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
  }
}

export class ConflictError extends ApiError {
  constructor(detail: string) {
    super(409, detail);
  }
}

export class Unreachable extends Error {}

export function newIdempotencyKey(): string {
  const c = globalThis.crypto as Crypto | undefined;
  if (c?.randomUUID) return c.randomUUID();
  return `k-${Date.now().toString(36)}-${Math.random().toString(36).slice(2)}`;
}

async function fail(response: Response): Promise<never> {
  let detail = response.statusText;
  try {
    const body = await response.json();
    if (body && typeof body.detail === "string") detail = body.detail;
  } catch {
    // non-JSON error body, keep the status text
  }
  if (response.status === 409) throw new ConflictError(detail);
  throw new ApiError(response.status, detail);
}

const RETRIES = 3;
const BACKOFF_MS = 80;

export class Client {
  private inflight = new Map<string, Promise<TransitionReply>>();

  constructor(
    private transport: Transport = (url, init) => fetch(url, init),
    private base = "",
    private backoffMs = BACKOFF_MS,
  ) {}

  private async getJson<T>(path: string): Promise<T> {
    let response: Response;
    try {
      response = await this.transport(this.base + path);
    } catch {
      throw new Unreachable(path);
    }
    if (!response.ok) await fail(response);
    return (await response.json()) as T;
  }

  health(): Promise<Health> {
    return this.getJson<Health>("/healthz");
  }

  getQueue(cursor?: string | null, limit = 50): Promise<QueuePage> {
    const params = new URLSearchParams({ limit: String(limit) });
    if (cursor) params.set("cursor", cursor);
    return this.getJson<QueuePage>(`/queue?${params}`);
  }

  getMetrics(): Promise<Metrics> {
    return this.getJson<Metrics>("/metrics");
  }

  submitDecision(
    id: string,
    decision: Decision,
    key: string,
    note?: string,
  ): Promise<TransitionReply> {
    const body: Record<string, string> = { decision, idempotency_key: key };
    if (note) body.note = note;
    return this.submit(id, "decision", body);
  }

  submitOutcome(
    id: string,
    code: OutcomeCode,
    key: string,
  ): Promise<TransitionReply> {
    return this.submit(id, "outcome", {
      outcome_code: code,
      idempotency_key: key,
    });
  }

  // One in-flight request per (alert, endpoint): repeats share the promise.
  private submit(
    id: string,
    endpoint: "decision" | "outcome",
    body: Record<string, string>,
  ): Promise<TransitionReply> {
    const slot = `${endpoint}:${id}`;
    const existing = this.inflight.get(slot);
    if (existing) return existing;
    const task = this.post(`/alerts/${id}/${endpoint}`, body).finally(() =>
      this.inflight.delete(slot),
    );
    this.inflight.set(slot, task);
    return task;
  }

  private async post(
    path: string,
    body: Record<string, string>,
  ): Promise<TransitionReply> {
    let lastFailure: unknown;
    for (let attempt = 0; attempt < RETRIES; attempt++) {
      if (attempt > 0) {
        await new Promise((r) => setTimeout(r, this.backoffMs * attempt));
      }
      let response: Response;
      try {
        response = await this.transport(this.base + path, {
          method: "POST",
          headers: { "content-type": "application/json" },
          body: JSON.stringify(body),
        });
      } catch (err) {
        lastFailure = err; // transient: same idempotency key goes out again
        continue;
      }
      if (!response.ok) await fail(response);
      return (await response.json()) as TransitionReply;
    }
    throw new Unreachable(String(lastFailure));
  }
}
