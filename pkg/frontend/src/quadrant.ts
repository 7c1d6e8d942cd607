// Quadrant tags and the duplicate heuristic, both derived purely from
// served fields: the thresholds come from /metrics, the coordinates and
// timestamps from the queue payload.

import type { QuadrantCells, Quadrant, QueueEntry } from "./types.js";

export type QuadrantTag = keyof QuadrantCells;

export const QUADRANT_LABELS: Record<QuadrantTag, string> = {
  top_left: "referred / unlikely",
  top_right: "referred / likely",
  bottom_left: "skipped / unlikely",
  bottom_right: "skipped / likely",
};

export function quadrantTag(
  entry: QueueEntry,
  quadrant: Quadrant | null | undefined,
): QuadrantTag | null {
  if (!quadrant || entry.po_score == null || entry.ref_score == null) {
    return null;
  }
  const above = entry.ref_score >= quadrant.ref_threshold;
  const right = entry.po_score >= quadrant.po_threshold;
  if (above) return right ? "top_right" : "top_left";
  return right ? "bottom_right" : "bottom_left";
}

// ~150 m at London latitudes, and a two day window
const COORD_EPS = 0.0015;
const WINDOW_MS = 48 * 3600 * 1000;

// Flags entries that sit on top of an earlier entry from the same LSP.
// Purely cosmetic: the server's features do the real duplicate handling.
export function duplicateIds(entries: QueueEntry[]): Set<string> {
  const flagged = new Set<string>();
  const seen: { id: string; lat: number; lon: number; at: number }[] = [];
  const rows = entries
    .map((e) => ({
      id: e.id,
      lsp: e.alert.lsp_id,
      lat: Number.parseFloat(e.alert.latitude),
      lon: Number.parseFloat(e.alert.longitude),
      at: Date.parse(e.created_at),
    }))
    .sort((a, b) => a.at - b.at);
  const byLsp = new Map<string, typeof seen>();
  for (const row of rows) {
    if (!Number.isFinite(row.lat) || !Number.isFinite(row.at)) continue;
    const prior = byLsp.get(row.lsp) ?? [];
    const near = prior.some(
      (p) =>
        Math.abs(p.lat - row.lat) < COORD_EPS &&
        Math.abs(p.lon - row.lon) < COORD_EPS &&
        row.at - p.at <= WINDOW_MS,
    );
    if (near) flagged.add(row.id);
    prior.push({ id: row.id, lat: row.lat, lon: row.lon, at: row.at });
    byLsp.set(row.lsp, prior);
  }
  return flagged;
}
