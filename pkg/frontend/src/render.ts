// DOM painting. Full repaint per state change at queue-page scale; note
// drafts and select choices are carried across repaints by hand.

import { duplicateIds, quadrantTag, QUADRANT_LABELS } from "./quadrant.js";
import type { QuadrantTag } from "./quadrant.js";
import type { Store } from "./state.js";
import type { BiasRow, Metrics, QueueEntry } from "./types.js";
import { OUTCOME_CODES, OUTCOME_READY } from "./types.js";

function cssEscape(value: string): string {
  const css = (globalThis as { CSS?: { escape?: (v: string) => string } }).CSS;
  if (css?.escape) return css.escape(value);
  return value.replace(/["\\]/g, "\\$&");
}

function esc(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

function clip(text: string, limit = 110): string {
  return text.length <= limit ? text : `${text.slice(0, limit - 1)}…`;
}

const score = (value: number | null): string =>
  value == null ? "–" : value.toFixed(3);

const percent = (value: number | null): string =>
  value == null ? "insufficient data" : `${(100 * value).toFixed(1)}%`;

function card(
  entry: QueueEntry,
  store: Store,
  duplicate: boolean,
  focused: boolean,
): string {
  const tag = quadrantTag(entry, store.metrics?.quadrant);
  const canDecide = entry.status === "PendingReview";
  const canOutcome = OUTCOME_READY.includes(entry.status);
  const options = OUTCOME_CODES.map(
    (code) => `<option value="${code}">${code}</option>`,
  ).join("");
  return `
<article class="card${focused ? " focused" : ""}" data-id="${esc(entry.id)}"
         tabindex="-1">
  <div class="card-head">
    <span class="score-badge" data-value="${entry.po_score ?? ""}"
          title="positive outcome score">${score(entry.po_score)}</span>
    <span class="ref-badge" data-value="${entry.ref_score ?? ""}"
          title="referral score">ref ${score(entry.ref_score)}</span>
    ${tag ? `<span class="quad-tag" data-tag="${tag}">${QUADRANT_LABELS[tag]}</span>` : ""}
    ${duplicate ? `<span class="dup-flag">possible duplicate</span>` : ""}
    ${entry.auto_referral ? `<span class="auto-chip">auto</span>` : ""}
    <span class="status-chip" data-status="${entry.status}">${entry.status}</span>
  </div>
  <div class="chips">
    <span class="chip">${esc(entry.alert.gender)}</span>
    <span class="chip">${esc(entry.alert.age_band)}</span>
    <span class="chip">${esc(entry.alert.platform)}</span>
    <span class="chip chip-dim">${esc(entry.alert.lsp_id)}</span>
    <span class="chip chip-dim">${esc(entry.created_at)}</span>
  </div>
  <p class="snippet">${esc(clip(entry.alert.location_text))}</p>
  <p class="snippet">${esc(clip(entry.alert.appearance_text))}</p>
  <p class="snippet snippet-concern">${esc(clip(entry.alert.concerns_text))}</p>
  <div class="card-actions">
    <button data-action="refer" ${canDecide ? "" : "disabled"}>Refer (r)</button>
    <button data-action="dismiss" ${canDecide ? "" : "disabled"}>Dismiss (d)</button>
    <input class="note" data-note placeholder="note"
           ${canDecide ? "" : "disabled"}>
    <select class="outcome-select" data-outcome-code
            ${canOutcome ? "" : "disabled"}>${options}</select>
    <button data-action="outcome" ${canOutcome ? "" : "disabled"}>
      Record outcome (o)</button>
  </div>
</article>`;
}

function filterBar(store: Store): string {
  const option = (value: string, current: string, label?: string) =>
    `<option value="${esc(value)}"${value === current ? " selected" : ""}>` +
    `${esc(label ?? value)}</option>`;
  const pool = [...store.entries, ...store.decided];
  const platforms = [...new Set(pool.map((e) => e.alert.platform))].sort();
  const demographics = [
    ...new Set(pool.flatMap((e) => [e.alert.gender, e.alert.age_band])),
  ].sort();
  const quadrants = Object.keys(QUADRANT_LABELS) as QuadrantTag[];
  return `
<div id="filters">
  <select data-filter="view">
    ${option("pending", store.filters.view)}
    ${option("decided", store.filters.view)}
    ${option("all", store.filters.view)}
  </select>
  <select data-filter="quadrant">
    ${option("all", store.filters.quadrant, "any quadrant")}
    ${quadrants
      .map((q) => option(q, store.filters.quadrant, QUADRANT_LABELS[q]))
      .join("")}
  </select>
  <select data-filter="platform">
    ${option("all", store.filters.platform, "any platform")}
    ${platforms.map((p) => option(p, store.filters.platform)).join("")}
  </select>
  <select data-filter="demographic">
    ${option("all", store.filters.demographic, "any demographic")}
    ${demographics
      .map((d) => option(d, store.filters.demographic))
      .join("")}
  </select>
</div>`;
}

function tiles(metrics: Metrics | null): string {
  const tile = (
    name: string,
    label: string,
    value: number | null | undefined,
    text: string,
  ) => `
  <div class="tile${value == null ? " tile-missing" : ""}" data-name="${name}"
       data-value="${value ?? ""}">
    <div class="tile-value">${text}</div>
    <div class="tile-label">${label}</div>
  </div>`;
  if (!metrics) {
    return `<div id="tiles">${tile("found-rate", "found rate", null, "insufficient data")}</div>`;
  }
  return `<div id="tiles">
    ${tile("found-rate", "found rate", metrics.found_rate, percent(metrics.found_rate))}
    ${tile("queue-depth", "pending", metrics.queue_depth, String(metrics.queue_depth))}
    ${tile("referred", "referred", metrics.referred_total, String(metrics.referred_total))}
    ${tile("outcomes", "outcomes", metrics.outcomes_recorded, String(metrics.outcomes_recorded))}
    ${tile(
      "auto-threshold",
      "auto-refer at",
      metrics.auto_referral_threshold,
      metrics.auto_referral_threshold == null
        ? "off"
        : metrics.auto_referral_threshold.toFixed(3),
    )}
  </div>`;
}

function trend(samples: number[]): string {
  if (samples.length < 2) {
    return `<div id="trend" class="panel-missing">found-rate trend: insufficient data</div>`;
  }
  const w = 220;
  const h = 48;
  const step = w / (samples.length - 1);
  const points = samples
    .map((v, i) => `${(i * step).toFixed(1)},${(h - v * (h - 4) - 2).toFixed(1)}`)
    .join(" ");
  return `
<div id="trend">
  <svg viewBox="0 0 ${w} ${h}" width="${w}" height="${h}"
       aria-label="found rate trend">
    <polyline points="${points}" fill="none" class="trend-line"/>
  </svg>
  <span class="trend-now" data-value="${samples[samples.length - 1]}">
    ${percent(samples[samples.length - 1] ?? null)}</span>
</div>`;
}

function quadrantPanel(metrics: Metrics | null): string {
  const quadrant = metrics?.quadrant;
  if (!quadrant) {
    return `<div id="quadrant-panel" class="panel-missing">quadrant: insufficient data</div>`;
  }
  const cell = (tag: QuadrantTag) => `
    <div class="quad-cell" data-cell="${tag}"
         data-value="${quadrant.cells[tag]}">
      <span class="quad-count">${quadrant.cells[tag]}</span>
      <span class="quad-name">${QUADRANT_LABELS[tag]}</span>
    </div>`;
  return `
<div id="quadrant-panel">
  <div class="quad-grid">
    ${cell("top_left")}${cell("top_right")}
    ${cell("bottom_left")}${cell("bottom_right")}
  </div>
  <div class="quad-thresholds">
    ref ≥ <span data-name="ref-threshold">${quadrant.ref_threshold.toFixed(3)}</span>,
    po ≥ <span data-name="po-threshold">${quadrant.po_threshold.toFixed(3)}</span>
  </div>
</div>`;
}

function scatter(store: Store): string {
  const quadrant = store.metrics?.quadrant;
  const pool = [...store.entries, ...store.decided].filter(
    (e) => e.po_score != null && e.ref_score != null,
  );
  if (!quadrant || pool.length === 0) {
    return `<div id="scatter" class="panel-missing">score scatter: insufficient data</div>`;
  }
  const size = 220;
  const sx = (v: number) => 10 + v * (size - 20);
  const sy = (v: number) => size - 10 - v * (size - 20);
  const dots = pool
    .map((e) => {
      const tag = quadrantTag(e, quadrant);
      return `<circle cx="${sx(e.po_score!).toFixed(1)}" cy="${sy(
        e.ref_score!,
      ).toFixed(1)}" r="3" class="dot dot-${tag}" data-id="${esc(e.id)}"/>`;
    })
    .join("");
  return `
<div id="scatter">
  <svg viewBox="0 0 ${size} ${size}" width="${size}" height="${size}"
       aria-label="referral score against positive outcome score">
    <line x1="${sx(quadrant.po_threshold).toFixed(1)}" y1="0"
          x2="${sx(quadrant.po_threshold).toFixed(1)}" y2="${size}"
          class="threshold"/>
    <line x1="0" y1="${sy(quadrant.ref_threshold).toFixed(1)}"
          x2="${size}" y2="${sy(quadrant.ref_threshold).toFixed(1)}"
          class="threshold"/>
    ${dots}
  </svg>
</div>`;
}

function biasPanel(rows: BiasRow[] | undefined): string {
  if (!rows || rows.length === 0) {
    return `<div id="bias" class="panel-missing">bias slices: insufficient data</div>`;
  }
  const bar = (value: number | null, kind: string) =>
    value == null
      ? `<span class="bar-missing">insufficient data</span>`
      : `<span class="bar bar-${kind}" data-value="${value}"
              style="width:${Math.round(100 * value)}px"></span>
         <span class="bar-number">${percent(value)}</span>`;
  const groups = new Map<string, BiasRow[]>();
  for (const row of rows) {
    const bucket = groups.get(row.dimension) ?? [];
    bucket.push(row);
    groups.set(row.dimension, bucket);
  }
  let html = `<div id="bias">`;
  for (const [dimension, bucket] of groups) {
    html += `<h3 class="bias-dim">${esc(dimension)}</h3>`;
    for (const row of bucket) {
      if (row.suppressed) {
        html += `
<div class="bias-row suppressed" data-group="${esc(row.group)}">
  <span class="bias-group">${esc(row.group)}</span>
  <span class="bias-marker">&lt;5</span>
  <span class="bias-note">group too small to report</span>
</div>`;
      } else {
        html += `
<div class="bias-row" data-group="${esc(row.group)}">
  <span class="bias-group">${esc(row.group)} (${row.size})</span>
  <span class="bias-bars">
    referral ${bar(row.referral_rate, "referral")}
    found ${bar(row.found_rate, "found")}
  </span>
  ${
    row.representation_ratio == null
      ? ""
      : `<span class="bias-repr" data-value="${row.representation_ratio}">
           repr ${row.representation_ratio.toFixed(2)}</span>`
  }
</div>`;
      }
    }
  }
  return `${html}</div>`;
}

function banner(store: Store): string {
  if (!store.banner) return `<div id="banner" hidden></div>`;
  const retry = store.banner.retryOp
    ? `<button data-action="retry-op">Retry</button>`
    : store.banner.kind === "stale"
      ? `<button data-action="reload">Retry</button>`
      : "";
  return `
<div id="banner" class="banner-${store.banner.kind}">
  <span>${esc(store.banner.text)}</span>
  ${retry}
  <button data-action="dismiss-banner" class="banner-close">×</button>
</div>`;
}

export function render(root: HTMLElement, store: Store): void {
  // carry typed-but-unsubmitted widget state across the repaint
  const drafts = new Map<string, { note: string; code: string }>();
  for (const el of root.querySelectorAll<HTMLElement>(".card")) {
    const note = el.querySelector<HTMLInputElement>("[data-note]");
    const code = el.querySelector<HTMLSelectElement>("[data-outcome-code]");
    drafts.set(el.dataset.id ?? "", {
      note: note?.value ?? "",
      code: code?.value ?? "",
    });
  }

  const visible = store.visible();
  const duplicates = duplicateIds([...store.entries, ...store.decided]);
  const cards = visible
    .map((e) => card(e, store, duplicates.has(e.id), e.id === store.focusId))
    .join("");
  const emptyText =
    store.filters.view === "pending" &&
    store.filters.quadrant === "all" &&
    store.filters.platform === "all" &&
    store.filters.demographic === "all"
      ? "Queue is clear."
      : "No entries match the current filters.";

  root.innerHTML = `
${banner(store)}
<main>
  <section id="queue-pane">
    ${filterBar(store)}
    ${
      store.loading
        ? `<div id="loading">loading…</div>`
        : visible.length
          ? `<div id="queue">${cards}</div>`
          : `<div id="empty-state">${emptyText}</div>`
    }
    ${
      store.cursor && store.filters.view !== "decided"
        ? `<button id="load-more" data-action="load-more">Load more</button>`
        : ""
    }
    ${
      store.pendingTotal != null
        ? `<div id="pending-total">pending on server: ${store.pendingTotal}</div>`
        : ""
    }
  </section>
  <aside id="panels">
    ${tiles(store.metrics)}
    ${trend(store.trend)}
    ${quadrantPanel(store.metrics)}
    ${scatter(store)}
    ${biasPanel(store.metrics?.bias)}
  </aside>
</main>`;

  for (const [id, draft] of drafts) {
    const el = root.querySelector<HTMLElement>(
      `.card[data-id="${cssEscape(id)}"]`,
    );
    if (!el) continue;
    const note = el.querySelector<HTMLInputElement>("[data-note]");
    const code = el.querySelector<HTMLSelectElement>("[data-outcome-code]");
    if (note && draft.note) note.value = draft.note;
    if (code && draft.code) code.value = draft.code;
  }
}
