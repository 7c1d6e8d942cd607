// @vitest-environment happy-dom

// The whole review flow against the fixture service: server-order queue,
// decision and outcome round trips, duplicate-submit collapse, conflict
// rollback, suppression markers, and the unreachable banner.

import { beforeEach, describe, expect, it } from "vitest";

import { Client } from "../src/api.js";
import type { Transport } from "../src/api.js";
import { boot } from "../src/main.js";
import {
  FixtureService,
  fixtureEntries,
  makeEntry,
} from "./fixture_service.js";

function mount(): HTMLElement {
  const root = document.createElement("div");
  document.body.appendChild(root);
  return root;
}

function flush(ms = 10): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

function cardIds(root: HTMLElement): string[] {
  return [...root.querySelectorAll<HTMLElement>("#queue .card")].map(
    (el) => el.dataset.id ?? "",
  );
}

function click(root: HTMLElement, selector: string): void {
  const el = root.querySelector<HTMLElement>(selector);
  if (!el) throw new Error(`nothing matches ${selector}`);
  el.click();
}

function key(name: string): void {
  document.dispatchEvent(
    new KeyboardEvent("keydown", { key: name, bubbles: true, cancelable: true }),
  );
}

function setSelect(root: HTMLElement, filter: string, value: string): void {
  const el = root.querySelector<HTMLSelectElement>(
    `select[data-filter="${filter}"]`,
  );
  if (!el) throw new Error(`no filter select ${filter}`);
  el.value = value;
  el.dispatchEvent(new Event("change", { bubbles: true }));
}

beforeEach(() => {
  document.body.innerHTML = "";
});

describe("golden path", () => {
  it("renders the queue in server order, best score first and focused", async () => {
    const fixture = new FixtureService(fixtureEntries());
    const root = mount();
    await boot(root, new Client(fixture.transport, "", 1));

    expect(cardIds(root)).toEqual(["q-01", "q-02", "q-03", "q-04", "q-05"]);
    const badges = [
      ...root.querySelectorAll<HTMLElement>("#queue .score-badge"),
    ].map((el) => el.dataset.value);
    expect(badges[0]).toBe("0.9");
    expect(badges[4]).toBe("0.4"); // 0.9 sits above 0.4, untouched by the client
    expect(
      root.querySelector<HTMLElement>(".card.focused")?.dataset.id,
    ).toBe("q-01");
    expect(root.querySelector("#pending-total")?.textContent).toContain("5");
  });

  it("walks refer, dismiss, and outcomes through the service and back", async () => {
    const fixture = new FixtureService(fixtureEntries());
    const root = mount();
    await boot(root, new Client(fixture.transport, "", 1));

    click(root, '.card[data-id="q-01"] [data-action="refer"]');
    await flush();
    expect(fixture.statuses.get("q-01")).toBe("Referred");
    expect(cardIds(root)).toEqual(["q-02", "q-03", "q-04", "q-05"]);

    // keyboard flow: j/k move focus, d dismisses the focused entry
    key("j");
    expect(root.querySelector<HTMLElement>(".card.focused")?.dataset.id).toBe(
      "q-03",
    );
    key("k");
    key("d");
    await flush();
    expect(fixture.statuses.get("q-02")).toBe("Dismissed");
    expect(cardIds(root)).toEqual(["q-03", "q-04", "q-05"]);

    setSelect(root, "view", "decided");
    expect(cardIds(root)).toEqual(["q-01", "q-02"]);
    const chip = (id: string) =>
      root.querySelector<HTMLElement>(`.card[data-id="${id}"] .status-chip`)
        ?.dataset.status;
    expect(chip("q-01")).toBe("Referred");
    expect(chip("q-02")).toBe("Dismissed");

    // outcome on the referral: default select choice is PersonFound
    click(root, '.card[data-id="q-01"] [data-action="outcome"]');
    await flush();
    expect(fixture.outcomes.get("q-01")).toBe("PersonFound");
    expect(chip("q-01")).toBe("OutcomeRecorded");
    const tile = root.querySelector<HTMLElement>('[data-name="found-rate"]');
    expect(tile?.dataset.value).toBe("1");

    // second outcome drags the found rate to exactly 1/2
    const select = root.querySelector<HTMLSelectElement>(
      '.card[data-id="q-02"] [data-outcome-code]',
    );
    select!.value = "PersonNotFound";
    click(root, '.card[data-id="q-02"] [data-action="outcome"]');
    await flush();
    expect(fixture.outcomes.get("q-02")).toBe("PersonNotFound");
    expect(
      root.querySelector<HTMLElement>('[data-name="found-rate"]')?.dataset
        .value,
    ).toBe("0.5");
    // two samples on the board: the trend line appears
    expect(root.querySelector("#trend svg")).not.toBeNull();
    expect(
      root.querySelector<HTMLElement>(".trend-now")?.dataset.value,
    ).toBe("0.5");

    // a settled card offers no second decision
    const refer = root.querySelector<HTMLButtonElement>(
      '.card[data-id="q-01"] [data-action="refer"]',
    );
    expect(refer?.disabled).toBe(true);
  });

  it("collapses duplicate submits into a single server event", async () => {
    const fixture = new FixtureService(fixtureEntries());
    const root = mount();
    const app = await boot(root, new Client(fixture.transport, "", 1));

    // double click: the second landing on the same button must not double-send
    const button = root.querySelector<HTMLElement>(
      '.card[data-id="q-01"] [data-action="refer"]',
    );
    button!.click();
    button!.click();
    await flush();
    expect(fixture.posts.decision).toBe(1);
    expect(fixture.events).toHaveLength(1);

    // same at the app layer: concurrent calls for one entry, one event
    void app.decide("q-02", "Referred");
    void app.decide("q-02", "Referred");
    await flush();
    expect(fixture.posts.decision).toBe(2);
    expect(fixture.events).toHaveLength(2);

    // outcomes too
    setSelect(root, "view", "decided");
    const outcome = root.querySelector<HTMLElement>(
      '.card[data-id="q-01"] [data-action="outcome"]',
    );
    outcome!.click();
    outcome!.click();
    await flush();
    expect(fixture.posts.outcome).toBe(1);
    expect(fixture.outcomes.size).toBe(1);
  });

  it("rolls an optimistic decision back on a 409 and keeps the queue order", async () => {
    const fixture = new FixtureService(fixtureEntries());
    const root = mount();
    await boot(root, new Client(fixture.transport, "", 1));

    // another reviewer got there first, the client does not know yet
    fixture.statuses.set("q-03", "Referred");
    click(root, '.card[data-id="q-03"] [data-action="refer"]');
    await flush();

    expect(cardIds(root)).toEqual(["q-01", "q-02", "q-03", "q-04", "q-05"]);
    const banner = root.querySelector("#banner.banner-conflict");
    expect(banner).not.toBeNull();
    expect(banner?.textContent).toMatch(/not allowed/);
    expect(fixture.events).toHaveLength(0);

    click(root, '[data-action="dismiss-banner"]');
    expect(root.querySelector("#banner.banner-conflict")).toBeNull();
  });

  it("shows suppressed bias groups as a <5 marker, never a bar", async () => {
    const fixture = new FixtureService(fixtureEntries());
    const root = mount();
    await boot(root, new Client(fixture.transport, "", 1));

    const suppressed = root.querySelector<HTMLElement>(
      '.bias-row.suppressed[data-group="Unknown"]',
    );
    expect(suppressed).not.toBeNull();
    expect(suppressed?.querySelector(".bias-marker")?.textContent).toBe("<5");
    expect(suppressed?.textContent).toContain("group too small to report");
    expect(suppressed?.querySelector(".bar")).toBeNull();

    // the reportable rows carry the service numbers verbatim
    const bar = (group: string, kind: string) =>
      root.querySelector<HTMLElement>(
        `.bias-row[data-group="${group}"] .bar-${kind}`,
      )?.dataset.value;
    expect(bar("Female", "referral")).toBe("0.42");
    expect(bar("Female", "found")).toBe("0.31");
    expect(bar("Male", "referral")).toBe("0.38");
    expect(bar("Male", "found")).toBe("0.26");
    expect(
      root.querySelector<HTMLElement>(
        '.bias-row[data-group="Female"] .bias-repr',
      )?.dataset.value,
    ).toBe("0.97");
    expect(
      root.querySelector('.bias-row[data-group="Female"]')?.textContent,
    ).toContain("(28)");
  });

  it("mirrors quadrant cells, thresholds, and tiles from the service", async () => {
    const fixture = new FixtureService(fixtureEntries());
    const root = mount();
    await boot(root, new Client(fixture.transport, "", 1));

    const cell = (tag: string) =>
      root.querySelector<HTMLElement>(`.quad-cell[data-cell="${tag}"]`)
        ?.dataset.value;
    expect(cell("top_left")).toBe("12");
    expect(cell("top_right")).toBe("8");
    expect(cell("bottom_left")).toBe("30");
    expect(cell("bottom_right")).toBe("9");
    expect(
      root.querySelector('[data-name="ref-threshold"]')?.textContent,
    ).toBe("0.500");
    expect(
      root.querySelector('[data-name="po-threshold"]')?.textContent,
    ).toBe("0.600");

    const tile = (name: string) =>
      root.querySelector<HTMLElement>(`.tile[data-name="${name}"]`)?.dataset
        .value;
    expect(tile("queue-depth")).toBe("5");
    expect(tile("referred")).toBe("0");
    expect(tile("outcomes")).toBe("0");
    expect(tile("found-rate")).toBe(""); // nothing resolved: no number invented
    expect(
      root.querySelector('.tile[data-name="found-rate"]')?.textContent,
    ).toContain("insufficient data");

    expect(root.querySelectorAll("#scatter circle").length).toBe(5);
    expect(
      root.querySelector<HTMLElement>('.card[data-id="q-01"] .quad-tag')
        ?.dataset.tag,
    ).toBe("top_right");
  });

  it("flags a near-duplicate sighting in the card header", async () => {
    const where = { lsp_id: "lsp-7", latitude: "51.49", longitude: "-0.11" };
    const fixture = new FixtureService([
      makeEntry("first", 0.8, 0.6, {}, {
        ...where,
        created_at: "2018-02-01T08:00:00+00:00",
      }),
      makeEntry("again", 0.7, 0.5, {}, {
        ...where,
        latitude: "51.4905",
        created_at: "2018-02-01T21:00:00+00:00",
      }),
    ]);
    const root = mount();
    await boot(root, new Client(fixture.transport, "", 1));

    expect(
      root.querySelector('.card[data-id="again"] .dup-flag')?.textContent,
    ).toContain("possible duplicate");
    expect(root.querySelector('.card[data-id="first"] .dup-flag')).toBeNull();
  });

  it("shows an explicit empty state when the queue is clear", async () => {
    const fixture = new FixtureService([]);
    const root = mount();
    await boot(root, new Client(fixture.transport, "", 1));

    expect(cardIds(root)).toEqual([]);
    expect(root.querySelector("#empty-state")?.textContent).toBe(
      "Queue is clear.",
    );
  });

  it("shows a retry banner when the service is down, then recovers", async () => {
    const fixture = new FixtureService(fixtureEntries());
    fixture.failNext = 99;
    const root = mount();
    await boot(root, new Client(fixture.transport, "", 1));

    const banner = root.querySelector("#banner.banner-stale");
    expect(banner).not.toBeNull();
    expect(banner?.textContent).toMatch(/unreachable/i);
    expect(cardIds(root)).toEqual([]); // nothing fabricated while down

    fixture.failNext = 0;
    click(root, '[data-action="reload"]');
    await flush();
    expect(root.querySelector("#banner.banner-stale")).toBeNull();
    expect(cardIds(root)).toEqual(["q-01", "q-02", "q-03", "q-04", "q-05"]);
  });

  it("parks a submit that cannot reach the service and retries with the same key", async () => {
    const fixture = new FixtureService(fixtureEntries());
    const keys: string[] = [];
    const tap: Transport = async (url, init) => {
      if (init?.method === "POST") {
        keys.push(JSON.parse(String(init.body)).idempotency_key);
      }
      return fixture.transport(url, init);
    };
    const root = mount();
    await boot(root, new Client(tap, "", 1));

    fixture.failNext = 99;
    click(root, '.card[data-id="q-01"] [data-action="refer"]');
    await flush(30); // room for the client's own retries to burn out
    expect(root.querySelector("#banner.banner-offline")).not.toBeNull();
    expect(cardIds(root)).toEqual(["q-02", "q-03", "q-04", "q-05"]);
    expect(fixture.posts.decision).toBe(0);

    fixture.failNext = 0;
    click(root, '[data-action="retry-op"]');
    await flush();
    expect(fixture.posts.decision).toBe(1);
    expect(fixture.events).toHaveLength(1);
    expect(fixture.statuses.get("q-01")).toBe("Referred");
    expect(new Set(keys).size).toBe(1); // every attempt carried one key
    expect(root.querySelector("#banner.banner-offline")).toBeNull();
  });
});
