// JSON shapes served by the triage service. The UI never invents numbers:
// every figure rendered comes from one of these payloads.

export type Status =
  | "PendingReview"
  | "AutoReferred"
  | "Referred"
  | "Dismissed"
  | "OutcomeRecorded";

export type Decision = "Referred" | "Dismissed";

export const OUTCOME_CODES = [
  "PersonFound",
  "PersonNotFound",
  "LspDidNotRespond",
  "StillOpen",
  "NotEnoughInformation",
  "DuplicateAlert",
  "KnownHotspotNoAction",
  "PersonRefusedService",
  "ReferredOutOfArea",
  "InsufficientResources",
] as const;
export type OutcomeCode = (typeof OUTCOME_CODES)[number];

export interface AlertRow {
  id: string;
  created_at: string;
  time_seen: string;
  platform: string;
  latitude: string;
  longitude: string;
  lsp_id: string;
  gender: string;
  age_band: string;
  location_text: string;
  appearance_text: string;
  concerns_text: string;
}

export interface QueueEntry {
  id: string;
  created_at: string;
  po_score: number | null;
  ref_score: number | null;
  auto_referral: boolean;
  status: Status;
  alert: AlertRow;
}

export interface QueuePage {
  entries: QueueEntry[];
  cursor: string | null;
  pending_total: number | null;
}

export interface BiasRow {
  dimension: string;
  group: string;
  size: number | "<5";
  suppressed: boolean;
  referral_rate: number | null;
  found_rate: number | null;
  representation_ratio: number | null;
}

export interface QuadrantCells {
  top_left: number;
  top_right: number;
  bottom_left: number;
  bottom_right: number;
}

export interface Quadrant {
  po_threshold: number;
  ref_threshold: number;
  cells: QuadrantCells;
}

export interface Metrics {
  queue_depth: number;
  status_counts: Record<string, number>;
  alerts_total: number;
  referred_total: number;
  outcomes_recorded: number;
  found_rate: number | null;
  auto_referral_threshold: number | null;
  bias?: BiasRow[];
  quadrant?: Quadrant;
}

export interface Health {
  status: string;
  ready: boolean;
  events: number;
  queue_depth: number;
}

export interface TransitionReply {
  id: string;
  status: Status;
}

// statuses an outcome may legally be recorded from
export const OUTCOME_READY: readonly Status[] = [
  "Referred",
  "Dismissed",
  "AutoReferred",
];
