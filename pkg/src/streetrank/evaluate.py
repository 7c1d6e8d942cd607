"""Ranking metrics and reports for scored alert queues.

Everything here is rank-based: only the ordering of scores matters, with ties
broken deterministically by (score desc, created asc, id asc) so reports are
reproducible byte for byte. Labels come as int8 arrays with 1 = yes, 0 = no
and -1 = null (no outcome knowable); nulls count against found_rate's
denominator but never against precision's.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

PO_K_LADDER = (50, 100, 150, 200, 300, 400, 500, 750, 1000, 1500,
               2000, 3000, 4000, 5000, 6000, 7000)
REFERRAL_K_LADDER = (50, 100, 250, 500, 750, 1000, 1500, 2500, 5000,
                     7500, 10000)

SUPPRESSION_THRESHOLD = 5


@dataclass(frozen=True)
class ScoredFold:
    """One fold's scored test pool with aligned label arrays."""

    fold_id: str
    ids: tuple[str, ...]
    scores: np.ndarray
    created: np.ndarray            # int64 epoch seconds
    positive: np.ndarray           # int8: 1 found, 0 not found, -1 null
    referral: np.ndarray

    def __post_init__(self):
        n = len(self.ids)
        for name in ("scores", "created", "positive", "referral"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} misaligned with ids")


def rank_order(scores, created, ids) -> np.ndarray:
    """Indices sorted by (score desc, created asc, id asc)."""
    ids = np.asarray(ids, dtype=str)
    return np.lexsort((ids, np.asarray(created), -np.asarray(scores, np.float64)))


@dataclass(frozen=True)
class MetricRow:
    """Metrics at one k for one fold (or an aggregate labelled as such).

    ``precision`` and ``recall`` are None when their denominator is zero;
    reports render that as an absence, never as 0.
    """

    fold_id: str
    k: int
    k_used: int
    precision: float | None
    recall: float | None
    found_rate: float
    null_count: int

    @property
    def clamped(self) -> bool:
        return self.k_used != self.k

    def __post_init__(self):
        for value in (self.precision, self.recall, self.found_rate):
            if value is not None and not (0.0 <= value <= 1.0 + 1e-12):
                raise ValueError(f"metric out of range: {value}")
        if self.null_count > self.k_used:
            raise ValueError("null_count exceeds k")


@dataclass(frozen=True)
class MetricsAtK:
    """Per-fold rows plus cross-fold arithmetic means and pooled micro rows."""

    rows: tuple[MetricRow, ...]
    averages: tuple[MetricRow, ...]
    pooled: tuple[MetricRow, ...]


def _top_k_counts(scores, labels, created, ids, k):
    n = len(labels)
    k_used = min(k, n)
    order = rank_order(scores, created, ids)
    top = np.asarray(labels)[order[:k_used]]
    found = int((top == 1).sum())
    not_found = int((top == 0).sum())
    nulls = int((top == -1).sum())
    total_found = int((np.asarray(labels) == 1).sum())
    return k_used, found, not_found, nulls, total_found


def metrics_at_k(scores, labels, created, ids, k: int,
                 fold_id: str = "") -> MetricRow:
    """Precision / recall / found-rate / null-count for the top-k ranking."""
    if k < 1:
        raise ValueError("k must be >= 1")
    k_used, found, not_found, nulls, total_found = _top_k_counts(
        scores, labels, created, ids, k)
    precision = found / (found + not_found) if found + not_found else None
    recall = found / total_found if total_found else None
    return MetricRow(fold_id=fold_id, k=k, k_used=k_used, precision=precision,
                     recall=recall, found_rate=found / k_used if k_used else 0.0,
                     null_count=nulls)


def _mean_or_none(values):
    present = [v for v in values if v is not None]
    return sum(present) / len(present) if present else None


def metrics_ladder(folds: Sequence[ScoredFold], k_ladder: Sequence[int],
                   label: str = "positive") -> MetricsAtK:
    """Per-fold metric rows at each k, with mean and pooled aggregates.

    ``label`` picks which label array drives the metrics ("positive" for the
    Positive Outcome Model, "referral" for the Referral Model).
    """
    if list(k_ladder) != sorted(set(k_ladder)):
        raise ValueError("k ladder must be strictly ascending")
    rows = []
    for fold in folds:
        labels = getattr(fold, label)
        for k in k_ladder:
            rows.append(metrics_at_k(fold.scores, labels, fold.created,
                                     fold.ids, k, fold_id=fold.fold_id))

    averages = []
    pooled = []
    for k in k_ladder:
        at_k = [row for row in rows if row.k == k]
        averages.append(MetricRow(
            fold_id="mean", k=k, k_used=k,
            precision=_mean_or_none([r.precision for r in at_k]),
            recall=_mean_or_none([r.recall for r in at_k]),
            found_rate=float(np.mean([r.found_rate for r in at_k])),
            null_count=int(round(np.mean([r.null_count for r in at_k])))))
        sums = dict(k_used=0, found=0, not_found=0, nulls=0, total_found=0)
        for fold in folds:
            labels = getattr(fold, label)
            k_used, found, not_found, nulls, total_found = _top_k_counts(
                fold.scores, labels, fold.created, fold.ids, k)
            sums["k_used"] += k_used
            sums["found"] += found
            sums["not_found"] += not_found
            sums["nulls"] += nulls
            sums["total_found"] += total_found
        denom = sums["found"] + sums["not_found"]
        pooled.append(MetricRow(
            fold_id="pooled", k=k, k_used=sums["k_used"],
            precision=sums["found"] / denom if denom else None,
            recall=sums["found"] / sums["total_found"]
            if sums["total_found"] else None,
            found_rate=sums["found"] / sums["k_used"] if sums["k_used"] else 0.0,
            null_count=sums["nulls"]))
    return MetricsAtK(rows=tuple(rows), averages=tuple(averages),
                      pooled=tuple(pooled))


@dataclass(frozen=True)
class BaselineMonth:
    """One month of the simulated manual review policy."""

    fold_id: str
    referral_count: int
    found_rate: float


@dataclass(frozen=True)
class UpliftRow:
    fold_id: str
    k: int
    model_found_rate: float
    baseline_found_rate: float

    @property
    def uplift(self) -> float | None:
        if self.baseline_found_rate == 0:
            return None
        return self.model_found_rate / self.baseline_found_rate


@dataclass(frozen=True)
class UpliftReport:
    rows: tuple[UpliftRow, ...]
    model_avg: float
    baseline_avg: float

    @property
    def uplift_of_averages(self) -> float | None:
        return self.model_avg / self.baseline_avg if self.baseline_avg else None

    @property
    def mean_uplift(self) -> float | None:
        return _mean_or_none([r.uplift for r in self.rows])


def baseline_compare(folds: Sequence[ScoredFold],
                     baseline: Mapping[str, BaselineMonth],
                     label: str = "positive") -> UpliftReport:
    """Model found-rate against the manual baseline at each month's own k."""
    rows = []
    for fold in folds:
        if fold.fold_id not in baseline:
            raise ValueError(f"no baseline for month {fold.fold_id}")
        month = baseline[fold.fold_id]
        row = metrics_at_k(fold.scores, getattr(fold, label), fold.created,
                           fold.ids, month.referral_count, fold_id=fold.fold_id)
        rows.append(UpliftRow(fold_id=fold.fold_id, k=month.referral_count,
                              model_found_rate=row.found_rate,
                              baseline_found_rate=month.found_rate))
    return UpliftReport(rows=tuple(rows),
                        model_avg=float(np.mean([r.model_found_rate
                                                 for r in rows])),
                        baseline_avg=float(np.mean([r.baseline_found_rate
                                                    for r in rows])))


# ---------------------------------------------------------------------------
# Quadrants


@dataclass(frozen=True)
class QuadrantCell:
    name: str
    count: int
    found: int
    not_found: int
    nulls: int
    gender_counts: Mapping[str, int]
    age_counts: Mapping[str, int]
    mean_word_count: float | None


@dataclass(frozen=True)
class QuadrantReport:
    """Counts in the four regions cut by the two score thresholds.

    The horizontal line sits on the referral-score axis at the month's real
    referral volume; the vertical line on the positive-score axis at the
    month's real found volume. ``bottom_right`` is the cohort scored likely
    positive but below the referral line.
    """

    po_threshold: float
    ref_threshold: float
    n_found: int
    n_referrals: int
    total: int
    cells: tuple[QuadrantCell, ...]

    def cell(self, name: str) -> QuadrantCell:
        return next(c for c in self.cells if c.name == name)


def _top_set(scores, created, ids, n) -> np.ndarray:
    mask = np.zeros(len(ids), np.bool_)
    if n > 0:
        mask[rank_order(scores, created, ids)[:n]] = True
    return mask


def _threshold_of(scores, created, ids, n) -> float:
    if n == 0:
        return float("inf")
    order = rank_order(scores, created, ids)
    return float(np.asarray(scores)[order[n - 1]])


def quadrant_report(po_scores, ref_scores, positive, genders, ages,
                    word_counts, created, ids, n_referrals: int,
                    n_found: int) -> QuadrantReport:
    """Cross the two model scores at month-matched volumes."""
    n = len(ids)
    if n_referrals > n or n_found > n:
        raise ValueError("threshold volume exceeds pool size")
    above = _top_set(ref_scores, created, ids, n_referrals)      # referred line
    right = _top_set(po_scores, created, ids, n_found)           # found line
    positive = np.asarray(positive)
    genders = np.asarray(genders, dtype=str)
    ages = np.asarray(ages, dtype=str)
    word_counts = np.asarray(word_counts, np.float64)

    cells = []
    for name, mask in (("top_left", above & ~right),
                       ("top_right", above & right),
                       ("bottom_left", ~above & ~right),
                       ("bottom_right", ~above & right)):
        picked = positive[mask]
        gender_counts = dict(zip(*np.unique(genders[mask], return_counts=True)))
        age_counts = dict(zip(*np.unique(ages[mask], return_counts=True)))
        cells.append(QuadrantCell(
            name=name, count=int(mask.sum()),
            found=int((picked == 1).sum()),
            not_found=int((picked == 0).sum()),
            nulls=int((picked == -1).sum()),
            gender_counts={k: int(v) for k, v in gender_counts.items()},
            age_counts={k: int(v) for k, v in age_counts.items()},
            mean_word_count=float(word_counts[mask].mean())
            if mask.any() else None))
    return QuadrantReport(
        po_threshold=_threshold_of(po_scores, created, ids, n_found),
        ref_threshold=_threshold_of(ref_scores, created, ids, n_referrals),
        n_found=n_found, n_referrals=n_referrals, total=n, cells=tuple(cells))


def jaccard_matrix(prediction_sets: Mapping[str, set]) -> tuple:
    """Pairwise Jaccard similarity of top-k id sets.

    Two empty sets count as identical (J = 1); an empty set against a
    non-empty one scores 0.
    """
    names = tuple(prediction_sets)
    m = len(names)
    matrix = np.ones((m, m), np.float64)
    for i in range(m):
        for j in range(i + 1, m):
            a, b = prediction_sets[names[i]], prediction_sets[names[j]]
            if not a and not b:
                value = 1.0
            else:
                union = len(a | b)
                value = len(a & b) / union if union else 0.0
            matrix[i, j] = matrix[j, i] = value
    return names, matrix


# ---------------------------------------------------------------------------
# Bias slices


@dataclass(frozen=True)
class BiasRow:
    dimension: str
    group: str
    size: int
    suppressed: bool
    referral_rate: float | None        # P(in top k | group)
    found_rate: float | None           # found / (found + not found), in-group top k
    representation_ratio: float | None  # group share in top k / share in pool


def bias_slices(scores, positive, created, ids, matched_k: int,
                demographics: Mapping[str, Sequence[str]]) -> tuple[BiasRow, ...]:
    """Per-demographic selection and outcome rates at the month-matched k.

    Groups smaller than five members are reported but suppressed: size and
    marker only, no rates.
    """
    n = len(ids)
    top = _top_set(scores, created, ids, min(matched_k, n))
    positive = np.asarray(positive)
    k_used = int(top.sum())
    rows = []
    for dimension, values in demographics.items():
        values = np.asarray(values, dtype=str)
        for group in sorted(set(values.tolist())):
            members = values == group
            size = int(members.sum())
            if size < SUPPRESSION_THRESHOLD:
                rows.append(BiasRow(dimension, group, size, True,
                                    None, None, None))
                continue
            in_top = members & top
            taken = int(in_top.sum())
            found = int((positive[in_top] == 1).sum())
            not_found = int((positive[in_top] == 0).sum())
            pool_share = size / n
            top_share = taken / k_used if k_used else 0.0
            rows.append(BiasRow(
                dimension, group, size, False,
                referral_rate=taken / size,
                found_rate=found / (found + not_found)
                if found + not_found else None,
                representation_ratio=top_share / pool_share))
    return tuple(rows)


# ---------------------------------------------------------------------------
# Report files


def _render(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(round(value, 10))
    return str(value)


def write_metrics_csv(path, metrics: MetricsAtK) -> None:
    """All rows (per-fold, mean, pooled) as one deterministic CSV."""
    lines = ["fold_id,k,k_used,precision,recall,found_rate,null_count"]
    for row in (*metrics.rows, *metrics.averages, *metrics.pooled):
        lines.append(",".join(_render(v) for v in (
            row.fold_id, row.k, row.k_used, row.precision, row.recall,
            row.found_rate, row.null_count)))
    with open(path, "w", newline="") as handle:
        handle.write("\n".join(lines) + "\n")


def write_plot_data(path, payload: dict) -> None:
    """Plot-ready data (score scatter, metric curves, group importances)."""
    with open(path, "w") as handle:
        json.dump(payload, handle, sort_keys=True, indent=1, default=_jsonable)
        handle.write("\n")


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    raise TypeError(f"not JSON-serializable: {type(value)}")
