"""Month forward-chaining cross-validation with label windows and buffers.

Folds advance one calendar month at a time. Each fold trains on everything
before a seven-day buffer ahead of its test month, so no training label can
overlap test-period information. ``leakage_check`` audits featurizer
provenance against those boundaries after the fact.

The first fold trains on the opening month alone (December 2017 under the
default config); an alternative reading would fold any earlier partial data
into it, but the default range has none.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from typing import Iterable, Sequence

import numpy as np

from .domain import (
    Alert,
    OutcomeRecord,
    PositiveLabel,
    ReferralLabel,
    format_timestamp,
)

BUFFER = timedelta(days=7)
LABEL_SPAN = timedelta(days=7)


def _utc(year: int, month: int, day: int) -> datetime:
    return datetime(year, month, day, tzinfo=timezone.utc)


def _month_start(moment: datetime) -> datetime:
    return moment.replace(day=1, hour=0, minute=0, second=0, microsecond=0)


def _add_month(moment: datetime) -> datetime:
    if moment.month == 12:
        return moment.replace(year=moment.year + 1, month=1)
    return moment.replace(month=moment.month + 1)


@dataclass(frozen=True)
class CvConfig:
    """Cross-validation range and window sizes.

    ``data_end`` is the last calendar day with alerts, inclusive.
    """

    data_start: datetime = _utc(2017, 12, 1)
    data_end: datetime = _utc(2019, 2, 28)
    train_label_span: timedelta = LABEL_SPAN
    test_label_span: timedelta = LABEL_SPAN
    training_span_cap: timedelta = timedelta(days=730)
    buffer: timedelta = BUFFER

    def __post_init__(self):
        if self.data_start >= self.data_end:
            raise ValueError("data_start must precede data_end")
        for name in ("train_label_span", "test_label_span",
                     "training_span_cap", "buffer"):
            if getattr(self, name) <= timedelta(0):
                raise ValueError(f"{name} must be positive")

    @property
    def end_exclusive(self) -> datetime:
        return self.data_end + timedelta(days=1)


@dataclass(frozen=True)
class FoldPlan:
    """One train/test split; all boundaries are half-open [start, end)."""

    fold_id: str
    train_start: datetime
    train_end: datetime
    test_start: datetime
    test_end: datetime
    buffer: timedelta = BUFFER
    label_span: timedelta = LABEL_SPAN

    def __post_init__(self):
        if self.train_start >= self.train_end:
            raise ValueError("empty training window")
        if self.train_end + self.buffer > self.test_start:
            raise ValueError("buffer violated between train and test")
        if self.test_start >= self.test_end:
            raise ValueError("empty test window")


def make_folds(config: CvConfig = CvConfig()) -> list[FoldPlan]:
    """Ordered fold plans, one per full test month after the opening month."""
    month = _month_start(config.data_start)
    if month < config.data_start:
        month = _add_month(month)
    months = []
    while month < config.end_exclusive:
        months.append(month)
        month = _add_month(month)
    if len(months) < 2:
        raise ValueError("range too short: need at least two months")

    folds = []
    for i in range(1, len(months)):
        test_start = months[i]
        test_end = min(_add_month(test_start), config.end_exclusive)
        train_end = test_start - config.buffer
        train_start = max(config.data_start, test_start - config.training_span_cap)
        folds.append(FoldPlan(fold_id=test_start.strftime("%Y-%m"),
                              train_start=train_start, train_end=train_end,
                              test_start=test_start, test_end=test_end,
                              buffer=config.buffer,
                              label_span=config.test_label_span))
    return folds


@dataclass(frozen=True)
class LabelledSplit:
    """Alerts of one fold side with aligned label arrays.

    Labels are int8: 1 yes, 0 no, -1 null/unknown. The Positive Outcome
    training subset is ``positive >= 0``; test rows keep -1 for found-rate
    accounting.
    """

    split: str
    alerts: tuple[Alert, ...]
    referral: np.ndarray
    positive: np.ndarray

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(a.id for a in self.alerts)


def _index_outcomes(alerts: Sequence[Alert],
                    outcomes: Iterable[OutcomeRecord]) -> dict:
    known = {a.id for a in alerts}
    by_id = {}
    for rec in outcomes:
        if rec.alert_id not in known:
            raise ValueError(f"outcome references unknown alert {rec.alert_id!r}")
        by_id[rec.alert_id] = rec
    return by_id


def apply_label_window(alerts: Sequence[Alert],
                       outcomes: Iterable[OutcomeRecord],
                       fold: FoldPlan, split: str) -> LabelledSplit:
    """Select one side of a fold and label it through its window rules.

    Training keeps only alerts resolved by ``train_end``; a positive label
    additionally requires the supporting outcome within ``label_span`` of
    creation. Test keeps every alert of the test month, labelling those
    resolved within ``label_span`` and leaving the rest -1.
    """
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    by_id = _index_outcomes(alerts, outcomes)

    picked = []
    referral = []
    positive = []
    for alert in alerts:
        rec = by_id.get(alert.id)
        if split == "train":
            if not (fold.train_start <= alert.created_at < fold.train_end):
                continue
            if rec is None or rec.resolved_at > fold.train_end:
                continue    # still open at the training cutoff
            pair = rec.labels()
            in_span = rec.resolved_at <= alert.created_at + fold.label_span
            referral.append(1 if pair.referral is ReferralLabel.YES else 0)
            if pair.positive is PositiveLabel.NULL:
                positive.append(-1)
            else:
                positive.append(1 if pair.positive is PositiveLabel.YES
                                and in_span else 0)
        else:
            if not (fold.test_start <= alert.created_at < fold.test_end):
                continue
            if rec is None or rec.resolved_at > alert.created_at + fold.label_span:
                referral.append(-1)
                positive.append(-1)
            else:
                pair = rec.labels()
                referral.append(1 if pair.referral is ReferralLabel.YES else 0)
                if pair.positive is PositiveLabel.NULL:
                    positive.append(-1)
                else:
                    positive.append(1 if pair.positive is PositiveLabel.YES else 0)
        picked.append(alert)
    return LabelledSplit(split=split, alerts=tuple(picked),
                         referral=np.array(referral, np.int8),
                         positive=np.array(positive, np.int8))


@dataclass(frozen=True)
class RowProvenance:
    """Per-row audit trail from the featurizer."""

    ids: tuple[str, ...]
    created: np.ndarray        # int64 epoch seconds
    max_info_time: np.ndarray  # int64 epoch seconds

    def __post_init__(self):
        if not (len(self.ids) == len(self.created) == len(self.max_info_time)):
            raise ValueError("provenance arrays must align")


@dataclass(frozen=True)
class LeakageReport:
    split: str
    fold_id: str
    passed: bool
    offending_ids: tuple[str, ...]


def _epoch(moment: datetime) -> int:
    return int(moment.timestamp())


def leakage_check(fold: FoldPlan, provenance: RowProvenance,
                  split: str) -> LeakageReport:
    """Audit featurizer provenance against the fold's information boundary.

    Training rows must consume nothing after ``train_end``; test rows nothing
    after their own creation time.
    """
    if split == "train":
        bad = provenance.max_info_time > _epoch(fold.train_end)
    elif split == "test":
        bad = provenance.max_info_time > provenance.created
    else:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    offending = tuple(pid for pid, flag in zip(provenance.ids, bad) if flag)
    return LeakageReport(split=split, fold_id=fold.fold_id,
                         passed=not offending, offending_ids=offending)


def provenance_of(base, row_indices=None) -> RowProvenance:
    """Bundle a BaseFeatures' audit columns, optionally row-sliced."""
    if row_indices is None:
        return RowProvenance(base.alert_ids, base.created, base.max_info_time)
    rows = np.asarray(row_indices, np.int64)
    return RowProvenance(tuple(base.alert_ids[i] for i in rows),
                         base.created[rows], base.max_info_time[rows])


def write_fold_plans(path, folds: Sequence[FoldPlan],
                     row_counts: dict | None = None) -> None:
    """Export fold boundaries (and optional train/test row counts) for audit."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["fold_id", "train_start", "train_end", "test_start",
                         "test_end", "train_rows", "test_rows"])
        for fold in folds:
            counts = (row_counts or {}).get(fold.fold_id, ("", ""))
            writer.writerow([fold.fold_id,
                             format_timestamp(fold.train_start),
                             format_timestamp(fold.train_end),
                             format_timestamp(fold.test_start),
                             format_timestamp(fold.test_end),
                             counts[0], counts[1]])
