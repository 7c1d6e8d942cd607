"""File-backed persistence: event log, model artifacts, run registry.

The event log is a single append-only file of length-prefixed, CRC-checked
JSON records. A torn final record (crash mid-write) is detected and trimmed
on the next writable open; damage anywhere earlier raises, it is never
skipped silently. One process owns the write side; readers re-scan the file
and simply stop at an incomplete tail, so they always see a consistent
prefix.

Model artifacts are .npz blobs with a sha256 recorded in a sidecar manifest,
verified on every load. Runs are tracked in per-run JSON files so an
interrupted grid search can resume without redoing finished work.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .domain import (LabelPair, OutcomeCode, RejectionError, alert_to_row,
                     map_outcome_to_labels, parse_timestamp, validate_alert)
from .learners import Tree, TrainedEnsemble

EVENT_KINDS = ("AlertCreated", "DecisionRecorded", "OutcomeRecorded")
DECISION_CHOICES = ("Referred", "Dismissed")

# statuses an alert moves through; see SnapshotState.apply for the machine
PENDING = "PendingReview"
AUTO_REFERRED = "AutoReferred"
REFERRED = "Referred"
DISMISSED = "Dismissed"
OUTCOME_RECORDED = "OutcomeRecorded"

_LEN = struct.Struct(">I")
MAX_RECORD_BYTES = 1 << 24  # a length prefix beyond this is damage, not data

ARTIFACT_FORMAT = 1


class StoreError(Exception):
    pass


class SchemaError(StoreError):
    """An event payload failed its kind's schema at append time."""


class CorruptRecordError(StoreError):
    """Checksum or sequence damage inside the log body (not a torn tail)."""


class TransitionError(StoreError):
    """An event asks for an illegal alert status transition."""


class NotFoundError(StoreError):
    pass


class SequenceError(StoreError):
    """snapshot(as_of) beyond the current head."""


@dataclass(frozen=True)
class EventRecord:
    sequence: int
    kind: str
    recorded_at: float
    payload: Mapping[str, object]


# ---------------------------------------------------------------------------
# Payload schemas. Kept strict so the log stays canonical: unknown keys are
# rejected rather than carried along.

_ALERT_OPTIONAL = {"po_score", "ref_score", "auto_referral", "quadrant", "duplicate"}
_DECISION_OPTIONAL = {"note", "idempotency_key"}
_OUTCOME_OPTIONAL = {"resolved_at", "idempotency_key"}


def _require_id(payload: Mapping, key: str) -> str:
    value = str(payload.get(key, "") or "").strip()
    if not value:
        raise SchemaError(f"missing {key}")
    return value


def _validate_payload(kind: str, payload: Mapping[str, object]) -> dict:
    if kind == "AlertCreated":
        extra = set(payload) - _ALERT_OPTIONAL - {"alert"}
        if extra:
            raise SchemaError(f"unexpected AlertCreated keys: {sorted(extra)}")
        raw = payload.get("alert")
        if not isinstance(raw, Mapping):
            raise SchemaError("AlertCreated payload needs an 'alert' mapping")
        try:
            alert = validate_alert(raw)
        except RejectionError as err:
            raise SchemaError(f"invalid alert: {err.reason}") from None
        out: dict = {"alert": alert_to_row(alert)}
        for key in ("po_score", "ref_score"):
            if key in payload:
                score = float(payload[key])  # type: ignore[arg-type]
                if not 0.0 <= score <= 1.0:
                    raise SchemaError(f"{key} outside [0, 1]")
                out[key] = score
        for key in ("auto_referral", "duplicate"):
            if key in payload:
                out[key] = bool(payload[key])
        if "quadrant" in payload:
            out["quadrant"] = str(payload["quadrant"])
        return out

    if kind == "DecisionRecorded":
        extra = set(payload) - _DECISION_OPTIONAL - {"alert_id", "decision"}
        if extra:
            raise SchemaError(f"unexpected DecisionRecorded keys: {sorted(extra)}")
        decision = str(payload.get("decision", ""))
        if decision not in DECISION_CHOICES:
            raise SchemaError(f"decision must be one of {DECISION_CHOICES}")
        out = {"alert_id": _require_id(payload, "alert_id"), "decision": decision}
        for key in _DECISION_OPTIONAL:
            if key in payload:
                out[key] = str(payload[key])
        return out

    if kind == "OutcomeRecorded":
        extra = set(payload) - _OUTCOME_OPTIONAL - {"alert_id", "outcome_code"}
        if extra:
            raise SchemaError(f"unexpected OutcomeRecorded keys: {sorted(extra)}")
        code = str(payload.get("outcome_code", ""))
        try:
            OutcomeCode(code)
        except ValueError:
            raise SchemaError(f"unknown outcome code {code!r}") from None
        out = {"alert_id": _require_id(payload, "alert_id"), "outcome_code": code}
        if "resolved_at" in payload:
            try:
                parse_timestamp(str(payload["resolved_at"]))
            except RejectionError as err:
                raise SchemaError(f"bad resolved_at: {err.reason}") from None
            out["resolved_at"] = str(payload["resolved_at"])
        if "idempotency_key" in payload:
            out["idempotency_key"] = str(payload["idempotency_key"])
        return out

    raise SchemaError(f"unknown event kind {kind!r}")


# ---------------------------------------------------------------------------
# Log file format: [u32 body length][body utf-8 json][u32 crc32(body)]


def _encode(record: EventRecord) -> bytes:
    body = json.dumps(
        {"seq": record.sequence, "kind": record.kind, "at": record.recorded_at,
         "payload": record.payload},
        sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _LEN.pack(len(body)) + body + _LEN.pack(zlib.crc32(body))


def _scan(handle, path: Path) -> tuple[list[EventRecord], int]:
    """Read records forward; return (records, end offset of last good one).

    A short tail (fewer bytes than the frame promises) terminates the scan:
    that is what an interrupted append leaves behind. A full-length frame
    that fails its checksum, or a sequence jump, is real damage and raises.
    """
    records: list[EventRecord] = []
    good_end = 0
    while True:
        prefix = handle.read(_LEN.size)
        if len(prefix) < _LEN.size:
            break
        (length,) = _LEN.unpack(prefix)
        if length > MAX_RECORD_BYTES:
            raise CorruptRecordError(
                f"{path}: implausible record length {length} at offset {good_end}")
        frame = handle.read(length + _LEN.size)
        if len(frame) < length + _LEN.size:
            break
        body, crc_bytes = frame[:length], frame[length:]
        if zlib.crc32(body) != _LEN.unpack(crc_bytes)[0]:
            raise CorruptRecordError(
                f"{path}: checksum mismatch at offset {good_end}")
        doc = json.loads(body.decode("utf-8"))
        if doc["seq"] != len(records) + 1:
            raise CorruptRecordError(
                f"{path}: sequence jump ({doc['seq']} after {len(records)})")
        records.append(EventRecord(doc["seq"], doc["kind"], doc["at"], doc["payload"]))
        good_end += _LEN.size + length + _LEN.size
    return records, good_end


class EventLog:
    """Append-only event log over a single file; one writer, many readers."""

    def __init__(self, path: Path | str):
        self.path = Path(path)
        self._lock = threading.Lock()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.touch(exist_ok=True)
        with open(self.path, "rb") as handle:
            records, good_end = _scan(handle, self.path)
        if good_end < self.path.stat().st_size:
            # torn final record from an interrupted append: trim it
            with open(self.path, "rb+") as handle:
                handle.truncate(good_end)
        self._head = len(records)
        self._handle = open(self.path, "ab")

    @property
    def head(self) -> int:
        return self._head

    def append(self, kind: str, payload: Mapping[str, object],
               recorded_at: float | None = None) -> int:
        return self.append_record(kind, payload, recorded_at).sequence

    def append_record(self, kind: str, payload: Mapping[str, object],
                      recorded_at: float | None = None) -> EventRecord:
        """Like append, returning the durable record (saves a re-scan)."""
        canonical = _validate_payload(kind, payload)
        with self._lock:
            record = EventRecord(self._head + 1, kind,
                                 time.time() if recorded_at is None else recorded_at,
                                 canonical)
            try:
                self._handle.write(_encode(record))
                self._handle.flush()
                os.fsync(self._handle.fileno())
            except OSError as err:
                raise StoreError(f"append failed: {err}") from err
            self._head = record.sequence
            return record

    def read(self, start: int = 1, upto: int | None = None) -> list[EventRecord]:
        """Records with start <= sequence <= upto, from a fresh scan."""
        with open(self.path, "rb") as handle:
            records, _ = _scan(handle, self.path)
        if upto is not None:
            records = records[:upto]
        return records[max(start - 1, 0):]

    def snapshot(self, as_of: int | None = None) -> "SnapshotState":
        if as_of is not None and as_of > self._head:
            raise SequenceError(f"as_of {as_of} beyond head {self._head}")
        return materialize(self.read(), as_of)

    def close(self) -> None:
        self._handle.close()

    def __enter__(self) -> "EventLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


# ---------------------------------------------------------------------------
# Materialised state: a pure fold over the event prefix.


@dataclass
class SnapshotState:
    """Alert/decision/outcome state at some sequence number."""

    head: int = 0
    alerts: dict = field(default_factory=dict)     # id -> canonical alert row
    status: dict = field(default_factory=dict)     # id -> status string
    meta: dict = field(default_factory=dict)       # id -> scores/flags from ingest
    decisions: dict = field(default_factory=dict)  # id -> decision payload
    outcomes: dict = field(default_factory=dict)   # id -> outcome payload

    def apply(self, record: EventRecord) -> None:
        if record.sequence != self.head + 1:
            raise StoreError(
                f"event {record.sequence} applied to state at {self.head}")
        payload = record.payload
        if record.kind == "AlertCreated":
            alert_id = payload["alert"]["id"]  # type: ignore[index]
            if alert_id in self.alerts:
                raise TransitionError(f"duplicate alert {alert_id}")
            self.alerts[alert_id] = payload["alert"]
            self.meta[alert_id] = {k: v for k, v in payload.items() if k != "alert"}
            self.status[alert_id] = (AUTO_REFERRED if payload.get("auto_referral")
                                     else PENDING)
        elif record.kind == "DecisionRecorded":
            alert_id = str(payload["alert_id"])
            current = self.status.get(alert_id)
            if current is None:
                raise TransitionError(f"decision for unknown alert {alert_id}")
            if current != PENDING:
                raise TransitionError(
                    f"decision on alert {alert_id} in status {current}")
            self.status[alert_id] = str(payload["decision"])
            self.decisions[alert_id] = payload
        elif record.kind == "OutcomeRecorded":
            alert_id = str(payload["alert_id"])
            current = self.status.get(alert_id)
            if current is None:
                raise TransitionError(f"outcome for unknown alert {alert_id}")
            if current not in (REFERRED, DISMISSED, AUTO_REFERRED):
                raise TransitionError(
                    f"outcome on alert {alert_id} in status {current}")
            self.status[alert_id] = OUTCOME_RECORDED
            self.outcomes[alert_id] = payload
        else:
            raise StoreError(f"unknown event kind {record.kind!r}")
        self.head = record.sequence

    def label_pairs(self) -> dict[str, LabelPair]:
        """Observed (referral, positive) labels for alerts with outcomes."""
        return {aid: map_outcome_to_labels(str(payload["outcome_code"]))
                for aid, payload in self.outcomes.items()}


def materialize(records: Sequence[EventRecord],
                as_of: int | None = None) -> SnapshotState:
    """Fold events 1..as_of into a SnapshotState (all of them when None)."""
    state = SnapshotState()
    for record in records:
        if as_of is not None and record.sequence > as_of:
            break
        state.apply(record)
    return state


# ---------------------------------------------------------------------------
# Model artifacts: .npz + manifest with sha256, verified on load.


def _sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _retuple(value):
    if isinstance(value, list):
        return tuple(_retuple(v) for v in value)
    if isinstance(value, dict):
        return {k: _retuple(v) for k, v in value.items()}
    return value


def _check_model_id(model_id: str) -> str:
    if not model_id or model_id.startswith(("/", ".")) or ".." in model_id:
        raise StoreError(f"unsafe model id {model_id!r}")
    allowed = set("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789._/-")
    if set(model_id) - allowed:
        raise StoreError(f"unsafe model id {model_id!r}")
    return model_id


class ModelStore:
    """Checksummed TrainedEnsemble artifacts under one directory."""

    def __init__(self, root: Path | str):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _paths(self, model_id: str) -> tuple[Path, Path]:
        base = self.root / _check_model_id(model_id)
        return Path(f"{base}.npz"), Path(f"{base}.manifest.json")

    def put_model(self, model: TrainedEnsemble, model_id: str) -> Path:
        blob_path, manifest_path = self._paths(model_id)
        blob_path.parent.mkdir(parents=True, exist_ok=True)

        arrays: dict[str, np.ndarray] = {}
        offsets = np.zeros(len(model.trees) + 1, np.int64)
        for i, tree in enumerate(model.trees):
            offsets[i + 1] = offsets[i] + tree.n_nodes
        arrays["offsets"] = offsets
        for name in ("feature", "threshold", "left", "right", "positives", "samples"):
            parts = [getattr(t, name) for t in model.trees]
            arrays[name] = (np.concatenate(parts) if parts
                            else np.zeros(0, np.float64))
        if model.tree_weights is not None:
            arrays["tree_weights"] = model.tree_weights
        if model.importances is not None:
            arrays["importances"] = model.importances

        tmp = Path(f"{blob_path}.tmp")
        with open(tmp, "wb") as handle:
            np.savez(handle, **arrays)
        os.replace(tmp, blob_path)

        manifest = {
            "artifact_format": ARTIFACT_FORMAT,
            "model_id": model_id,
            "kind": model.kind,
            "fingerprint": model.fingerprint,
            "fold_id": model.fold_id,
            "seed": model.seed,
            "prior": model.prior,
            "n_trees": model.n_trees,
            "params": model.params,
            "sha256": _sha256_file(blob_path),
        }
        tmp = Path(f"{manifest_path}.tmp")
        tmp.write_text(json.dumps(manifest, sort_keys=True, indent=1),
                       encoding="utf-8")
        os.replace(tmp, manifest_path)
        return blob_path

    def get_model(self, model_id: str,
                  expect_fingerprint: str | None = None) -> TrainedEnsemble:
        blob_path, manifest_path = self._paths(model_id)
        if not manifest_path.exists() or not blob_path.exists():
            raise NotFoundError(f"no model artifact {model_id!r}")
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        if manifest.get("artifact_format") != ARTIFACT_FORMAT:
            raise StoreError(f"unsupported artifact format for {model_id!r}")
        actual = _sha256_file(blob_path)
        if actual != manifest["sha256"]:
            raise StoreError(
                f"artifact checksum mismatch for {model_id!r}: "
                f"expected {manifest['sha256'][:12]}, file has {actual[:12]}")
        if expect_fingerprint is not None and \
                manifest["fingerprint"] != expect_fingerprint:
            raise StoreError(
                f"schema fingerprint mismatch for {model_id!r}")

        blob = np.load(blob_path, allow_pickle=False)
        offsets = blob["offsets"]
        trees = []
        for i in range(len(offsets) - 1):
            lo, hi = int(offsets[i]), int(offsets[i + 1])
            trees.append(Tree(blob["feature"][lo:hi], blob["threshold"][lo:hi],
                              blob["left"][lo:hi], blob["right"][lo:hi],
                              blob["positives"][lo:hi], blob["samples"][lo:hi]))
        return TrainedEnsemble(
            kind=manifest["kind"],
            trees=tuple(trees),
            tree_weights=blob["tree_weights"] if "tree_weights" in blob else None,
            params=_retuple(manifest["params"]),
            fingerprint=manifest["fingerprint"],
            fold_id=manifest["fold_id"],
            seed=manifest["seed"],
            importances=blob["importances"] if "importances" in blob else None,
            prior=manifest["prior"],
        )

    def has_model(self, model_id: str) -> bool:
        blob_path, manifest_path = self._paths(model_id)
        return blob_path.exists() and manifest_path.exists()

    def list_models(self) -> list[str]:
        found = []
        for manifest in sorted(self.root.rglob("*.manifest.json")):
            rel = manifest.relative_to(self.root)
            found.append(str(rel)[:-len(".manifest.json")])
        return found


# ---------------------------------------------------------------------------
# Run registry: resume bookkeeping for grid searches.


@dataclass(frozen=True)
class RunRecord:
    """One experiment run: identity hashes plus completed work units."""

    run_id: str
    config_hash: str
    manifest_hash: str
    fold_plans: tuple
    completed: Mapping[str, Mapping[str, str]]

    def is_complete(self, fold_id: str, point_id: str) -> bool:
        return f"{fold_id}|{point_id}" in self.completed


class RunRegistry:
    def __init__(self, root: Path | str):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, run_id: str) -> Path:
        return self.root / f"{_check_model_id(run_id)}.json"

    def open_run(self, run_id: str, config_hash: str, manifest_hash: str,
                 fold_plans: Sequence[Mapping]) -> RunRecord:
        """Create the run, or load it for resume when the hashes agree."""
        path = self._path(run_id)
        if path.exists():
            record = self.load(run_id)
            if record.config_hash != config_hash or \
                    record.manifest_hash != manifest_hash:
                raise StoreError(
                    f"run {run_id!r} exists with different config or corpus; "
                    "refusing to resume across definitions")
            return record
        record = RunRecord(run_id, config_hash, manifest_hash,
                           tuple(dict(p) for p in fold_plans), {})
        self._write(record)
        return record

    def load(self, run_id: str) -> RunRecord:
        path = self._path(run_id)
        if not path.exists():
            raise NotFoundError(f"no run {run_id!r}")
        doc = json.loads(path.read_text(encoding="utf-8"))
        return RunRecord(doc["run_id"], doc["config_hash"], doc["manifest_hash"],
                         tuple(doc["fold_plans"]), doc["completed"])

    def mark_complete(self, run_id: str, fold_id: str, point_id: str,
                      artifact: str = "", metrics: str = "") -> RunRecord:
        record = self.load(run_id)
        completed = dict(record.completed)
        completed[f"{fold_id}|{point_id}"] = {"artifact": artifact,
                                              "metrics": metrics}
        updated = RunRecord(record.run_id, record.config_hash,
                            record.manifest_hash, record.fold_plans, completed)
        self._write(updated)
        return updated

    def _write(self, record: RunRecord) -> None:
        doc = {"run_id": record.run_id, "config_hash": record.config_hash,
               "manifest_hash": record.manifest_hash,
               "fold_plans": list(record.fold_plans),
               "completed": record.completed}
        tmp = Path(f"{self._path(record.run_id)}.tmp")
        tmp.write_text(json.dumps(doc, sort_keys=True, indent=1), encoding="utf-8")
        os.replace(tmp, self._path(record.run_id))
