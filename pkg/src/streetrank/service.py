"""Triage scoring service.

Wraps one finished experiment: loads the best model per ranking target from
the run's artifacts, scores alerts as they arrive, keeps a review queue
ordered by positive-outcome score, and records every state change in an
append-only event log under ``<out_dir>/service/``. Restarting the service
replays that log, so the queue comes back exactly as it was.

Scoring uses the same feature code as training. Aggregate features see a
history snapshot (corpus plus previously ingested alerts) that refreshes at
most once per ``serve.refresh_seconds``, so a burst of posts does not trigger
a rebuild per request.

Alerts whose positive-outcome score clears the auto-referral threshold skip
the queue. The threshold is calibrated on the latest fold's validation
scores: the deepest ranking prefix whose labelled precision still meets
``serve.auto_referral_precision``. When no prefix qualifies (or there are no
validation artifacts) the threshold is +inf and nothing is auto-referred.
"""
from __future__ import annotations

import base64
import json
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles

from . import evaluate as ev
from . import features as ft
from . import learners, tempcv
from .domain import (OutcomeCode, OutcomeRecord, RejectionError, alert_to_row,
                     parse_timestamp, validate_alert)
from .pipeline import (ExperimentConfig, PipelineError, _fold_paths,
                       _load_labels, _unit_seed, select_groups, _load_corpus)
from .store import (AUTO_REFERRED, PENDING, EventLog, ModelStore, SchemaError,
                    StoreError, TransitionError, materialize)
from .textmine import LdaModel

QUEUE_PAGE_LIMIT = 500
DEFAULT_PAGE = 50


def calibrate_threshold(scores, positive, created, ids,
                        target_precision: float) -> float:
    """Score cutoff of the deepest prefix meeting the precision target.

    Walks the validation ranking; NULL labels don't count toward precision.
    Returns +inf when no prefix qualifies.
    """
    order = ev.rank_order(scores, created, ids)
    found = 0
    labelled = 0
    best = -1
    for rank, idx in enumerate(order):
        if positive[idx] == 1:
            found += 1
            labelled += 1
        elif positive[idx] == 0:
            labelled += 1
        if labelled and found / labelled >= target_precision:
            best = rank
    if best < 0:
        return math.inf
    return float(np.asarray(scores, np.float64)[order[best]])


def _best_points_from_summary(path: Path) -> dict[str, str]:
    """label -> point_id of the evaluation winner (dummies never win)."""
    best: dict[str, str] = {}
    if not path.exists():
        return best
    lines = path.read_text(encoding="utf-8").strip().splitlines()
    header = lines[0].split(",")
    rows = [dict(zip(header, line.split(","))) for line in lines[1:]]
    for label in ("PositiveOutcome", "Referral"):
        pool = [r for r in rows if r["label"] == label
                and r["kind"] != learners.KIND_DUMMY]
        pool.sort(key=lambda r: (-float(r["avg_found_rate_matched_k"] or 0.0),
                                 -float(r["avg_recall_matched_k"] or -1.0),
                                 r["point_id"]))
        if pool:
            best[label] = pool[0]["point_id"]
    return best


@dataclass
class Scorer:
    """Everything needed to turn one alert into (po_score, ref_score)."""

    cfg: ExperimentConfig
    po_model: learners.TrainedEnsemble
    ref_model: learners.TrainedEnsemble | None
    topic_models: ft.TopicModels
    priors: ft.LspPriors
    threshold: float
    hotspots: list
    weather: list
    corpus_alerts: list
    corpus_outcomes: list
    refresh_seconds: float
    _alerts: list = field(default_factory=list)
    _outcomes: list = field(default_factory=list)
    _stamp: float = field(default=-math.inf)

    def refresh(self, state, now: float | None = None) -> None:
        """Rebuild the aggregate-history snapshot from corpus + event state."""
        now = time.monotonic() if now is None else now
        if now - self._stamp < self.refresh_seconds:
            return
        corpus_ids = {a.id for a in self.corpus_alerts}
        live_alerts = [validate_alert(row) for aid, row in
                       sorted(state.alerts.items()) if aid not in corpus_ids]
        live_outcomes = [
            OutcomeRecord(alert_id=aid,
                          outcome_code=OutcomeCode(p["outcome_code"]),
                          resolved_at=parse_timestamp(p["resolved_at"]))
            for aid, p in sorted(state.outcomes.items())
            if "resolved_at" in p]
        self._alerts = self.corpus_alerts + live_alerts
        self._outcomes = self.corpus_outcomes + live_outcomes
        self._stamp = now

    def score(self, alert) -> tuple[float, float | None]:
        base = ft.build_base_features(self._alerts + [alert], self._outcomes,
                                      self.hotspots, self.weather,
                                      target_ids={alert.id})
        matrix = ft.finalize_matrix(
            base, self.topic_models, self.priors,
            infer_sweeps=self.cfg.lda_infer_sweeps,
            infer_seed=_unit_seed(self.cfg.seed, "serve", alert.id))
        matrix = select_groups(matrix, self.cfg.include_groups)
        po = float(learners.predict_scores(self.po_model, matrix)[0])
        ref = None
        if self.ref_model is not None:
            ref = float(learners.predict_scores(self.ref_model, matrix)[0])
        return po, ref


def build_scorer(cfg: ExperimentConfig) -> Scorer | None:
    """Load models + featurizer state; None when artifacts are not there yet."""
    try:
        folds = tempcv.make_folds(cfg.cv)
        latest = folds[-1].fold_id
        paths = _fold_paths(cfg, latest)
        shop = ModelStore(cfg.out_dir / "models")
        best = _best_points_from_summary(cfg.reports_dir / "summary.csv")

        def pick(prefix: str, label: str) -> str | None:
            if label in best:
                return best[label]
            named = [m for m in shop.list_models()
                     if m.startswith(f"{latest}/{prefix}")
                     and not m.endswith("_dummy")]
            return named[0].split("/", 1)[1] if named else None

        po_point = pick("po_", "PositiveOutcome")
        if po_point is None:
            return None
        po_model = shop.get_model(f"{latest}/{po_point}")
        ref_point = pick("ref_", "Referral")
        ref_model = shop.get_model(f"{latest}/{ref_point}") \
            if ref_point else None

        topic_models = ft.TopicModels(
            location=LdaModel.load(paths["lda_location"]),
            activity=LdaModel.load(paths["lda_activity"]))
        prior_doc = json.loads(paths["lsp_priors"].read_text(encoding="utf-8"))
        priors = ft.LspPriors(found_rate=prior_doc["found_rate"],
                              response_hours=prior_doc["response_hours"])

        labels = _load_labels(paths["test_labels"])
        validation = np.load(cfg.out_dir / "scores" / latest /
                             f"{po_point}.npz", allow_pickle=False)
        threshold = calibrate_threshold(
            validation["scores"], labels["positive"], labels["created"],
            labels["ids"], cfg.serve.auto_referral_precision)

        alerts, outcomes, hotspots, weather = _load_corpus(cfg)
    except (FileNotFoundError, PipelineError, StoreError):
        return None
    return Scorer(cfg=cfg, po_model=po_model, ref_model=ref_model,
                  topic_models=topic_models, priors=priors,
                  threshold=threshold, hotspots=hotspots, weather=weather,
                  corpus_alerts=alerts, corpus_outcomes=outcomes,
                  refresh_seconds=cfg.serve.refresh_seconds)


def _encode_cursor(key: tuple) -> str:
    raw = json.dumps(list(key), separators=(",", ":")).encode()
    return base64.urlsafe_b64encode(raw).decode()


def _decode_cursor(token: str) -> tuple:
    try:
        score, created, alert_id = json.loads(
            base64.urlsafe_b64decode(token.encode()))
        return float(score), int(created), str(alert_id)
    except Exception:
        raise HTTPException(status_code=400, detail="bad cursor") from None


def create_app(cfg: ExperimentConfig,
               static_dir: Path | str | None = None) -> FastAPI:
    """The service over one experiment's artifacts and its own event log."""
    log_dir = cfg.out_dir / "service"
    log_dir.mkdir(parents=True, exist_ok=True)
    log = EventLog(log_dir / "events.log")
    state = materialize(log.read())
    scorer = build_scorer(cfg)
    if scorer is not None:
        scorer.refresh(state)
    lock = threading.Lock()
    # idempotency: (alert_id, endpoint, key) -> response already given
    replayed: dict[tuple, dict] = {}
    for aid, payload in state.decisions.items():
        if "idempotency_key" in payload:
            replayed[(aid, "decision", payload["idempotency_key"])] = \
                {"id": aid, "status": state.status[aid]}
    for aid, payload in state.outcomes.items():
        if "idempotency_key" in payload:
            replayed[(aid, "outcome", payload["idempotency_key"])] = \
                {"id": aid, "status": state.status[aid]}

    app = FastAPI(title="streetrank triage service")
    app.state.log = log
    app.state.snapshot = state
    app.state.scorer = scorer

    def entry_for(alert_id: str) -> dict:
        row = state.alerts[alert_id]
        meta = state.meta.get(alert_id, {})
        return {
            "id": alert_id,
            "created_at": row["created_at"],
            "po_score": meta.get("po_score"),
            "ref_score": meta.get("ref_score"),
            "auto_referral": bool(meta.get("auto_referral", False)),
            "status": state.status[alert_id],
            "alert": row,
        }

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "ready": scorer is not None,
                "events": state.head,
                "queue_depth": sum(1 for s in state.status.values()
                                   if s == PENDING)}

    @app.post("/alerts", status_code=201)
    async def ingest(request: Request):
        body = await request.json()
        if not isinstance(body, dict):
            raise HTTPException(status_code=400, detail="body must be an object")
        if scorer is None:
            raise HTTPException(status_code=503,
                                detail="no model artifacts loaded")
        try:
            alert = validate_alert(body)
        except RejectionError as err:
            raise HTTPException(status_code=400, detail=str(err)) from None
        with lock:
            if alert.id in state.alerts:
                raise HTTPException(status_code=409,
                                    detail=f"alert {alert.id} already ingested")
            scorer.refresh(state)
            try:
                po, ref = scorer.score(alert)
            except ValueError as err:
                raise HTTPException(status_code=400, detail=str(err)) from None
            auto = math.isfinite(scorer.threshold) and po >= scorer.threshold
            payload = {"alert": alert_to_row(alert), "po_score": po,
                       "auto_referral": auto}
            if ref is not None:
                payload["ref_score"] = ref
            state.apply(log.append_record("AlertCreated", payload))
        return {"id": alert.id, "po_score": po, "ref_score": ref,
                "auto_referral": auto,
                "status": AUTO_REFERRED if auto else PENDING}

    @app.get("/queue")
    def queue(limit: int = DEFAULT_PAGE, cursor: str | None = None):
        limit = max(1, min(int(limit), QUEUE_PAGE_LIMIT))
        with lock:
            pending = [aid for aid, status in state.status.items()
                       if status == PENDING]
            keyed = []
            for aid in pending:
                meta = state.meta.get(aid, {})
                created = int(parse_timestamp(
                    state.alerts[aid]["created_at"]).timestamp())
                keyed.append(((-float(meta.get("po_score") or 0.0), created,
                               aid), aid))
            keyed.sort()
            if cursor is not None:
                score, created, aid = _decode_cursor(cursor)
                after = (-score, created, aid)
                keyed = [item for item in keyed if item[0] > after]
            page = keyed[:limit]
            entries = [entry_for(aid) for _, aid in page]
        next_cursor = None
        if len(keyed) > limit:
            last_key = page[-1][0]
            next_cursor = _encode_cursor((-last_key[0], last_key[1],
                                          last_key[2]))
        return {"entries": entries, "cursor": next_cursor,
                "pending_total": len(keyed) if cursor is None else None}

    def _transition(alert_id: str, endpoint: str, kind: str, payload: dict,
                    idempotency_key: str | None):
        with lock:
            if alert_id not in state.alerts:
                raise HTTPException(status_code=404,
                                    detail=f"no alert {alert_id}")
            if idempotency_key is not None:
                done = replayed.get((alert_id, endpoint, idempotency_key))
                if done is not None:
                    return JSONResponse(done)
                payload = {**payload, "idempotency_key": idempotency_key}
            current = state.status.get(alert_id)
            legal = (kind == "DecisionRecorded" and current == PENDING) or \
                (kind == "OutcomeRecorded" and current in
                 ("Referred", "Dismissed", AUTO_REFERRED))
            if not legal:
                raise HTTPException(
                    status_code=409,
                    detail=f"{kind} not allowed in status {current}")
            try:
                state.apply(log.append_record(kind, payload))
            except SchemaError as err:
                raise HTTPException(status_code=400, detail=str(err)) from None
            result = {"id": alert_id, "status": state.status[alert_id]}
            if idempotency_key is not None:
                replayed[(alert_id, endpoint, idempotency_key)] = result
        return JSONResponse(result)

    @app.post("/alerts/{alert_id}/decision")
    async def decide(alert_id: str, request: Request):
        body = await request.json()
        payload = {"alert_id": alert_id, "decision": body.get("decision")}
        if body.get("note"):
            payload["note"] = str(body["note"])
        return _transition(alert_id, "decision", "DecisionRecorded", payload,
                           body.get("idempotency_key"))

    @app.post("/alerts/{alert_id}/outcome")
    async def record_outcome(alert_id: str, request: Request):
        body = await request.json()
        payload = {"alert_id": alert_id,
                   "outcome_code": body.get("outcome_code")}
        if body.get("resolved_at"):
            payload["resolved_at"] = str(body["resolved_at"])
        return _transition(alert_id, "outcome", "OutcomeRecorded", payload,
                           body.get("idempotency_key"))

    @app.get("/metrics")
    def metrics():
        with lock:
            statuses = dict(state.status)
            meta = {k: dict(v) for k, v in state.meta.items()}
            rows = dict(state.alerts)
            decisions = {k: dict(v) for k, v in state.decisions.items()}
            pairs = state.label_pairs()
        counts: dict[str, int] = {}
        for status in statuses.values():
            counts[status] = counts.get(status, 0) + 1
        referred = sum(1 for m in meta.values() if m.get("auto_referral")) \
            + sum(1 for d in decisions.values() if d["decision"] == "Referred")

        found = sum(1 for p in pairs.values() if p.positive.value == "Yes")
        not_found = sum(1 for p in pairs.values() if p.positive.value == "No")
        found_rate = found / (found + not_found) if found + not_found else None

        scored = [aid for aid in rows if meta.get(aid, {}).get("po_score")
                  is not None]
        body: dict = {
            "queue_depth": counts.get(PENDING, 0),
            "status_counts": counts,
            "alerts_total": len(rows),
            "referred_total": referred,
            "outcomes_recorded": len(pairs),
            "found_rate": found_rate,
            "auto_referral_threshold":
                None if scorer is None or not math.isfinite(scorer.threshold)
                else scorer.threshold,
        }

        if scored:
            ids = sorted(scored)
            po = np.array([meta[a]["po_score"] for a in ids], np.float64)
            created = np.array([int(parse_timestamp(
                rows[a]["created_at"]).timestamp()) for a in ids], np.int64)
            positive = np.array(
                [1 if a in pairs and pairs[a].positive.value == "Yes" else
                 0 if a in pairs and pairs[a].positive.value == "No" else -1
                 for a in ids], np.int8)
            genders = [rows[a]["gender"] for a in ids]
            ages = [rows[a]["age_band"] for a in ids]

            bias = ev.bias_slices(po, positive, created, ids,
                                  max(1, referred),
                                  {"gender": genders, "age_band": ages})
            body["bias"] = [
                {"dimension": r.dimension, "group": r.group,
                 "size": "<5" if r.suppressed else r.size,
                 "suppressed": r.suppressed,
                 "referral_rate": r.referral_rate,
                 "found_rate": r.found_rate,
                 "representation_ratio": r.representation_ratio}
                for r in bias]

            both = [a for a in ids if meta[a].get("ref_score") is not None]
            if both and referred >= 1 and found >= 1:
                index_of = {a: i for i, a in enumerate(ids)}
                sel = [index_of[a] for a in both]
                words = []
                for a in both:
                    alert = validate_alert(rows[a])
                    words.append(sum(ft.word_counts(alert)))
                ref = np.array([meta[a]["ref_score"] for a in both],
                               np.float64)
                quadrant = ev.quadrant_report(
                    po[sel], ref, positive[sel],
                    [genders[i] for i in sel], [ages[i] for i in sel],
                    words, created[sel], both,
                    n_referrals=min(referred, len(both)),
                    n_found=min(found, len(both)))
                body["quadrant"] = {
                    "po_threshold": quadrant.po_threshold,
                    "ref_threshold": quadrant.ref_threshold,
                    "cells": {c.name: c.count for c in quadrant.cells},
                }
        return body

    if static_dir is not None and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=static_dir, html=True),
                  name="ui")
    return app
