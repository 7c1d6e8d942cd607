import dataclasses
import math
import shutil

import numpy as np
import pytest
from fastapi.testclient import TestClient

from streetrank import pipeline
from streetrank.domain import alert_to_row, read_alerts_csv
from streetrank.service import calibrate_threshold, create_app

CONFIG = """\
seed: 11
out_dir: {out}
corpus:
  start_date: 2017-12-01
  end_date: 2018-03-31
  base_monthly_volume: 150
  n_hotspots: 8
  n_lsps: 10
features:
  lda_sweeps: 30
  lda_infer_sweeps: 8
grid:
  - {{kind: random_forest, label: PositiveOutcome, n_estimators: 20, max_depth: 4}}
  - {{kind: random_forest, label: Referral, n_estimators: 20, max_depth: 5}}
k_ladder: [5, 10, 25]
"""


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    root = tmp_path_factory.mktemp("svc")
    cfg_path = root / "exp.yaml"
    cfg_path.write_text(CONFIG.format(out=root / "out"), encoding="utf-8")
    cfg = pipeline.load_config(cfg_path)
    pipeline.cmd_synth(cfg)
    pipeline.cmd_featurize(cfg)
    pipeline.cmd_train(cfg)
    pipeline.cmd_evaluate(cfg)
    alerts, _ = read_alerts_csv(cfg.corpus_dir / "alerts.csv")
    return cfg, alerts


@pytest.fixture
def harness(experiment, tmp_path):
    """Fresh copy of the finished experiment plus an app over it."""
    cfg, alerts = experiment
    out = tmp_path / "out"
    shutil.copytree(cfg.out_dir, out)
    local = dataclasses.replace(cfg, out_dir=out)
    app = create_app(local)
    return TestClient(app), app, alerts


def make_row(alerts, i: int, **override) -> dict:
    row = alert_to_row(alerts[100 + i * 3])
    row["id"] = f"live-{i:04d}"
    row.update(override)
    return row


def test_healthz_reports_ready(harness):
    client, app, _ = harness
    body = client.get("/healthz").json()
    assert body["status"] == "ok"
    assert body["ready"] is True
    assert body["queue_depth"] == 0


def test_ingest_scores_and_queues(harness):
    client, app, alerts = harness
    reply = client.post("/alerts", json=make_row(alerts, 0))
    assert reply.status_code == 201
    body = reply.json()
    assert body["id"] == "live-0000"
    assert 0.0 <= body["po_score"] <= 1.0
    assert 0.0 <= body["ref_score"] <= 1.0
    assert body["status"] == "PendingReview"
    queue = client.get("/queue").json()
    assert [e["id"] for e in queue["entries"]] == ["live-0000"]
    assert queue["entries"][0]["po_score"] == body["po_score"]


def test_ingest_rejects_duplicates_and_garbage(harness):
    client, _, alerts = harness
    row = make_row(alerts, 1)
    assert client.post("/alerts", json=row).status_code == 201
    assert client.post("/alerts", json=row).status_code == 409
    assert client.post("/alerts",
                       json=make_row(alerts, 2, latitude="95.0")
                       ).status_code == 400
    assert client.post("/alerts", json=["not", "an", "object"]
                       ).status_code == 400
    missing = make_row(alerts, 3)
    del missing["created_at"]
    assert client.post("/alerts", json=missing).status_code == 400


def test_queue_order_and_pagination(harness):
    client, _, alerts = harness
    for i in range(23):
        assert client.post("/alerts",
                           json=make_row(alerts, i)).status_code == 201
    full = client.get("/queue", params={"limit": 500}).json()
    assert full["pending_total"] == 23
    entries = full["entries"]
    keys = [(-e["po_score"],
             e["created_at"], e["id"]) for e in entries]
    assert keys == sorted(keys)

    walked = []
    cursor = None
    while True:
        params = {"limit": 7}
        if cursor:
            params["cursor"] = cursor
        page = client.get("/queue", params=params).json()
        walked.extend(e["id"] for e in page["entries"])
        cursor = page["cursor"]
        if cursor is None:
            break
    assert walked == [e["id"] for e in entries]
    assert client.get("/queue", params={"cursor": "@@@"}).status_code == 400


def test_id_breaks_score_ties(harness):
    client, _, alerts = harness
    base = make_row(alerts, 4)
    for alert_id in ("live-zz", "live-aa", "live-mm"):
        row = dict(base)
        row["id"] = alert_id
        assert client.post("/alerts", json=row).status_code == 201
    listed = [e["id"] for e in client.get("/queue").json()["entries"]]
    assert listed == ["live-aa", "live-mm", "live-zz"]   # equal scores


def test_decision_flow_and_idempotency(harness):
    client, _, alerts = harness
    client.post("/alerts", json=make_row(alerts, 5))
    first = client.post("/alerts/live-0005/decision",
                        json={"decision": "Referred", "idempotency_key": "k"})
    assert first.status_code == 200
    assert first.json() == {"id": "live-0005", "status": "Referred"}
    replay = client.post("/alerts/live-0005/decision",
                         json={"decision": "Referred", "idempotency_key": "k"})
    assert replay.status_code == 200
    assert replay.json() == first.json()
    # no key: the transition really is illegal now
    again = client.post("/alerts/live-0005/decision",
                        json={"decision": "Dismissed"})
    assert again.status_code == 409
    assert client.post("/alerts/ghost/decision",
                       json={"decision": "Referred"}).status_code == 404
    assert client.post("/alerts/live-0005/decision",
                       json={"decision": "Maybe"}).status_code == 409


def test_outcome_transitions(harness):
    client, _, alerts = harness
    client.post("/alerts", json=make_row(alerts, 6))
    # outcome straight from the queue is illegal
    early = client.post("/alerts/live-0006/outcome",
                        json={"outcome_code": "PersonFound"})
    assert early.status_code == 409
    client.post("/alerts/live-0006/decision", json={"decision": "Dismissed"})
    late = client.post("/alerts/live-0006/outcome",
                       json={"outcome_code": "PersonNotFound",
                             "resolved_at": "2018-04-02T10:00:00Z"})
    assert late.status_code == 200
    assert late.json()["status"] == "OutcomeRecorded"
    # and never twice
    assert client.post("/alerts/live-0006/outcome",
                       json={"outcome_code": "PersonFound"}).status_code == 409
    assert client.post("/alerts/live-0006/outcome",
                       json={"outcome_code": "Bogus"}).status_code == 409


def test_auto_referral_threshold(harness):
    client, app, alerts = harness
    scorer = app.state.scorer
    scorer.threshold = 0.0    # everything clears the bar
    reply = client.post("/alerts", json=make_row(alerts, 7)).json()
    assert reply["auto_referral"] is True
    assert reply["status"] == "AutoReferred"
    assert client.get("/queue").json()["entries"] == []
    # auto-referred alerts accept outcomes but not decisions
    assert client.post("/alerts/live-0007/decision",
                       json={"decision": "Referred"}).status_code == 409
    assert client.post("/alerts/live-0007/outcome",
                       json={"outcome_code": "PersonFound"}).status_code == 200
    scorer.threshold = math.inf
    reply = client.post("/alerts", json=make_row(alerts, 8)).json()
    assert reply["auto_referral"] is False


def test_metrics_absent_rates_stay_absent(harness):
    client, _, alerts = harness
    body = client.get("/metrics").json()
    assert body["found_rate"] is None
    assert body["queue_depth"] == 0
    client.post("/alerts", json=make_row(alerts, 9))
    body = client.get("/metrics").json()
    assert body["found_rate"] is None     # still no outcomes
    assert body["queue_depth"] == 1
    client.post("/alerts/live-0009/decision", json={"decision": "Referred"})
    client.post("/alerts/live-0009/outcome",
                json={"outcome_code": "PersonFound"})
    body = client.get("/metrics").json()
    assert body["found_rate"] == 1.0
    assert body["outcomes_recorded"] == 1


def test_metrics_suppresses_small_groups(harness):
    client, _, alerts = harness
    for i in range(3):
        client.post("/alerts", json=make_row(alerts, 10 + i))
    body = client.get("/metrics").json()
    assert body["bias"]
    for row in body["bias"]:
        if row["suppressed"]:
            assert row["size"] == "<5"
            assert row["referral_rate"] is None
            assert row["found_rate"] is None


def test_replay_rebuilds_identical_state(experiment, tmp_path):
    cfg, alerts = experiment
    out = tmp_path / "out"
    shutil.copytree(cfg.out_dir, out)
    local = dataclasses.replace(cfg, out_dir=out)
    first = TestClient(create_app(local))
    for i in range(12):
        assert first.post("/alerts",
                          json=make_row(alerts, i)).status_code == 201
    first.post("/alerts/live-0002/decision", json={"decision": "Referred"})
    first.post("/alerts/live-0003/decision", json={"decision": "Dismissed"})
    first.post("/alerts/live-0002/outcome",
               json={"outcome_code": "PersonFound"})
    queue_before = first.get("/queue", params={"limit": 500}).json()
    metrics_before = first.get("/metrics").json()
    health_before = first.get("/healthz").json()

    second = TestClient(create_app(local))   # same log, fresh process
    assert second.get("/queue", params={"limit": 500}).json() == queue_before
    assert second.get("/metrics").json() == metrics_before
    assert second.get("/healthz").json() == health_before
    # 15 events: 12 ingests, 2 decisions, 1 outcome
    assert health_before["events"] == 15
    # idempotency keys survive the replay too
    first.post("/alerts/live-0004/decision",
               json={"decision": "Referred", "idempotency_key": "rk"})
    third = TestClient(create_app(local))
    replay = third.post("/alerts/live-0004/decision",
                        json={"decision": "Referred", "idempotency_key": "rk"})
    assert replay.status_code == 200
    assert replay.json()["status"] == "Referred"


def test_unready_service_returns_503(experiment, tmp_path):
    cfg, alerts = experiment
    bare = dataclasses.replace(cfg, out_dir=tmp_path / "empty")
    client = TestClient(create_app(bare))
    assert client.get("/healthz").json()["ready"] is False
    assert client.post("/alerts",
                       json=make_row(alerts, 0)).status_code == 503
    assert client.get("/queue").json()["entries"] == []


def test_serves_static_ui(experiment, tmp_path):
    cfg, _ = experiment
    out = tmp_path / "out"
    shutil.copytree(cfg.out_dir, out)
    local = dataclasses.replace(cfg, out_dir=out)
    ui = tmp_path / "dist"
    ui.mkdir()
    (ui / "index.html").write_text("<!doctype html><title>triage</title>")
    client = TestClient(create_app(local, static_dir=ui))
    page = client.get("/")
    assert page.status_code == 200
    assert "triage" in page.text
    assert client.get("/healthz").json()["status"] == "ok"   # API still wins


# ---------------------------------------------------------------------------
# threshold calibration


def test_calibrate_threshold_picks_deepest_qualifying_prefix():
    scores = np.array([0.9, 0.8, 0.7, 0.6, 0.5])
    positive = np.array([1, 1, 0, 1, 0], np.int8)
    created = np.arange(5, dtype=np.int64)
    ids = [f"a{i}" for i in range(5)]
    # prefix precisions: 1, 1, 2/3, 3/4, 3/5
    assert calibrate_threshold(scores, positive, created, ids, 0.75) == 0.6
    assert calibrate_threshold(scores, positive, created, ids, 1.0) == 0.8
    assert calibrate_threshold(scores, positive, created, ids, 0.5) == 0.5


def test_calibrate_threshold_without_qualifying_prefix_disables():
    scores = np.array([0.9, 0.8])
    positive = np.array([0, 0], np.int8)
    created = np.arange(2, dtype=np.int64)
    assert calibrate_threshold(scores, positive, created, ["a", "b"],
                               0.75) == math.inf


def test_calibrate_threshold_skips_nulls():
    scores = np.array([0.9, 0.8, 0.7])
    positive = np.array([-1, 1, -1], np.int8)
    created = np.arange(3, dtype=np.int64)
    # nulls contribute nothing; the labelled prefix is all-positive
    assert calibrate_threshold(scores, positive, created, ["a", "b", "c"],
                               1.0) == 0.7
