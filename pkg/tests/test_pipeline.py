import json
from pathlib import Path

import numpy as np
import pytest

from streetrank import cli, pipeline
from streetrank.features import FeatureMatrix
from streetrank.pipeline import (ALL_GROUPS, ConfigError, ExperimentConfig,
                                 GridPoint, PipelineError, desk_grid,
                                 full_grid, load_config, select_groups)

SMOKE_YAML = """\
seed: 7
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
target: PositiveOutcome
grid:
  - {{kind: random_forest, label: PositiveOutcome, n_estimators: 20, max_depth: 4}}
  - {{kind: random_forest, label: Referral, n_estimators: 20, max_depth: 5}}
  - {{kind: stratified_dummy, label: PositiveOutcome}}
k_ladder: [5, 10, 25]
"""


def write_config(directory: Path, body: str, name: str = "exp.yaml") -> Path:
    path = directory / name
    path.write_text(body, encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    """One full stage-by-stage run shared by the read-only assertions."""
    root = tmp_path_factory.mktemp("smoke")
    cfg_path = write_config(root, SMOKE_YAML.format(out=root / "out"))
    cfg = load_config(cfg_path)
    pipeline.cmd_synth(cfg)
    pipeline.cmd_featurize(cfg)
    pipeline.cmd_train(cfg)
    pipeline.cmd_evaluate(cfg)
    pipeline.cmd_report(cfg)
    return cfg, cfg_path


# ---------------------------------------------------------------------------
# config loading


def test_defaults_use_desk_grid(tmp_path):
    cfg_path = write_config(tmp_path, "seed: 3\nout_dir: x\n")
    cfg = load_config(cfg_path)
    assert cfg.grid == desk_grid("PositiveOutcome")
    assert len(cfg.grid) == 17
    assert cfg.include_groups == ALL_GROUPS
    assert cfg.seed == 3


def test_full_grid_flag_overrides_grid(tmp_path):
    cfg_path = write_config(tmp_path, "seed: 3\nout_dir: x\n")
    cfg = load_config(cfg_path, use_full_grid=True)
    assert cfg.grid == full_grid("PositiveOutcome")
    assert len(cfg.grid) > 100


def test_cli_overrides_beat_config(tmp_path):
    cfg_path = write_config(tmp_path, "seed: 3\nout_dir: from_config\n")
    cfg = load_config(cfg_path, seed=99, out_dir=tmp_path / "elsewhere")
    assert cfg.seed == 99
    assert cfg.out_dir == tmp_path / "elsewhere"


@pytest.mark.parametrize("body,fragment", [
    ("bogus: 1\n", "unknown config"),
    ("corpus: {bogus: 1}\n", "unknown corpus"),
    ("cv: {bogus_days: 1}\n", "unknown cv"),
    ("features: {include_groups: [Weather], exclude_groups: [Weather]}\n",
     "not both"),
    ("features: {include_groups: [NoSuchGroup]}\n", "unknown feature groups"),
    ("features: {exclude_groups: [NoSuchGroup]}\n", "unknown feature groups"),
    ("target: Bogus\n", "unknown target"),
    ("grid: [{kind: warp_drive}]\n", "unknown model kind"),
    ("grid: [{n_estimators: 5}]\n", "missing kind"),
    ("grid: [{kind: random_forest, bogus: 1}]\n", "unknown grid"),
    ("k_ladder: [10, 5]\n", "ascending"),
    ("k_ladder: [0, 5]\n", "ascending"),
    ("workers: 0\n", "workers"),
    ("corpus: {start_date: nonsense}\n", "bad date"),
    ("serve: {port: 99999}\n", "port"),
], ids=lambda v: v.split("\n")[0][:40] if ":" in str(v) else str(v))
def test_config_rejects(tmp_path, body, fragment):
    cfg_path = write_config(tmp_path, body)
    with pytest.raises(ConfigError, match=fragment):
        load_config(cfg_path)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.yaml")


def test_corpus_source_must_exist(tmp_path):
    cfg_path = write_config(tmp_path, "corpus: {source: /no/such/dir}\n")
    with pytest.raises(ConfigError, match="manifest"):
        load_config(cfg_path)


def test_exclude_groups_shrinks_schema(tmp_path):
    cfg_path = write_config(
        tmp_path, "features: {exclude_groups: [Weather, LdaTopics]}\n")
    cfg = load_config(cfg_path)
    assert set(ALL_GROUPS) - set(cfg.include_groups) == {"Weather", "LdaTopics"}


def test_duplicate_grid_points_rejected(tmp_path):
    body = ("grid:\n"
            "  - {kind: stratified_dummy}\n"
            "  - {kind: stratified_dummy}\n")
    with pytest.raises(ConfigError, match="duplicate"):
        load_config(write_config(tmp_path, body))


def test_point_ids_are_readable():
    assert GridPoint("random_forest", "PositiveOutcome", 500, 5).point_id \
        == "po_rf_n500_d5"
    assert GridPoint("random_forest", "Referral", 100, None).point_id \
        == "ref_rf_n100_dNone"
    assert GridPoint("adaboost", "PositiveOutcome", 100,
                     learning_rate=0.1).point_id == "po_ada_n100_lr0.1"
    assert GridPoint("stratified_dummy", "Referral").point_id == "ref_dummy"


# ---------------------------------------------------------------------------
# config hash


def test_hash_ignores_out_dir_and_workers(tmp_path):
    base = "seed: 3\nout_dir: a\nworkers: 1\n"
    alt = "seed: 3\nout_dir: b\nworkers: 6\n"
    h1 = load_config(write_config(tmp_path, base, "a.yaml")).config_hash
    h2 = load_config(write_config(tmp_path, alt, "b.yaml")).config_hash
    assert h1 == h2


def test_hash_tracks_seed_grid_and_groups(tmp_path):
    base = load_config(write_config(tmp_path, "seed: 3\n", "a.yaml"))
    for body in ("seed: 4\n",
                 "seed: 3\ngrid: [{kind: stratified_dummy}]\n",
                 "seed: 3\nfeatures: {exclude_groups: [Weather]}\n",
                 "seed: 3\ncv: {buffer_days: 14}\n"):
        other = load_config(write_config(tmp_path, body, "b.yaml"))
        assert other.config_hash != base.config_hash


# ---------------------------------------------------------------------------
# select_groups


def test_select_groups_keeps_exact_columns():
    matrix = FeatureMatrix(("a", "b"), ("x", "y", "z"), ("G1", "G2", "G1"),
                           np.arange(6, dtype=np.float64).reshape(2, 3))
    picked = select_groups(matrix, ("G1",))
    assert picked.names == ("x", "z")
    assert picked.groups == ("G1", "G1")
    assert np.array_equal(picked.values, [[0.0, 2.0], [3.0, 5.0]])
    with pytest.raises(PipelineError):
        select_groups(matrix, ("G3",))


# ---------------------------------------------------------------------------
# stages on the shared smoke run


def test_synth_writes_corpus(smoke):
    cfg, _ = smoke
    for name in ("alerts.csv", "outcomes.csv", "hotspots.csv", "weather.csv",
                 "manifest.json"):
        assert (cfg.corpus_dir / name).exists()


def test_featurize_writes_audited_folds(smoke):
    cfg, _ = smoke
    manifest = json.loads((cfg.features_dir / "features_manifest.json")
                          .read_text())
    assert manifest["folds"] == ["2018-01", "2018-02", "2018-03"]
    assert manifest["n_columns"] > 200
    for fold_id in manifest["folds"]:
        for side in ("train", "test"):
            assert (cfg.features_dir / f"fold_{fold_id}.{side}.npz").exists()
            assert (cfg.features_dir /
                    f"fold_{fold_id}.{side}.labels.npz").exists()
    matrix = FeatureMatrix.load_npz(cfg.features_dir / "fold_2018-01.test.npz")
    assert matrix.fingerprint == manifest["fingerprint"]


def test_featurize_is_idempotent(smoke):
    cfg, _ = smoke
    stamp = (cfg.features_dir / "fold_2018-01.train.npz").stat().st_mtime_ns
    pipeline.cmd_featurize(cfg)   # same hash: must not rebuild
    assert (cfg.features_dir /
            "fold_2018-01.train.npz").stat().st_mtime_ns == stamp


def test_train_covers_every_unit(smoke):
    cfg, _ = smoke
    from streetrank.store import ModelStore, RunRegistry
    run = RunRegistry(cfg.out_dir / "runs").load(cfg.run_id)
    shop = ModelStore(cfg.out_dir / "models")
    for fold_id in ("2018-01", "2018-02", "2018-03"):
        for point in cfg.grid:
            assert run.is_complete(fold_id, point.point_id)
            assert shop.has_model(f"{fold_id}/{point.point_id}")
    assert pipeline.cmd_train(cfg) == 0   # nothing left to do


def test_unit_metrics_have_one_row_per_k(smoke):
    cfg, _ = smoke
    path = cfg.out_dir / "metrics" / "2018-01" / "po_rf_n20_d4.csv"
    lines = path.read_text().strip().splitlines()
    per_fold = [l for l in lines[1:] if l.startswith("2018-01,")]
    assert len(per_fold) == len(cfg.k_ladder_po)
    ks = [int(l.split(",")[1]) for l in per_fold]
    assert ks == sorted(cfg.k_ladder_po)


def test_evaluate_writes_reports(smoke):
    cfg, _ = smoke
    reports = cfg.reports_dir
    for name in ("summary.csv", "uplift.csv", "jaccard.csv", "quadrant.csv",
                 "bias.csv", "importance_po.csv", "importance_ref.csv",
                 "plot_data.json"):
        assert (reports / name).exists(), name
    summary = (reports / "summary.csv").read_text().strip().splitlines()
    assert len(summary) == 1 + len(cfg.grid)
    assert summary[0].startswith("point_id,label,kind,")
    # uplift rows only for the label the manual baseline speaks to
    uplift = (reports / "uplift.csv").read_text()
    assert "ref_rf" not in uplift
    assert "po_rf_n20_d4" in uplift


def test_jaccard_is_square_and_reflexive(smoke):
    cfg, _ = smoke
    lines = (cfg.reports_dir / "jaccard.csv").read_text().strip().splitlines()
    names = lines[0].split(",")[1:]
    assert sorted(names) == sorted(p.point_id for p in cfg.grid)
    for i, line in enumerate(lines[1:]):
        cells = line.split(",")
        assert cells[0] == names[i]
        assert float(cells[1 + i]) == 1.0


def test_report_names_best_models(smoke):
    cfg, _ = smoke
    text = (cfg.reports_dir / "report.txt").read_text()
    assert "best PositiveOutcome model: po_rf_n20_d4" in text
    assert "best Referral model: ref_rf_n20_d5" in text
    assert "features:     all groups" in text
    assert cfg.config_hash in text


def test_evaluate_and_report_are_idempotent(smoke):
    cfg, _ = smoke
    before = {p.name: p.read_bytes() for p in cfg.reports_dir.iterdir()}
    pipeline.cmd_evaluate(cfg)
    pipeline.cmd_report(cfg)
    after = {p.name: p.read_bytes() for p in cfg.reports_dir.iterdir()}
    assert before == after


# ---------------------------------------------------------------------------
# ordering of stages, resume


def test_stages_refuse_missing_inputs(tmp_path):
    cfg_path = write_config(tmp_path, SMOKE_YAML.format(out=tmp_path / "out"))
    cfg = load_config(cfg_path)
    with pytest.raises(PipelineError, match="corpus"):
        pipeline.cmd_featurize(cfg)
    with pytest.raises(PipelineError, match="featurize"):
        pipeline.cmd_train(cfg)
    with pytest.raises(PipelineError, match="featurize"):
        pipeline.cmd_evaluate(cfg)
    with pytest.raises(PipelineError, match="summary"):
        pipeline.cmd_report(cfg)


def test_interrupted_training_resumes(tmp_path):
    body = SMOKE_YAML.format(out=tmp_path / "out").replace(
        "base_monthly_volume: 150", "base_monthly_volume: 120")
    cfg = load_config(write_config(tmp_path, body))
    pipeline.cmd_synth(cfg)
    pipeline.cmd_featurize(cfg)
    assert pipeline.cmd_train(cfg, max_units=4) == 4
    with pytest.raises(PipelineError, match="untrained"):
        pipeline.cmd_evaluate(cfg)
    assert pipeline.cmd_train(cfg) == 5   # 3 folds x 3 points - 4 done
    pipeline.cmd_evaluate(cfg)
    pipeline.cmd_report(cfg)
    assert (cfg.reports_dir / "report.txt").exists()


def test_stale_feature_cache_detected(smoke, tmp_path):
    cfg, cfg_path = smoke
    moved = load_config(cfg_path, seed=8)   # same out dir, different seed
    with pytest.raises(PipelineError, match="different config"):
        pipeline.cmd_train(moved)


# ---------------------------------------------------------------------------
# cli


def test_cli_exit_codes(tmp_path, capsys):
    bad = write_config(tmp_path, "bogus: 1\n")
    assert cli.main(["synth", "--config", str(bad)]) == 2
    assert cli.main(["synth", "--config", str(tmp_path / "missing.yaml")]) == 2
    ok = write_config(tmp_path, SMOKE_YAML.format(out=tmp_path / "out"))
    assert cli.main(["evaluate", "--config", str(ok)]) == 3   # nothing built
    capsys.readouterr()


def test_cli_runs_synth_stage(tmp_path, capsys):
    cfg_path = write_config(tmp_path, SMOKE_YAML.format(out=tmp_path / "out"))
    assert cli.main(["synth", "--config", str(cfg_path)]) == 0
    assert (tmp_path / "out" / "corpus" / "alerts.csv").exists()
    assert "corpus ready" in capsys.readouterr().out


def test_cli_out_override_wins_over_env(tmp_path, capsys, monkeypatch):
    cfg_path = write_config(tmp_path, SMOKE_YAML.format(out=tmp_path / "a"))
    monkeypatch.setenv("STREETRANK_OUT", str(tmp_path / "b"))
    assert cli.main(["synth", "--config", str(cfg_path)]) == 0
    assert (tmp_path / "b" / "corpus" / "alerts.csv").exists()
    assert not (tmp_path / "a").exists()
    assert cli.main(["synth", "--config", str(cfg_path),
                     "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "corpus" / "alerts.csv").exists()
    capsys.readouterr()
