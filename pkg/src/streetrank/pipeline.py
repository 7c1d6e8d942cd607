"""Config-driven experiment stages: synth, featurize, train, evaluate, report.

A YAML file defines the whole experiment (corpus, CV windows, feature-group
toggles, model grid, k ladders); every stage reads the same config and writes
under its ``out_dir``:

    corpus/    synthetic CSVs + manifest
    features/  per-fold train/test matrices and label arrays
    models/    checksummed artifacts, one per (fold, grid point)
    scores/    test-pool scores per (fold, grid point)
    metrics/   per-unit metric ladders written at train time
    runs/      resume registry
    reports/   cross-fold metrics, uplift, quadrant, jaccard, bias,
               importances, plot data, report.txt

Everything is deterministic for a fixed config: unit seeds are derived by
hashing (seed, fold, point), so results do not depend on worker count or
completion order, and report files are byte-stable across reruns.
"""
from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml

from . import evaluate as ev
from . import features as ft
from . import learners, synthgen, tempcv
from .domain import (read_alerts_csv, read_hotspots_csv, read_outcomes_csv,
                     read_weather_csv)
from .store import ModelStore, RunRegistry, StoreError

KNOWN_KINDS = (learners.KIND_RANDOM_FOREST, learners.KIND_EXTRA_TREES,
               learners.KIND_ADABOOST, learners.KIND_DECISION_TREE,
               learners.KIND_DUMMY)
LABELS = ("PositiveOutcome", "Referral")

ALL_GROUPS = tuple(sorted(set(ft.build_schema()[1])))


class ConfigError(ValueError):
    """The experiment config is malformed; CLI exit code 2."""


class PipelineError(RuntimeError):
    """A stage cannot run (missing inputs, failed unit); CLI exit code 3."""


# ---------------------------------------------------------------------------
# Config


@dataclass(frozen=True)
class GridPoint:
    kind: str
    label: str = "PositiveOutcome"
    n_estimators: int = 500
    max_depth: int | None = 5
    learning_rate: float = 1.0

    def __post_init__(self):
        if self.kind not in KNOWN_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.label not in LABELS:
            raise ConfigError(f"unknown target label {self.label!r}")
        if self.n_estimators < 1:
            raise ConfigError("n_estimators must be >= 1")
        if self.max_depth is not None and self.max_depth < 1:
            raise ConfigError("max_depth must be None or >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")

    @property
    def point_id(self) -> str:
        lab = "po" if self.label == "PositiveOutcome" else "ref"
        if self.kind == learners.KIND_DUMMY:
            return f"{lab}_dummy"
        if self.kind == learners.KIND_ADABOOST:
            return f"{lab}_ada_n{self.n_estimators}_lr{self.learning_rate!r}"
        short = {learners.KIND_RANDOM_FOREST: "rf",
                 learners.KIND_EXTRA_TREES: "et",
                 learners.KIND_DECISION_TREE: "tree"}[self.kind]
        if self.kind == learners.KIND_DECISION_TREE:
            return f"{lab}_tree_d{self.max_depth}"
        return f"{lab}_{short}_n{self.n_estimators}_d{self.max_depth}"

    def to_mapping(self) -> dict:
        return {"kind": self.kind, "label": self.label,
                "n_estimators": self.n_estimators, "max_depth": self.max_depth,
                "learning_rate": self.learning_rate}


@dataclass(frozen=True)
class ServeConfig:
    host: str = "127.0.0.1"
    port: int = 8787
    auto_referral_precision: float = 0.75
    refresh_seconds: float = 60.0

    def __post_init__(self):
        if not 0 < self.port < 65536:
            raise ConfigError("port out of range")
        if not 0.0 < self.auto_referral_precision <= 1.0:
            raise ConfigError("auto_referral_precision outside (0, 1]")
        if self.refresh_seconds <= 0:
            raise ConfigError("refresh_seconds must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    out_dir: Path
    corpus_source: Path | None          # use an existing corpus directory
    corpus: synthgen.GeneratorConfig | None   # or generate one
    cv: tempcv.CvConfig
    include_groups: tuple[str, ...]
    lda_sweeps: int
    lda_infer_sweeps: int
    target: str
    grid: tuple[GridPoint, ...]
    k_ladder_po: tuple[int, ...]
    k_ladder_ref: tuple[int, ...]
    workers: int = 1
    serve: ServeConfig = field(default_factory=ServeConfig)

    def __post_init__(self):
        if not self.grid:
            raise ConfigError("grid must be non-empty")
        if self.target not in LABELS:
            raise ConfigError(f"unknown target {self.target!r}")
        for name in ("k_ladder_po", "k_ladder_ref"):
            ladder = getattr(self, name)
            if list(ladder) != sorted(set(ladder)) or any(k < 1 for k in ladder):
                raise ConfigError(f"{name} must be ascending positive ints")
        unknown = set(self.include_groups) - set(ALL_GROUPS)
        if unknown:
            raise ConfigError(f"unknown feature groups: {sorted(unknown)}")
        if not self.include_groups:
            raise ConfigError("all feature groups excluded")
        if len(set(p.point_id for p in self.grid)) != len(self.grid):
            raise ConfigError("duplicate grid points")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def identity(self) -> dict:
        """The hyperparameter + CV identity hashed into config_hash."""
        return {
            "seed": self.seed,
            "corpus": str(self.corpus_source) if self.corpus_source
            else self.corpus.to_mapping(),
            "cv": {
                "data_start": self.cv.data_start.strftime("%Y-%m-%d"),
                "data_end": self.cv.data_end.strftime("%Y-%m-%d"),
                "train_label_days": self.cv.train_label_span.days,
                "test_label_days": self.cv.test_label_span.days,
                "cap_days": self.cv.training_span_cap.days,
                "buffer_days": self.cv.buffer.days,
            },
            "groups": sorted(self.include_groups),
            "lda": [self.lda_sweeps, self.lda_infer_sweeps],
            "target": self.target,
            "grid": [p.to_mapping() for p in self.grid],
            "k_ladder": {"PositiveOutcome": list(self.k_ladder_po),
                         "Referral": list(self.k_ladder_ref)},
        }

    @property
    def config_hash(self) -> str:
        canonical = json.dumps(self.identity(), sort_keys=True,
                               separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    @property
    def run_id(self) -> str:
        return f"run-{self.config_hash[:12]}"

    def ladder_for(self, label: str) -> tuple[int, ...]:
        return self.k_ladder_po if label == "PositiveOutcome" else self.k_ladder_ref

    # directory layout
    @property
    def corpus_dir(self) -> Path:
        return self.corpus_source if self.corpus_source else self.out_dir / "corpus"

    @property
    def features_dir(self) -> Path:
        return self.out_dir / "features"

    @property
    def reports_dir(self) -> Path:
        return self.out_dir / "reports"


def desk_grid(target: str) -> tuple[GridPoint, ...]:
    """Laptop-scale default grid; the published grid sits behind --full-grid."""
    points = []
    for kind in (learners.KIND_RANDOM_FOREST, learners.KIND_EXTRA_TREES):
        for n in (100, 500):
            for depth in (5, 10, None):
                points.append(GridPoint(kind, target, n, depth))
    for n in (100, 500):
        for lr in (0.1, 1.0):
            points.append(GridPoint(learners.KIND_ADABOOST, target, n,
                                    learning_rate=lr))
    points.append(GridPoint(learners.KIND_DUMMY, target))
    return tuple(points)


def full_grid(target: str) -> tuple[GridPoint, ...]:
    """Every published grid point, for machines with time to spare."""
    grid = learners.HyperGrid()
    points = []
    for kind in (learners.KIND_RANDOM_FOREST, learners.KIND_EXTRA_TREES):
        for n in grid.forest_estimators:
            for depth in grid.forest_depths:
                points.append(GridPoint(kind, target, n, depth))
    for n in grid.adaboost_estimators:
        for lr in grid.adaboost_learning_rates:
            points.append(GridPoint(learners.KIND_ADABOOST, target, n,
                                    learning_rate=lr))
    for depth in grid.tree_depths:
        points.append(GridPoint(learners.KIND_DECISION_TREE, target,
                                max_depth=depth))
    points.append(GridPoint(learners.KIND_DUMMY, target))
    return tuple(points)


def _as_utc(value, fieldname: str) -> datetime:
    if isinstance(value, datetime):
        return value if value.tzinfo else value.replace(tzinfo=timezone.utc)
    if isinstance(value, date):
        return datetime(value.year, value.month, value.day, tzinfo=timezone.utc)
    if isinstance(value, str):
        try:
            parsed = date.fromisoformat(value.strip())
        except ValueError:
            raise ConfigError(f"{fieldname}: bad date {value!r}") from None
        return datetime(parsed.year, parsed.month, parsed.day,
                        tzinfo=timezone.utc)
    raise ConfigError(f"{fieldname}: bad date {value!r}")


def _check_keys(mapping: Mapping, allowed: set, where: str) -> None:
    unknown = set(mapping) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


_TOP_KEYS = {"seed", "out_dir", "corpus", "cv", "features", "target", "grid",
             "k_ladder", "workers", "serve"}
_CORPUS_KEYS = {"source", "start_date", "end_date", "base_monthly_volume",
                "growth_rate", "seasonal_amplitude", "n_hotspots", "n_lsps",
                "duplicate_rate", "signal_strength", "referral_ratio", "seed"}
_CV_KEYS = {"data_start", "data_end", "buffer_days", "train_label_days",
            "test_label_days", "training_span_cap_days"}
_FEATURE_KEYS = {"include_groups", "exclude_groups", "lda_sweeps",
                 "lda_infer_sweeps"}
_GRID_KEYS = {"kind", "label", "n_estimators", "max_depth", "learning_rate"}
_SERVE_KEYS = {"host", "port", "auto_referral_precision", "refresh_seconds"}


def load_config(path: Path | str, seed: int | None = None,
                out_dir: Path | str | None = None,
                use_full_grid: bool = False) -> ExperimentConfig:
    """Parse and validate a YAML experiment config.

    ``seed`` and ``out_dir`` are CLI overrides; ``use_full_grid`` swaps in
    the published grid for the configured/“desk” one.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as err:
        raise ConfigError(f"config is not valid YAML: {err}") from None
    if not isinstance(doc, Mapping):
        raise ConfigError("config must be a mapping")
    _check_keys(doc, _TOP_KEYS, "config")

    try:
        the_seed = int(doc.get("seed", 42)) if seed is None else int(seed)
        out = Path(out_dir if out_dir is not None
                   else doc.get("out_dir", "streetrank_out"))

        corpus_doc = dict(doc.get("corpus") or {})
        _check_keys(corpus_doc, _CORPUS_KEYS, "corpus")
        corpus_source = None
        generator = None
        if "source" in corpus_doc:
            if len(corpus_doc) > 1:
                raise ConfigError("corpus.source excludes generator fields")
            corpus_source = Path(corpus_doc["source"])
            if not (corpus_source / synthgen.MANIFEST_NAME).exists():
                raise ConfigError(
                    f"corpus.source has no {synthgen.MANIFEST_NAME}: "
                    f"{corpus_source}")
        else:
            kwargs: dict = {"seed": int(corpus_doc.get("seed", the_seed))}
            for key in ("start_date", "end_date"):
                if key in corpus_doc:
                    kwargs[key] = _as_utc(corpus_doc[key], f"corpus.{key}")
            for key in ("base_monthly_volume", "n_hotspots", "n_lsps"):
                if key in corpus_doc:
                    kwargs[key] = int(corpus_doc[key])
            for key in ("growth_rate", "seasonal_amplitude", "duplicate_rate",
                        "signal_strength", "referral_ratio"):
                if key in corpus_doc:
                    kwargs[key] = float(corpus_doc[key])
            try:
                generator = synthgen.GeneratorConfig(**kwargs)
            except ValueError as err:
                raise ConfigError(f"corpus: {err}") from None

        cv_doc = dict(doc.get("cv") or {})
        _check_keys(cv_doc, _CV_KEYS, "cv")
        cv_kwargs: dict = {}
        if generator is not None:
            cv_kwargs["data_start"] = generator.start_date
            cv_kwargs["data_end"] = generator.end_date
        for key, target_key in (("data_start", "data_start"),
                                ("data_end", "data_end")):
            if key in cv_doc:
                cv_kwargs[target_key] = _as_utc(cv_doc[key], f"cv.{key}")
        for key, target_key in (("buffer_days", "buffer"),
                                ("train_label_days", "train_label_span"),
                                ("test_label_days", "test_label_span"),
                                ("training_span_cap_days", "training_span_cap")):
            if key in cv_doc:
                cv_kwargs[target_key] = timedelta(days=int(cv_doc[key]))
        try:
            cv = tempcv.CvConfig(**cv_kwargs)
        except ValueError as err:
            raise ConfigError(f"cv: {err}") from None

        feat_doc = dict(doc.get("features") or {})
        _check_keys(feat_doc, _FEATURE_KEYS, "features")
        if "include_groups" in feat_doc and "exclude_groups" in feat_doc:
            raise ConfigError("set include_groups or exclude_groups, not both")
        if "include_groups" in feat_doc:
            include = tuple(sorted(set(str(g) for g in feat_doc["include_groups"])))
        elif "exclude_groups" in feat_doc:
            excluded = set(str(g) for g in feat_doc["exclude_groups"])
            unknown = excluded - set(ALL_GROUPS)
            if unknown:
                raise ConfigError(f"unknown feature groups: {sorted(unknown)}")
            include = tuple(g for g in ALL_GROUPS if g not in excluded)
        else:
            include = ALL_GROUPS
        lda_sweeps = int(feat_doc.get("lda_sweeps", 300))
        lda_infer = int(feat_doc.get("lda_infer_sweeps", 30))
        if lda_sweeps < 1 or lda_infer < 1:
            raise ConfigError("lda sweep counts must be >= 1")

        target = str(doc.get("target", "PositiveOutcome"))
        if target not in LABELS:
            raise ConfigError(f"unknown target {target!r}")

        if use_full_grid:
            grid = full_grid(target)
        elif "grid" in doc and doc["grid"]:
            points = []
            for i, entry in enumerate(doc["grid"]):
                if not isinstance(entry, Mapping):
                    raise ConfigError(f"grid[{i}] must be a mapping")
                _check_keys(entry, _GRID_KEYS, f"grid[{i}]")
                if "kind" not in entry:
                    raise ConfigError(f"grid[{i}] missing kind")
                kwargs = {"kind": str(entry["kind"]),
                          "label": str(entry.get("label", target))}
                if "n_estimators" in entry:
                    kwargs["n_estimators"] = int(entry["n_estimators"])
                if "max_depth" in entry:
                    depth = entry["max_depth"]
                    kwargs["max_depth"] = None if depth is None else int(depth)
                if "learning_rate" in entry:
                    kwargs["learning_rate"] = float(entry["learning_rate"])
                points.append(GridPoint(**kwargs))
            grid = tuple(points)
        else:
            grid = desk_grid(target)

        ladder_doc = doc.get("k_ladder")
        if ladder_doc is None:
            ladder_po: tuple[int, ...] = ev.PO_K_LADDER
            ladder_ref: tuple[int, ...] = ev.REFERRAL_K_LADDER
        elif isinstance(ladder_doc, Mapping):
            _check_keys(ladder_doc, set(LABELS), "k_ladder")
            ladder_po = tuple(int(k) for k in
                              ladder_doc.get("PositiveOutcome", ev.PO_K_LADDER))
            ladder_ref = tuple(int(k) for k in
                               ladder_doc.get("Referral", ev.REFERRAL_K_LADDER))
        else:
            ladder_po = ladder_ref = tuple(int(k) for k in ladder_doc)

        serve_doc = dict(doc.get("serve") or {})
        _check_keys(serve_doc, _SERVE_KEYS, "serve")
        serve = ServeConfig(
            host=str(serve_doc.get("host", "127.0.0.1")),
            port=int(serve_doc.get("port", 8787)),
            auto_referral_precision=float(
                serve_doc.get("auto_referral_precision", 0.75)),
            refresh_seconds=float(serve_doc.get("refresh_seconds", 60.0)))

        return ExperimentConfig(
            seed=the_seed, out_dir=out, corpus_source=corpus_source,
            corpus=generator, cv=cv, include_groups=include,
            lda_sweeps=lda_sweeps, lda_infer_sweeps=lda_infer, target=target,
            grid=grid, k_ladder_po=ladder_po, k_ladder_ref=ladder_ref,
            workers=int(doc.get("workers", 1)), serve=serve)
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from None


# ---------------------------------------------------------------------------
# Shared helpers


def _unit_seed(seed: int, *parts: str) -> int:
    digest = hashlib.sha256("|".join([str(seed), *parts]).encode()).digest()
    return int.from_bytes(digest[:4], "big")


def select_groups(matrix: ft.FeatureMatrix,
                  include: Sequence[str]) -> ft.FeatureMatrix:
    """Keep exactly the columns whose group is in ``include``."""
    keep = [i for i, g in enumerate(matrix.groups) if g in include]
    if not keep:
        raise PipelineError("feature selection removed every column")
    return ft.FeatureMatrix(
        matrix.alert_ids,
        tuple(matrix.names[i] for i in keep),
        tuple(matrix.groups[i] for i in keep),
        np.ascontiguousarray(matrix.values[:, keep]))


def corpus_manifest_hash(cfg: ExperimentConfig) -> str:
    manifest = cfg.corpus_dir / synthgen.MANIFEST_NAME
    if not manifest.exists():
        raise PipelineError(f"corpus manifest missing: {manifest} (run synth)")
    return hashlib.sha256(manifest.read_bytes()).hexdigest()


def _load_corpus(cfg: ExperimentConfig):
    directory = cfg.corpus_dir
    if not (directory / synthgen.MANIFEST_NAME).exists():
        raise PipelineError(f"no corpus at {directory} (run synth)")
    alerts, rejections = read_alerts_csv(directory / "alerts.csv")
    if rejections:
        raise PipelineError(f"{len(rejections)} corpus alerts failed validation")
    outcomes = read_outcomes_csv(directory / "outcomes.csv")
    hotspots = read_hotspots_csv(directory / "hotspots.csv")
    weather = read_weather_csv(directory / "weather.csv")
    return alerts, outcomes, hotspots, weather


def _features_identity(cfg: ExperimentConfig) -> dict:
    identity = cfg.identity()
    return {key: identity[key] for key in ("seed", "corpus", "cv", "groups",
                                           "lda")}


def _features_hash(cfg: ExperimentConfig) -> str:
    canonical = json.dumps(_features_identity(cfg), sort_keys=True,
                           separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def _fold_paths(cfg: ExperimentConfig, fold_id: str) -> dict[str, Path]:
    base = cfg.features_dir
    return {
        "train": base / f"fold_{fold_id}.train.npz",
        "test": base / f"fold_{fold_id}.test.npz",
        "train_labels": base / f"fold_{fold_id}.train.labels.npz",
        "test_labels": base / f"fold_{fold_id}.test.labels.npz",
        "lda_location": base / f"fold_{fold_id}.lda_location.npz",
        "lda_activity": base / f"fold_{fold_id}.lda_activity.npz",
        "lsp_priors": base / f"fold_{fold_id}.lsp_priors.json",
    }


def _save_labels(path: Path, split, alerts_by_id, with_demographics: bool) -> None:
    ids = list(split.ids)
    created = np.array(
        [int(alerts_by_id[i].created_at.timestamp()) for i in ids], np.int64)
    arrays = {
        "ids": np.array(ids, dtype=np.str_),
        "created": created,
        "referral": split.referral,
        "positive": split.positive,
    }
    if with_demographics:
        arrays["gender"] = np.array(
            [alerts_by_id[i].gender.value for i in ids], dtype=np.str_)
        arrays["age_band"] = np.array(
            [alerts_by_id[i].age_band.value for i in ids], dtype=np.str_)
        arrays["words"] = np.array(
            [sum(ft.word_counts(alerts_by_id[i])) for i in ids], np.int64)
    np.savez(path, **arrays)


def _load_labels(path: Path) -> dict:
    blob = np.load(path, allow_pickle=False)
    out = {key: blob[key] for key in blob.files}
    out["ids"] = tuple(str(s) for s in out["ids"])
    return out


# ---------------------------------------------------------------------------
# Stages


def cmd_synth(cfg: ExperimentConfig) -> Path:
    """Generate the corpus (or verify an externally supplied one)."""
    directory = cfg.corpus_dir
    manifest = directory / synthgen.MANIFEST_NAME
    if cfg.corpus_source is not None:
        if not manifest.exists():
            raise PipelineError(f"corpus.source has no manifest: {directory}")
        return directory
    if manifest.exists():
        existing = json.loads(manifest.read_text(encoding="utf-8"))
        if existing.get("config") == cfg.corpus.to_mapping():
            return directory  # same generator config: corpus is already there
    corpus = synthgen.generate_corpus(cfg.corpus)
    synthgen.write_corpus(corpus, directory)
    return directory


def cmd_featurize(cfg: ExperimentConfig) -> Path:
    """Build per-fold train/test matrices and label files, leakage-audited."""
    alerts, outcomes, hotspots, weather = _load_corpus(cfg)
    folds = tempcv.make_folds(cfg.cv)
    out = cfg.features_dir
    manifest_path = out / "features_manifest.json"
    wanted_hash = _features_hash(cfg)
    if manifest_path.exists():
        existing = json.loads(manifest_path.read_text(encoding="utf-8"))
        if existing.get("features_hash") == wanted_hash:
            return out  # identical featurize config: reuse the cache
    out.mkdir(parents=True, exist_ok=True)

    base = ft.build_base_features(alerts, outcomes, hotspots, weather)
    row_of = {aid: i for i, aid in enumerate(base.alert_ids)}
    alerts_by_id = {a.id: a for a in alerts}
    fingerprint = ""

    for fi, fold in enumerate(folds):
        train = tempcv.apply_label_window(alerts, outcomes, fold, "train")
        test = tempcv.apply_label_window(alerts, outcomes, fold, "test")
        train_rows = [row_of[i] for i in train.ids]
        test_rows = [row_of[i] for i in test.ids]

        for split_name, rows, split in (("train", train_rows, train),
                                        ("test", test_rows, test)):
            report = tempcv.leakage_check(
                fold, tempcv.provenance_of(base, rows), split_name)
            if not report.passed:
                raise PipelineError(
                    f"leakage audit failed on fold {fold.fold_id} "
                    f"{split_name}: {len(report.offending_ids)} rows")

        models = ft.fit_topic_models(base, train_rows, sweeps=cfg.lda_sweeps,
                                     seed=_unit_seed(cfg.seed, "lda",
                                                     fold.fold_id))
        priors = ft.compute_lsp_priors(base, train_rows)
        paths = _fold_paths(cfg, fold.fold_id)
        models.location.save(paths["lda_location"])
        models.activity.save(paths["lda_activity"])
        paths["lsp_priors"].write_text(json.dumps(
            {"found_rate": priors.found_rate,
             "response_hours": priors.response_hours}, sort_keys=True),
            encoding="utf-8")
        for split_name, rows, split in (("train", train_rows, train),
                                        ("test", test_rows, test)):
            matrix = ft.finalize_matrix(base, models, priors, rows,
                                        infer_sweeps=cfg.lda_infer_sweeps,
                                        infer_seed=_unit_seed(
                                            cfg.seed, "infer", fold.fold_id,
                                            split_name))
            matrix = select_groups(matrix, cfg.include_groups)
            fingerprint = matrix.fingerprint
            matrix.save_npz(paths[split_name])
            _save_labels(paths[f"{split_name}_labels"], split, alerts_by_id,
                         with_demographics=split_name == "test")

    tempcv.write_fold_plans(out / "fold_plans.csv", folds)
    manifest = {
        "features_hash": wanted_hash,
        "identity": _features_identity(cfg),
        "fingerprint": fingerprint,
        "corpus_manifest_sha256": corpus_manifest_hash(cfg),
        "folds": [f.fold_id for f in folds],
        "n_columns": sum(1 for g in ft.build_schema()[1]
                         if g in cfg.include_groups),
    }
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=1),
                             encoding="utf-8")
    return out


def _require_features(cfg: ExperimentConfig) -> dict:
    manifest_path = cfg.features_dir / "features_manifest.json"
    if not manifest_path.exists():
        raise PipelineError("no feature cache (run featurize)")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("features_hash") != _features_hash(cfg):
        raise PipelineError("feature cache was built from a different config "
                            "(re-run featurize)")
    return manifest


def _fit_point(point: GridPoint, matrix: ft.FeatureMatrix,
               labels: dict, seed: int, fold_id: str) -> learners.TrainedEnsemble:
    if point.label == "PositiveOutcome":
        rows = np.flatnonzero(labels["positive"] >= 0)
        y = (labels["positive"][rows] == 1).astype(np.int64)
    else:
        rows = np.arange(len(labels["ids"]))
        y = (labels["referral"] == 1).astype(np.int64)
    sub = ft.FeatureMatrix(tuple(labels["ids"][i] for i in rows),
                           matrix.names, matrix.groups,
                           np.ascontiguousarray(matrix.values[rows]))
    if point.kind == learners.KIND_DUMMY:
        return learners.fit_dummy(y, seed=seed, fold_id=fold_id,
                                  fingerprint=matrix.fingerprint)
    if point.kind == learners.KIND_ADABOOST:
        return learners.fit_adaboost(sub, y, n_estimators=point.n_estimators,
                                     learning_rate=point.learning_rate,
                                     seed=seed, fold_id=fold_id)
    n = 1 if point.kind == learners.KIND_DECISION_TREE else point.n_estimators
    return learners.fit_forest(sub, y, n_estimators=n,
                               max_depth=point.max_depth, kind=point.kind,
                               seed=seed, fold_id=fold_id)


def cmd_train(cfg: ExperimentConfig, max_units: int | None = None,
              workers: int | None = None) -> int:
    """Fit every (fold, grid point) unit not already in the run registry.

    Returns the number of units trained this invocation. ``max_units`` stops
    early (smoke runs and resume tests); a later call picks up the rest.
    """
    _require_features(cfg)
    folds = tempcv.make_folds(cfg.cv)
    registry = RunRegistry(cfg.out_dir / "runs")
    run = registry.open_run(cfg.run_id, cfg.config_hash,
                            corpus_manifest_hash(cfg),
                            [{"fold_id": f.fold_id} for f in folds])
    shop = ModelStore(cfg.out_dir / "models")

    units = [(fold, point) for fold in folds
             for point in sorted(cfg.grid, key=lambda p: p.point_id)
             if not run.is_complete(fold.fold_id, point.point_id)]
    if max_units is not None:
        units = units[:max_units]
    if not units:
        return 0

    matrices: dict[str, tuple] = {}

    def fold_data(fold_id: str) -> tuple:
        if fold_id not in matrices:
            paths = _fold_paths(cfg, fold_id)
            matrices[fold_id] = (ft.FeatureMatrix.load_npz(paths["train"]),
                                 _load_labels(paths["train_labels"]),
                                 ft.FeatureMatrix.load_npz(paths["test"]),
                                 _load_labels(paths["test_labels"]))
        return matrices[fold_id]

    def run_unit(fold: tempcv.FoldPlan, point: GridPoint) -> tuple[str, str, str, str]:
        train_matrix, train_labels, test_matrix, test_labels = \
            fold_data(fold.fold_id)
        seed = _unit_seed(cfg.seed, fold.fold_id, point.point_id)
        try:
            model = _fit_point(point, train_matrix, train_labels, seed,
                               fold.fold_id)
        except ValueError as err:
            raise PipelineError(
                f"unit {fold.fold_id}/{point.point_id} failed: {err}") from err
        scores = learners.predict_scores(model, test_matrix)

        model_id = f"{fold.fold_id}/{point.point_id}"
        artifact = shop.put_model(model, model_id)
        scores_path = cfg.out_dir / "scores" / fold.fold_id / \
            f"{point.point_id}.npz"
        scores_path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(scores_path, scores=scores)

        label_key = "positive" if point.label == "PositiveOutcome" else "referral"
        scored = ev.ScoredFold(fold.fold_id, tuple(test_labels["ids"]), scores,
                               test_labels["created"], test_labels["positive"],
                               test_labels["referral"])
        ladder = [k for k in cfg.ladder_for(point.label)]
        metrics = ev.metrics_ladder([scored], ladder, label=label_key)
        metrics_path = cfg.out_dir / "metrics" / fold.fold_id / \
            f"{point.point_id}.csv"
        metrics_path.parent.mkdir(parents=True, exist_ok=True)
        ev.write_metrics_csv(metrics_path, metrics)
        return fold.fold_id, point.point_id, str(artifact), str(metrics_path)

    done = 0
    if (workers or cfg.workers) == 1:
        results = map(lambda u: run_unit(*u), units)
        for fold_id, point_id, artifact, metrics_path in results:
            registry.mark_complete(cfg.run_id, fold_id, point_id,
                                   artifact=artifact, metrics=metrics_path)
            done += 1
    else:
        with ThreadPoolExecutor(max_workers=workers or cfg.workers) as pool:
            for fold_id, point_id, artifact, metrics_path in \
                    pool.map(lambda u: run_unit(*u), units):
                registry.mark_complete(cfg.run_id, fold_id, point_id,
                                       artifact=artifact, metrics=metrics_path)
                done += 1
    return done


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(round(float(value), 10))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def _require_trained(cfg: ExperimentConfig) -> None:
    registry = RunRegistry(cfg.out_dir / "runs")
    try:
        run = registry.load(cfg.run_id)
    except StoreError:
        raise PipelineError("no run registry entry (run train)") from None
    folds = tempcv.make_folds(cfg.cv)
    missing = [(f.fold_id, p.point_id) for f in folds for p in cfg.grid
               if not run.is_complete(f.fold_id, p.point_id)]
    if missing:
        raise PipelineError(
            f"{len(missing)} units untrained (first: {missing[0][0]}/"
            f"{missing[0][1]}); run train to completion")


def _scored_folds(cfg: ExperimentConfig, point: GridPoint,
                  folds) -> list[ev.ScoredFold]:
    out = []
    for fold in folds:
        labels = _load_labels(_fold_paths(cfg, fold.fold_id)["test_labels"])
        blob = np.load(cfg.out_dir / "scores" / fold.fold_id /
                       f"{point.point_id}.npz", allow_pickle=False)
        out.append(ev.ScoredFold(fold.fold_id, tuple(labels["ids"]),
                                 blob["scores"], labels["created"],
                                 labels["positive"], labels["referral"]))
    return out


def cmd_evaluate(cfg: ExperimentConfig) -> Path:
    """Aggregate scores into the cross-fold report files."""
    _require_features(cfg)
    _require_trained(cfg)
    folds = tempcv.make_folds(cfg.cv)
    alerts, outcomes, _, _ = _load_corpus(cfg)
    reports = cfg.reports_dir
    reports.mkdir(parents=True, exist_ok=True)

    baseline = {}
    for fold in folds:
        month = synthgen.simulate_manual_baseline(alerts, outcomes,
                                                  fold.fold_id)
        if month.referral_count < 1:
            raise PipelineError(f"month {fold.fold_id} has no baseline "
                                "referrals; corpus too small to compare")
        baseline[fold.fold_id] = ev.BaselineMonth(
            fold.fold_id, month.referral_count, month.found_rate or 0.0)

    summary_rows = []
    uplift_lines = ["point_id,fold_id,k,model_found_rate,"
                    "baseline_found_rate,uplift"]
    scored_cache: dict[str, list[ev.ScoredFold]] = {}
    for point in sorted(cfg.grid, key=lambda p: p.point_id):
        label_key = "positive" if point.label == "PositiveOutcome" else "referral"
        scored = _scored_folds(cfg, point, folds)
        scored_cache[point.point_id] = scored

        ladder = ev.metrics_ladder(scored, list(cfg.ladder_for(point.label)),
                                   label=label_key)
        ev.write_metrics_csv(reports / f"metrics_{point.point_id}.csv", ladder)

        # the manual baseline tracks found outcomes, so uplift is only
        # meaningful for models ranked on the positive-outcome label
        uplift = None
        if point.label == "PositiveOutcome":
            uplift = ev.baseline_compare(scored, baseline, label=label_key)
            for row in uplift.rows:
                uplift_lines.append(",".join(_fmt(v) for v in (
                    point.point_id, row.fold_id, row.k, row.model_found_rate,
                    row.baseline_found_rate, row.uplift)))

        matched = [ev.metrics_at_k(f.scores, getattr(f, label_key), f.created,
                                   f.ids, baseline[f.fold_id].referral_count,
                                   fold_id=f.fold_id) for f in scored]
        recalls = [m.recall for m in matched if m.recall is not None]
        prec50 = [m.precision for m in
                  (ev.metrics_at_k(f.scores, getattr(f, label_key), f.created,
                                   f.ids, 50, fold_id=f.fold_id)
                   for f in scored) if m.precision is not None]
        summary_rows.append({
            "point_id": point.point_id, "label": point.label,
            "kind": point.kind,
            "avg_found_rate_matched_k": float(np.mean(
                [m.found_rate for m in matched])),
            "avg_recall_matched_k": float(np.mean(recalls)) if recalls else None,
            "avg_precision_50": float(np.mean(prec50)) if prec50 else None,
            "uplift_of_averages": uplift.uplift_of_averages if uplift else None,
        })

    (reports / "uplift.csv").write_text("\n".join(uplift_lines) + "\n",
                                        encoding="utf-8")
    header = ["point_id", "label", "kind", "avg_found_rate_matched_k",
              "avg_recall_matched_k", "avg_precision_50", "uplift_of_averages"]
    lines = [",".join(header)]
    for row in summary_rows:
        lines.append(",".join(_fmt(row[key]) for key in header))
    (reports / "summary.csv").write_text("\n".join(lines) + "\n",
                                         encoding="utf-8")

    def best_point(label: str) -> GridPoint | None:
        candidates = [(row, point) for row, point in
                      ((r, p) for r in summary_rows
                       for p in cfg.grid if p.point_id == r["point_id"])
                      if point.label == label
                      and point.kind != learners.KIND_DUMMY]
        if not candidates:
            return None
        candidates.sort(key=lambda item: (
            -item[0]["avg_found_rate_matched_k"],
            -(item[0]["avg_recall_matched_k"] or -1.0),
            item[1].point_id))
        return candidates[0][1]

    best_po = best_point("PositiveOutcome")
    best_ref = best_point("Referral")
    latest = folds[-1]
    latest_labels = _load_labels(_fold_paths(cfg, latest.fold_id)["test_labels"])
    plot_payload: dict = {"summary": summary_rows}

    # quadrant analysis needs one model per axis
    if best_po is not None and best_ref is not None:
        po_last = scored_cache[best_po.point_id][-1]
        ref_last = scored_cache[best_ref.point_id][-1]
        month = baseline[latest.fold_id]
        found = sum(1 for v in latest_labels["positive"] if v == 1)
        quadrant = ev.quadrant_report(
            po_last.scores, ref_last.scores, latest_labels["positive"],
            latest_labels["gender"], latest_labels["age_band"],
            latest_labels["words"], latest_labels["created"],
            list(latest_labels["ids"]), n_referrals=month.referral_count,
            n_found=found)
        q_lines = ["cell,count,found,not_found,nulls,mean_word_count"]
        for cell in quadrant.cells:
            q_lines.append(",".join(_fmt(v) for v in (
                cell.name, cell.count, cell.found, cell.not_found, cell.nulls,
                cell.mean_word_count)))
        q_lines.append(f"po_threshold,{_fmt(quadrant.po_threshold)},,,,")
        q_lines.append(f"ref_threshold,{_fmt(quadrant.ref_threshold)},,,,")
        (reports / "quadrant.csv").write_text("\n".join(q_lines) + "\n",
                                              encoding="utf-8")
        stride = max(1, len(po_last.ids) // 2000)
        plot_payload["quadrant"] = {
            "po_threshold": quadrant.po_threshold,
            "ref_threshold": quadrant.ref_threshold,
            "cells": [{"name": c.name, "count": c.count, "found": c.found,
                       "not_found": c.not_found, "nulls": c.nulls,
                       "genders": c.gender_counts, "ages": c.age_counts}
                      for c in quadrant.cells],
            "scatter": {
                "po_scores": po_last.scores[::stride],
                "ref_scores": ref_last.scores[::stride],
                "positive": latest_labels["positive"][::stride],
            },
        }

    # top-50 agreement across every grid point, on the latest month
    sets = {}
    for point in sorted(cfg.grid, key=lambda p: p.point_id):
        last = scored_cache[point.point_id][-1]
        order = ev.rank_order(last.scores, last.created, last.ids)
        sets[point.point_id] = set(np.asarray(last.ids)[order[:50]].tolist())
    names, matrix = ev.jaccard_matrix(sets)
    j_lines = ["point_id," + ",".join(names)]
    for i, name in enumerate(names):
        j_lines.append(name + "," + ",".join(_fmt(v) for v in matrix[i]))
    (reports / "jaccard.csv").write_text("\n".join(j_lines) + "\n",
                                         encoding="utf-8")

    # bias slices for the report's target label, latest month, matched k
    best_target = best_po if cfg.target == "PositiveOutcome" else best_ref
    if best_target is not None:
        last = scored_cache[best_target.point_id][-1]
        rows = ev.bias_slices(
            last.scores, latest_labels["positive"], last.created,
            list(last.ids), baseline[latest.fold_id].referral_count,
            {"gender": latest_labels["gender"].tolist(),
             "age_band": latest_labels["age_band"].tolist()})
        b_lines = ["dimension,group,size,suppressed,referral_rate,"
                   "found_rate,representation_ratio"]
        for row in rows:
            b_lines.append(",".join(_fmt(v) for v in (
                row.dimension, row.group, row.size, row.suppressed,
                row.referral_rate, row.found_rate, row.representation_ratio)))
        (reports / "bias.csv").write_text("\n".join(b_lines) + "\n",
                                          encoding="utf-8")

    # importances of the best model per label, averaged over folds
    shop = ModelStore(cfg.out_dir / "models")
    for label, best in (("PositiveOutcome", best_po), ("Referral", best_ref)):
        if best is None:
            continue
        per_fold = []
        names_groups = None
        for fold in folds:
            model = shop.get_model(f"{fold.fold_id}/{best.point_id}")
            per_fold.append(learners.feature_importances(model))
        matrix0 = ft.FeatureMatrix.load_npz(
            _fold_paths(cfg, folds[0].fold_id)["test"])
        names_groups = (matrix0.names, matrix0.groups)
        mean_importance = np.mean(per_fold, axis=0)
        groups = learners.group_importances(mean_importance, names_groups[1])
        i_lines = ["scope,name,importance"]
        for group, value in sorted(groups.items(), key=lambda kv: (-kv[1], kv[0])):
            i_lines.append(f"group,{group},{_fmt(value)}")
        order = np.argsort(-mean_importance, kind="stable")[:30]
        for idx in order:
            i_lines.append(f"feature,{names_groups[0][idx]},"
                           f"{_fmt(float(mean_importance[idx]))}")
        (reports / f"importance_{'po' if label == 'PositiveOutcome' else 'ref'}"
         ".csv").write_text("\n".join(i_lines) + "\n", encoding="utf-8")
        plot_payload[f"group_importances_"
                     f"{'po' if label == 'PositiveOutcome' else 'ref'}"] = groups

    ev.write_plot_data(reports / "plot_data.json", plot_payload)
    return reports


def cmd_report(cfg: ExperimentConfig) -> Path:
    """Render the plain-text summary naming the best model per label."""
    reports = cfg.reports_dir
    summary_path = reports / "summary.csv"
    if not summary_path.exists():
        raise PipelineError("no summary.csv (run evaluate)")
    rows = []
    lines = summary_path.read_text(encoding="utf-8").strip().splitlines()
    header = lines[0].split(",")
    for line in lines[1:]:
        rows.append(dict(zip(header, line.split(","))))

    def pick(label: str):
        pool = [r for r in rows if r["label"] == label
                and r["kind"] != learners.KIND_DUMMY]
        if not pool:
            return None
        pool.sort(key=lambda r: (
            -float(r["avg_found_rate_matched_k"] or 0.0),
            -float(r["avg_recall_matched_k"] or -1.0),
            r["point_id"]))
        return pool[0]

    folds = tempcv.make_folds(cfg.cv)
    out = ["alert ranking experiment", "=" * 24, ""]
    out.append(f"run id:       {cfg.run_id}")
    out.append(f"config hash:  {cfg.config_hash}")
    out.append(f"corpus:       {corpus_manifest_hash(cfg)[:12]} "
               f"({cfg.corpus_dir.name})")
    out.append(f"cv folds:     {len(folds)} months, "
               f"{folds[0].fold_id}..{folds[-1].fold_id}, "
               f"buffer {cfg.cv.buffer.days}d, "
               f"label span {cfg.cv.test_label_span.days}d")
    excluded = sorted(set(ALL_GROUPS) - set(cfg.include_groups))
    out.append("features:     all groups" if not excluded else
               f"features:     ablation, excluded {', '.join(excluded)}")
    out.append(f"grid:         {len(cfg.grid)} points, report target "
               f"{cfg.target}")
    out.append("")
    out.append("per-point summary at the month-matched k "
               "(found_rate ranks, recall breaks ties)")
    out.append("point_id | avg_found_rate | avg_recall | avg_precision@50 | "
               "uplift_of_averages")
    for row in sorted(rows, key=lambda r: r["point_id"]):
        out.append(" | ".join([
            row["point_id"], row["avg_found_rate_matched_k"] or "",
            row["avg_recall_matched_k"] or "", row["avg_precision_50"] or "",
            row["uplift_of_averages"] or ""]))
    out.append("")
    for label in LABELS:
        best = pick(label)
        if best is None:
            out.append(f"best {label} model: none in grid")
        else:
            line = (f"best {label} model: {best['point_id']} "
                    f"(avg found_rate {best['avg_found_rate_matched_k']} "
                    f"at matched k")
            if best["uplift_of_averages"]:
                line += f", uplift {best['uplift_of_averages']} vs manual baseline"
            out.append(line + ")")
    out.append("")
    report_path = reports / "report.txt"
    report_path.write_text("\n".join(out) + "\n", encoding="utf-8")
    return report_path


def cmd_serve(cfg: ExperimentConfig):  # pragma: no cover - thin launcher
    """Start the scoring service over this experiment's artifacts."""
    import os

    import uvicorn

    from .service import create_app

    override = os.environ.get("STREETRANK_UI")
    static = Path(override) if override else \
        Path(__file__).resolve().parents[2] / "frontend" / "dist"
    app = create_app(cfg, static_dir=static if static.is_dir() else None)
    uvicorn.run(app, host=cfg.serve.host, port=cfg.serve.port,
                log_level="warning")
