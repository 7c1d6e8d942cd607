"""Feature assembly: alerts plus context become a named, group-tagged matrix.

Every feature of an alert depends only on records strictly before its
created_at (outcome-derived counts additionally require the outcome to have
resolved by then), so one corpus-wide pass is valid for every CV fold. The two
fold-dependent pieces, LDA topic columns and LSP imputation priors, are fitted
per fold on the training split and applied by :func:`finalize_matrix`.

Pairwise history counts use a time-sorted backward sweep with a latitude-band
reject before the haversine evaluation, binned by (distance, age) and turned
into cumulative window counts with prefix sums.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numba as nb
import numpy as np

from .domain import (
    AgeBand,
    Alert,
    Gender,
    Hotspot,
    OutcomeRecord,
    Platform,
    PositiveLabel,
    ReferralLabel,
    WeatherDay,
    WeatherHour,
)
from . import textmine
from .textmine import LdaModel, lda_fit, lda_infer_many

EARTH_RADIUS_M = 6_371_000.0

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class FeatureWindows:
    """Distance rings, day windows, and source platforms for crossed counts."""

    distances_m: tuple[int, ...] = (50, 100, 250, 500, 1000, 5000, 10000)
    day_windows: tuple[int, ...] = (7, 28, 60, 360)
    sources: tuple[Platform, ...] = (Platform.PHONE, Platform.WEBSITE, Platform.MOBILE_APP)

    def __post_init__(self) -> None:
        if not self.distances_m or not self.day_windows or not self.sources:
            raise ValueError("feature windows must be non-empty")
        if list(self.distances_m) != sorted(set(self.distances_m)):
            raise ValueError("distances must be sorted and distinct")
        if list(self.day_windows) != sorted(set(self.day_windows)):
            raise ValueError("day windows must be sorted and distinct")


DEFAULT_WINDOWS = FeatureWindows()

DUPLICATE_DISTANCE_M = 500
DUPLICATE_WINDOW_DAYS = 7

_GENDER_ORDER = [Gender.MALE, Gender.FEMALE, Gender.UNKNOWN, Gender.MISSING]
_AGE_ORDER = [AgeBand.UNDER_18, AgeBand.A18_TO_25, AgeBand.A26_TO_40,
              AgeBand.A41_TO_60, AgeBand.OVER_60, AgeBand.UNKNOWN, AgeBand.MISSING]
_PLATFORM_ORDER = [Platform.PHONE, Platform.WEBSITE, Platform.MOBILE_APP]


def haversine_m(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance in metres (mean Earth radius)."""
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dphi = p2 - p1
    dlam = math.radians(lon2 - lon1)
    a = math.sin(dphi / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dlam / 2) ** 2
    return 2.0 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(a)))


def _haversine_a_threshold(meters: float) -> float:
    # d <= x  <=>  haversine a-term <= sin^2(x / 2R); avoids sqrt/asin per pair
    return math.sin(meters / (2.0 * EARTH_RADIUS_M)) ** 2


# ---------------------------------------------------------------------------
# Schema


def build_schema(windows: FeatureWindows = DEFAULT_WINDOWS) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Deterministic (names, groups) for the full matrix layout."""
    names: list[str] = []
    groups: list[str] = []

    def add(name: str, group: str) -> None:
        names.append(name)
        groups.append(group)

    for plat in _PLATFORM_ORDER:
        add(f"platform_{plat.value.lower()}", "Platform")
    for gender in _GENDER_ORDER:
        add(f"gender_{gender.value.lower()}", "Demographics")
    for age in _AGE_ORDER:
        add(f"age_{age.value.lower()}", "Demographics")
    for name in ("doy_sin", "doy_cos", "dow_sin", "dow_cos", "hour_sin", "hour_cos"):
        add(name, "DateTime")
    for fieldname in ("location", "appearance", "concerns"):
        add(f"words_{fieldname}", "WordCounts")
    add("entities_location", "WordCounts")
    add("entities_activity", "WordCounts")
    for x in windows.distances_m:
        add(f"hotspot_within_{x}m", "SpatialAggregates")
    max_x = windows.distances_m[-1]
    for x in windows.distances_m:
        # counts in the widest ring track the whole region over time rather
        # than a neighbourhood, so they are tagged as temporal
        group = "TemporalAggregates" if x == max_x else "SpatialAggregates"
        for y in windows.day_windows:
            add(f"alerts_{x}m_{y}d", group)
            add(f"referrals_{x}m_{y}d", group)
            add(f"positives_{x}m_{y}d", group)
            for plat in windows.sources:
                add(f"alerts_{x}m_{y}d_{plat.value.lower()}", group)
    for y in windows.day_windows:
        add(f"lsp_alerts_{y}d", "LspStats")
        add(f"lsp_referrals_{y}d", "LspStats")
        add(f"lsp_positives_{y}d", "LspStats")
        add(f"lsp_found_rate_{y}d", "LspStats")
        add(f"lsp_response_hours_{y}d", "LspStats")
        add(f"lsp_no_data_{y}d", "LspStats")
    for name in ("weather_temp_max", "weather_temp_min", "weather_temp_avg",
                 "weather_precip_max", "weather_precip_min", "weather_snow",
                 "weather_wind_avg", "weather_gust_max"):
        add(name, "Weather")
    for topic in range(10):
        add(f"topic_location_{topic}", "LdaTopics")
    for topic in range(10):
        add(f"topic_activity_{topic}", "LdaTopics")
    for fieldname in ("location", "appearance", "concerns"):
        add(f"sleep_words_{fieldname}", "ManualTopics")
        add(f"beg_words_{fieldname}", "ManualTopics")
    add("duplicate_recent_nearby", "Duplicate")

    if len(set(names)) != len(names):
        raise AssertionError("duplicate feature names in schema")
    return tuple(names), tuple(groups)


def schema_fingerprint(names: Sequence[str], groups: Sequence[str]) -> str:
    digest = hashlib.sha256()
    digest.update(f"v{SCHEMA_VERSION}\n".encode())
    for name, group in zip(names, groups):
        digest.update(f"{name}|{group}\n".encode())
    return digest.hexdigest()


@dataclass(frozen=True)
class FeatureMatrix:
    """Dense matrix plus per-column (name, group) tags, aligned to alert_ids."""

    alert_ids: tuple[str, ...]
    names: tuple[str, ...]
    groups: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self) -> None:
        if self.values.shape != (len(self.alert_ids), len(self.names)):
            raise ValueError("matrix shape does not match ids/schema")
        if len(self.names) != len(self.groups):
            raise ValueError("names and groups differ in length")
        if np.isnan(self.values).any():
            raise ValueError("feature matrix contains NaN after imputation")

    @property
    def fingerprint(self) -> str:
        return schema_fingerprint(self.names, self.groups)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def save_csv(self, path: Path | str) -> None:
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["alert_id", *self.names])
            for row_id, row in zip(self.alert_ids, self.values):
                writer.writerow([row_id, *(repr(float(v)) for v in row)])
        schema = [{"name": n, "group": g} for n, g in zip(self.names, self.groups)]
        path.with_suffix(".schema.json").write_text(
            json.dumps({"version": SCHEMA_VERSION, "columns": schema}, indent=2),
            encoding="utf-8")

    @classmethod
    def load_csv(cls, path: Path | str) -> "FeatureMatrix":
        path = Path(path)
        meta = json.loads(path.with_suffix(".schema.json").read_text(encoding="utf-8"))
        if meta["version"] != SCHEMA_VERSION:
            raise ValueError(f"unsupported feature schema version {meta['version']}")
        names = tuple(col["name"] for col in meta["columns"])
        groups = tuple(col["group"] for col in meta["columns"])
        ids = []
        rows = []
        with open(path, newline="", encoding="utf-8") as handle:
            reader = csv.reader(handle)
            header = next(reader)
            if tuple(header[1:]) != names:
                raise ValueError("feature CSV header does not match schema sidecar")
            for record in reader:
                ids.append(record[0])
                rows.append([float(v) for v in record[1:]])
        return cls(tuple(ids), names, groups,
                   np.array(rows, dtype=np.float64).reshape(len(ids), len(names)))

    def save_npz(self, path: Path | str) -> None:
        np.savez_compressed(path,
                            version=np.int64(SCHEMA_VERSION),
                            alert_ids=np.array(self.alert_ids, dtype=np.str_),
                            names=np.array(self.names, dtype=np.str_),
                            groups=np.array(self.groups, dtype=np.str_),
                            values=self.values)

    @classmethod
    def load_npz(cls, path: Path | str) -> "FeatureMatrix":
        blob = np.load(path, allow_pickle=False)
        if int(blob["version"]) != SCHEMA_VERSION:
            raise ValueError("unsupported feature cache version")
        return cls(tuple(str(s) for s in blob["alert_ids"]),
                   tuple(str(s) for s in blob["names"]),
                   tuple(str(s) for s in blob["groups"]),
                   blob["values"])


# ---------------------------------------------------------------------------
# Scalar feature blocks


def datetime_cyclical(moment: datetime) -> tuple[float, float, float, float, float, float]:
    """(sin, cos) pairs for day-of-year, day-of-week, hour-of-day."""
    moment = moment.astimezone(timezone.utc)
    p_doy = (moment.timetuple().tm_yday - 1) / 366.0
    p_dow = moment.weekday() / 7.0
    p_hour = (moment.hour + moment.minute / 60.0 + moment.second / 3600.0) / 24.0
    out = []
    for p in (p_doy, p_dow, p_hour):
        angle = 2.0 * math.pi * p
        out.extend((math.sin(angle), math.cos(angle)))
    return tuple(out)  # type: ignore[return-value]


def word_counts(alert: Alert) -> tuple[int, int, int]:
    """Whitespace token counts of the three free-text fields."""
    return (len(alert.location_text.split()),
            len(alert.appearance_text.split()),
            len(alert.concerns_text.split()))


def hotspot_flags(alert: Alert, hotspots: Sequence[Hotspot],
                  distances_m: Sequence[int] = DEFAULT_WINDOWS.distances_m) -> list[int]:
    """flag_x = 1 iff some hotspot lies within x metres; monotone in x."""
    if not hotspots:
        return [0] * len(distances_m)
    nearest = min(haversine_m(alert.latitude, alert.longitude, h.latitude, h.longitude)
                  for h in hotspots)
    return [1 if nearest <= x else 0 for x in distances_m]


def daily_weather(hours: Sequence[WeatherHour]) -> dict:
    """Aggregate hourly weather into per-day features keyed by date."""
    if not hours:
        raise ValueError("no weather data")
    by_day: dict = {}
    for hour in hours:
        by_day.setdefault(hour.timestamp.astimezone(timezone.utc).date(), []).append(hour)
    days = {}
    for day, members in sorted(by_day.items()):
        temps = [m.temperature for m in members]
        precip = [m.precip_probability for m in members]
        days[day] = WeatherDay(
            day=day,
            temp_max=max(temps),
            temp_min=min(temps),
            temp_avg=sum(temps) / len(temps),
            precip_prob_max=max(precip),
            precip_prob_min=min(precip),
            snow_flag=any(m.snow_accumulation > 0 for m in members),
            wind_avg=sum(m.wind_speed for m in members) / len(members),
            gust_max=max(m.wind_gust for m in members),
        )
    return days


def weather_for_date(days: Mapping, target) -> WeatherDay:
    """The date's features, or the most recent prior day carried forward."""
    if target in days:
        return days[target]
    prior = [d for d in days if d < target]
    if not prior:
        raise ValueError(f"no weather on or before {target}")
    carried = days[max(prior)]
    return WeatherDay(day=target, temp_max=carried.temp_max, temp_min=carried.temp_min,
                      temp_avg=carried.temp_avg, precip_prob_max=carried.precip_prob_max,
                      precip_prob_min=carried.precip_prob_min, snow_flag=carried.snow_flag,
                      wind_avg=carried.wind_avg, gust_max=carried.gust_max)


# ---------------------------------------------------------------------------
# Pairwise history kernels


@nb.njit(cache=True)
def _pair_aggregates(t, lat, lon, coslat, plat, refer, posit, resolved, targets,
                     a_thresholds, y_seconds, theta_max):
    n = t.shape[0]
    nx = a_thresholds.shape[0]
    ny = y_seconds.shape[0]
    acc = np.zeros((n, nx, ny, 6), np.int32)
    a_max = a_thresholds[nx - 1]
    max_dt = y_seconds[ny - 1]
    for i in range(n):
        if not targets[i]:
            continue
        ti = t[i]
        for j in range(i - 1, -1, -1):
            dt = ti - t[j]
            if dt <= 0:
                continue
            if dt > max_dt:
                break
            dphi = lat[i] - lat[j]
            if dphi > theta_max or -dphi > theta_max:
                continue
            s1 = np.sin(dphi * 0.5)
            s2 = np.sin((lon[i] - lon[j]) * 0.5)
            a = s1 * s1 + coslat[i] * coslat[j] * s2 * s2
            if a > a_max:
                continue
            xi = 0
            while a_thresholds[xi] < a:
                xi += 1
            yi = 0
            while y_seconds[yi] < dt:
                yi += 1
            acc[i, xi, yi, 0] += 1
            acc[i, xi, yi, 3 + plat[j]] += 1
            if resolved[j] < ti:
                if refer[j] == 1:
                    acc[i, xi, yi, 1] += 1
                if posit[j] == 1:
                    acc[i, xi, yi, 2] += 1
    return acc


@nb.njit(cache=True)
def _lsp_stats(t, refer, posit, resolved, targets, rows, seg_starts, y_seconds):
    n = t.shape[0]
    ny = y_seconds.shape[0]
    alerts = np.zeros((n, ny), np.int32)
    referrals = np.zeros((n, ny), np.int32)
    positives = np.zeros((n, ny), np.int32)
    resp_sum = np.zeros((n, ny), np.float64)
    max_dt = y_seconds[ny - 1]
    for seg in range(seg_starts.shape[0] - 1):
        start = seg_starts[seg]
        stop = seg_starts[seg + 1]
        for a in range(start, stop):
            i = rows[a]
            if not targets[i]:
                continue
            ti = t[i]
            for b in range(a - 1, start - 1, -1):
                j = rows[b]
                dt = ti - t[j]
                if dt <= 0:
                    continue
                if dt > max_dt:
                    break
                yi = 0
                while y_seconds[yi] < dt:
                    yi += 1
                for y in range(yi, ny):
                    alerts[i, y] += 1
                if resolved[j] < ti and refer[j] == 1:
                    hours = (resolved[j] - t[j]) / 3600.0
                    for y in range(yi, ny):
                        referrals[i, y] += 1
                        resp_sum[i, y] += hours
                        if posit[j] == 1:
                            positives[i, y] += 1
    return alerts, referrals, positives, resp_sum


@nb.njit(cache=True)
def _hotspot_min_a(lat, lon, coslat, h_lat, h_lon, h_cos):
    n = lat.shape[0]
    m = h_lat.shape[0]
    out = np.empty(n, np.float64)
    for i in range(n):
        best = 2.0
        for j in range(m):
            s1 = np.sin((lat[i] - h_lat[j]) * 0.5)
            s2 = np.sin((lon[i] - h_lon[j]) * 0.5)
            a = s1 * s1 + coslat[i] * h_cos[j] * s2 * s2
            if a < best:
                best = a
        out[i] = best
    return out


# ---------------------------------------------------------------------------
# Corpus-level assembly


@dataclass
class BaseFeatures:
    """Fold-independent matrix plus the hooks for per-fold completion.

    ``values`` has NaN in the LDA topic columns and in LSP columns with no
    window data; :func:`finalize_matrix` fills them.
    """

    alert_ids: tuple[str, ...]
    names: tuple[str, ...]
    groups: tuple[str, ...]
    values: np.ndarray
    created: np.ndarray            # int64 epoch seconds, original row order
    location_docs: list
    activity_docs: list
    row_referral: np.ndarray       # int8 outcome labels per row
    row_positive: np.ndarray
    row_response_hours: np.ndarray  # float64, NaN when never resolved/referred
    max_info_time: np.ndarray      # int64, latest timestamp a row's features consume
    windows: FeatureWindows


@dataclass(frozen=True)
class LspPriors:
    """Training-split fallbacks for LSP windows with no history."""

    found_rate: float
    response_hours: float


@dataclass(frozen=True)
class TopicModels:
    location: LdaModel
    activity: LdaModel


def _epoch(moment: datetime) -> int:
    return int(moment.timestamp())


def build_base_features(alerts: Sequence[Alert],
                        outcomes: Iterable[OutcomeRecord],
                        hotspots: Sequence[Hotspot],
                        weather_hours: Sequence[WeatherHour],
                        windows: FeatureWindows = DEFAULT_WINDOWS,
                        target_ids: set[str] | None = None) -> BaseFeatures:
    """One pass over the corpus computing every fold-independent feature.

    ``target_ids`` limits which rows are produced (history still contributes);
    the default computes all rows. Output rows follow the order of ``alerts``
    restricted to targets.
    """
    if not alerts:
        raise ValueError("empty corpus")
    names, groups = build_schema(windows)
    col = {name: i for i, name in enumerate(names)}

    outcome_by_id: dict[str, OutcomeRecord] = {}
    for rec in outcomes:
        outcome_by_id[rec.alert_id] = rec

    n = len(alerts)
    order = sorted(range(n), key=lambda i: (alerts[i].created_at, alerts[i].id))
    t = np.empty(n, np.int64)
    lat = np.empty(n, np.float64)
    lon = np.empty(n, np.float64)
    plat = np.empty(n, np.int8)
    refer = np.zeros(n, np.int8)
    posit = np.zeros(n, np.int8)
    resolved = np.full(n, np.iinfo(np.int64).max, np.int64)
    lsp_ids = []
    for pos, idx in enumerate(order):
        alert = alerts[idx]
        t[pos] = _epoch(alert.created_at)
        lat[pos] = math.radians(alert.latitude)
        lon[pos] = math.radians(alert.longitude)
        plat[pos] = _PLATFORM_ORDER.index(alert.platform)
        lsp_ids.append(alert.lsp_id)
        rec = outcome_by_id.get(alert.id)
        if rec is not None:
            pair = rec.labels()
            refer[pos] = 1 if pair.referral is ReferralLabel.YES else 0
            posit[pos] = 1 if pair.positive is PositiveLabel.YES else 0
            resolved[pos] = _epoch(rec.resolved_at)
    coslat = np.cos(lat)

    if target_ids is None:
        targets = np.ones(n, np.bool_)
    else:
        targets = np.array([alerts[idx].id in target_ids for idx in order], np.bool_)

    a_thresholds = np.array([_haversine_a_threshold(x) for x in windows.distances_m])
    y_seconds = np.array([y * 86400 for y in windows.day_windows], np.int64)
    theta_max = windows.distances_m[-1] / EARTH_RADIUS_M

    acc = _pair_aggregates(t, lat, lon, coslat, plat, refer, posit, resolved,
                           targets, a_thresholds, y_seconds, theta_max)
    counts = acc.cumsum(axis=1).cumsum(axis=2)  # cumulative over distance then age

    # stable segment layout: rows grouped by lsp id, time order preserved within
    seen: dict[str, int] = {}
    lsp_codes = np.empty(n, np.int64)
    for pos, value in enumerate(lsp_ids):
        lsp_codes[pos] = seen.setdefault(value, len(seen))
    seg_rows = np.argsort(lsp_codes, kind="stable").astype(np.int64)
    boundaries = [0]
    for a in range(1, n):
        if lsp_codes[seg_rows[a]] != lsp_codes[seg_rows[a - 1]]:
            boundaries.append(a)
    boundaries.append(n)
    l_alerts, l_refer, l_pos, l_resp = _lsp_stats(
        t, refer, posit, resolved, targets, seg_rows,
        np.array(boundaries, np.int64), y_seconds)

    if hotspots:
        min_a = _hotspot_min_a(lat, lon, coslat,
                               np.array([math.radians(h.latitude) for h in hotspots]),
                               np.array([math.radians(h.longitude) for h in hotspots]),
                               np.array([math.cos(math.radians(h.latitude)) for h in hotspots]))
    else:
        min_a = np.full(n, 2.0)

    weather_days = daily_weather(weather_hours)

    pos_of = np.empty(n, np.int64)
    for pos, idx in enumerate(order):
        pos_of[idx] = pos
    out_pos = np.array([pos_of[idx] for idx in range(n) if targets[pos_of[idx]]],
                       np.int64)
    m = out_pos.shape[0]
    values = np.zeros((m, len(names)), np.float64)
    values[:, [col[f"topic_location_{i}"] for i in range(10)]] = np.nan
    values[:, [col[f"topic_activity_{i}"] for i in range(10)]] = np.nan

    # block assignments: the (x, y, kind) count layout matches the schema order
    nx, ny = len(windows.distances_m), len(windows.day_windows)
    agg_start = col[f"alerts_{windows.distances_m[0]}m_{windows.day_windows[0]}d"]
    values[:, agg_start:agg_start + nx * ny * 6] = \
        counts[out_pos].reshape(m, nx * ny * 6)

    hotspot_start = col[f"hotspot_within_{windows.distances_m[0]}m"]
    values[:, hotspot_start:hotspot_start + nx] = \
        (min_a[out_pos, None] <= a_thresholds[None, :]).astype(np.float64)

    for yi, y in enumerate(windows.day_windows):
        ref_cnt = l_refer[out_pos, yi].astype(np.float64)
        has = ref_cnt > 0
        found = np.full(m, np.nan)
        resp = np.full(m, np.nan)
        found[has] = l_pos[out_pos, yi][has] / ref_cnt[has]
        resp[has] = l_resp[out_pos, yi][has] / ref_cnt[has]
        values[:, col[f"lsp_alerts_{y}d"]] = l_alerts[out_pos, yi]
        values[:, col[f"lsp_referrals_{y}d"]] = ref_cnt
        values[:, col[f"lsp_positives_{y}d"]] = l_pos[out_pos, yi]
        values[:, col[f"lsp_found_rate_{y}d"]] = found
        values[:, col[f"lsp_response_hours_{y}d"]] = resp
        values[:, col[f"lsp_no_data_{y}d"]] = (~has).astype(np.float64)

    dup_xi = windows.distances_m.index(DUPLICATE_DISTANCE_M)
    dup_yi = windows.day_windows.index(DUPLICATE_WINDOW_DAYS)
    values[:, col["duplicate_recent_nearby"]] = \
        (counts[out_pos, dup_xi, dup_yi, 0] >= 1).astype(np.float64)

    ids_out = []
    created_out = t[out_pos].copy()
    location_docs: list = []
    activity_docs: list = []
    row_referral = refer[out_pos].copy()
    row_positive = posit[out_pos].copy()
    row_response = np.full(m, np.nan, np.float64)
    never = np.iinfo(np.int64).max
    has_resp = (refer[out_pos] == 1) & (resolved[out_pos] != never)
    row_response[has_resp] = (resolved[out_pos][has_resp] - t[out_pos][has_resp]) / 3600.0

    gazetteers = textmine.default_gazetteers()
    manual_terms = textmine.default_manual_terms()
    weather_cols = [col[c] for c in (
        "weather_temp_max", "weather_temp_min", "weather_temp_avg",
        "weather_precip_max", "weather_precip_min", "weather_snow",
        "weather_wind_avg", "weather_gust_max")]
    rows_by_date: dict = {}

    for r, pos in enumerate(out_pos):
        alert = alerts[order[pos]]
        ids_out.append(alert.id)
        values[r, col[f"platform_{alert.platform.value.lower()}"]] = 1.0
        values[r, col[f"gender_{alert.gender.value.lower()}"]] = 1.0
        values[r, col[f"age_{alert.age_band.value.lower()}"]] = 1.0
        values[r, col["doy_sin"]:col["hour_cos"] + 1] = datetime_cyclical(alert.created_at)
        rows_by_date.setdefault(alert.created_at.astimezone(timezone.utc).date(),
                                []).append(r)

        w_loc, w_app, w_con = word_counts(alert)
        values[r, col["words_location"]] = w_loc
        values[r, col["words_appearance"]] = w_app
        values[r, col["words_concerns"]] = w_con

        field_tokens = (("location", textmine.tokenize(alert.location_text)),
                        ("appearance", textmine.tokenize(alert.appearance_text)),
                        ("concerns", textmine.tokenize(alert.concerns_text)))
        all_tokens = [tok for _, toks in field_tokens for tok in toks]
        entities = textmine.extract_entities(all_tokens, gazetteers)
        loc_doc = sorted(entities["location_entities"].elements())
        act_doc = sorted(entities["activity_entities"].elements())
        location_docs.append(loc_doc)
        activity_docs.append(act_doc)
        values[r, col["entities_location"]] = len(loc_doc)
        values[r, col["entities_activity"]] = len(act_doc)

        for fieldname, toks in field_tokens:
            manual = textmine.manual_topic_counts(toks, manual_terms)
            values[r, col[f"sleep_words_{fieldname}"]] = manual["sleep_count"]
            values[r, col[f"beg_words_{fieldname}"]] = manual["beg_count"]

    for day_date, day_rows in rows_by_date.items():
        day = weather_for_date(weather_days, day_date)
        values[np.ix_(day_rows, weather_cols)] = [
            day.temp_max, day.temp_min, day.temp_avg, day.precip_prob_max,
            day.precip_prob_min, 1.0 if day.snow_flag else 0.0,
            day.wind_avg, day.gust_max]

    # supremum of consumed information: latest strictly-earlier alert or
    # outcome (the kernels' history boundary) and the day start used by the
    # daily weather join
    floor = np.iinfo(np.int64).min
    prev_alert_idx = np.searchsorted(t, created_out, side="left") - 1
    prev_alert = np.where(prev_alert_idx >= 0, t[np.maximum(prev_alert_idx, 0)], floor)
    res_sorted = np.sort(resolved[resolved != never])
    prev_res_idx = np.searchsorted(res_sorted, created_out, side="left") - 1
    prev_res = np.where(prev_res_idx >= 0,
                        res_sorted[np.maximum(prev_res_idx, 0)] if res_sorted.size
                        else floor, floor)
    day_start = created_out - created_out % 86400
    max_info = np.maximum(day_start, np.maximum(prev_alert, prev_res))

    return BaseFeatures(tuple(ids_out), names, groups, values, created_out,
                        location_docs, activity_docs,
                        row_referral, row_positive, row_response, max_info, windows)


def compute_lsp_priors(base: BaseFeatures, train_rows: Sequence[int]) -> LspPriors:
    """Global found rate and mean response from the training split's own outcomes."""
    rows = np.asarray(train_rows, dtype=np.int64)
    referred = base.row_referral[rows] == 1
    n_ref = int(referred.sum())
    if n_ref > 0:
        found_rate = float(base.row_positive[rows][referred].sum()) / n_ref
    else:
        found_rate = 0.5
    resp = base.row_response_hours[rows]
    resp = resp[~np.isnan(resp)]
    response_hours = float(resp.mean()) if resp.size else 72.0
    return LspPriors(found_rate=found_rate, response_hours=response_hours)


def fit_topic_models(base: BaseFeatures, train_rows: Sequence[int],
                     k: int = 10, sweeps: int = 1000, seed: int = 0) -> TopicModels:
    """Fit the location and activity topic models on training-row text only."""
    loc_docs = [base.location_docs[r] for r in train_rows]
    act_docs = [base.activity_docs[r] for r in train_rows]
    return TopicModels(
        location=lda_fit(loc_docs, k=k, sweeps=sweeps, seed=seed),
        activity=lda_fit(act_docs, k=k, sweeps=sweeps, seed=seed + 1),
    )


def finalize_matrix(base: BaseFeatures, models: TopicModels, priors: LspPriors,
                    rows: Sequence[int] | None = None,
                    infer_sweeps: int = 100, infer_seed: int = 0) -> FeatureMatrix:
    """Complete the matrix with fold-fitted topic columns and imputed LSP stats."""
    if rows is None:
        rows = range(len(base.alert_ids))
    rows = list(rows)
    values = base.values[rows].copy()
    names = base.names
    col = {name: i for i, name in enumerate(names)}

    loc_theta = lda_infer_many(models.location, [base.location_docs[r] for r in rows],
                               sweeps=infer_sweeps, seed=infer_seed)
    act_theta = lda_infer_many(models.activity, [base.activity_docs[r] for r in rows],
                               sweeps=infer_sweeps, seed=infer_seed + 1)
    if loc_theta.shape[1] != 10 or act_theta.shape[1] != 10:
        raise ValueError("topic models must have 10 topics to fill the schema")
    values[:, [col[f"topic_location_{i}"] for i in range(10)]] = loc_theta
    values[:, [col[f"topic_activity_{i}"] for i in range(10)]] = act_theta

    for y in base.windows.day_windows:
        for name, fill in ((f"lsp_found_rate_{y}d", priors.found_rate),
                           (f"lsp_response_hours_{y}d", priors.response_hours)):
            column = values[:, col[name]]
            column[np.isnan(column)] = fill

    return FeatureMatrix(tuple(base.alert_ids[r] for r in rows),
                         names, base.groups, values)
