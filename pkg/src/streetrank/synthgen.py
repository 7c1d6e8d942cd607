"""Seeded synthetic alert corpus with a planted outreach-quality signal.

Every alert carries a hidden probability q that outreach would succeed,
driven by its text verbosity, sleep keywords, hotspot proximity, weather
severity and duplicate context. Outcomes are drawn from q through a
simulated capacity-limited manual review, and the per-alert coins behind
those draws are kept so tests can score counterfactual rankings. q and the
coins live in their own oracle file; nothing downstream of the generator
consumes them.

Generation runs on one sequential numpy RNG stream, so a config is a
complete recipe: same seed, same corpus, byte for byte.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from .domain import (
    AgeBand,
    Alert,
    Gender,
    Hotspot,
    OutcomeCode,
    OutcomeRecord,
    Platform,
    RegionBounds,
    WeatherHour,
    format_timestamp,
    parse_timestamp,
    write_alerts_csv,
    write_hotspots_csv,
    write_outcomes_csv,
    write_weather_csv,
)
from .features import EARTH_RADIUS_M, daily_weather, haversine_m

LONDONISH = RegionBounds(lat_min=51.45, lat_max=51.57,
                         lon_min=-0.22, lon_max=0.02)

MANIFEST_NAME = "manifest.json"
ORACLE_NAME = "latent_oracle.csv"


def _utc(year, month, day):
    return datetime(year, month, day, tzinfo=timezone.utc)


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = 42
    start_date: datetime = _utc(2017, 12, 1)
    end_date: datetime = _utc(2019, 2, 28)     # last day with alerts, inclusive
    base_monthly_volume: int = 2200
    growth_rate: float = 0.05                  # per month
    seasonal_amplitude: float = 0.22
    region: RegionBounds = LONDONISH
    n_hotspots: int = 25
    n_lsps: int = 30
    duplicate_rate: float = 0.08
    signal_strength: float = 0.9
    referral_ratio: float = 0.45               # manual review capacity

    def __post_init__(self):
        if self.start_date >= self.end_date:
            raise ValueError("start_date must precede end_date")
        if self.base_monthly_volume < 1:
            raise ValueError("base_monthly_volume must be positive")
        for name, lo, hi in (("growth_rate", -0.5, 1.0),
                             ("seasonal_amplitude", 0.0, 1.0),
                             ("duplicate_rate", 0.0, 1.0),
                             ("signal_strength", 0.0, 1.0),
                             ("referral_ratio", 0.05, 1.0)):
            value = getattr(self, name)
            if not lo <= value <= hi:
                raise ValueError(f"{name}={value} outside [{lo}, {hi}]")
        months = _month_starts(self.start_date, self.end_date)
        peak = self.base_monthly_volume * (1 + self.growth_rate) ** len(months) \
            * (1 + self.seasonal_amplitude)
        if peak * len(months) > 5_000_000:
            raise ValueError("infeasible volume: corpus would exceed 5M alerts")

    def to_mapping(self) -> dict:
        return {
            "seed": self.seed,
            "start_date": format_timestamp(self.start_date),
            "end_date": format_timestamp(self.end_date),
            "base_monthly_volume": self.base_monthly_volume,
            "growth_rate": self.growth_rate,
            "seasonal_amplitude": self.seasonal_amplitude,
            "region": [self.region.lat_min, self.region.lat_max,
                       self.region.lon_min, self.region.lon_max],
            "n_hotspots": self.n_hotspots,
            "n_lsps": self.n_lsps,
            "duplicate_rate": self.duplicate_rate,
            "signal_strength": self.signal_strength,
            "referral_ratio": self.referral_ratio,
        }

    @staticmethod
    def from_mapping(data: dict) -> "GeneratorConfig":
        region = RegionBounds(*data["region"])
        return GeneratorConfig(
            seed=data["seed"],
            start_date=parse_timestamp(data["start_date"]),
            end_date=parse_timestamp(data["end_date"]),
            base_monthly_volume=data["base_monthly_volume"],
            growth_rate=data["growth_rate"],
            seasonal_amplitude=data["seasonal_amplitude"],
            region=region,
            n_hotspots=data["n_hotspots"],
            n_lsps=data["n_lsps"],
            duplicate_rate=data["duplicate_rate"],
            signal_strength=data["signal_strength"],
            referral_ratio=data["referral_ratio"],
        )


@dataclass(frozen=True)
class LatentQuality:
    """Hidden ground truth: never consumed by featurize or learners."""

    alert_id: str
    q: float
    success_coin: float
    respond_coin: float


@dataclass(frozen=True)
class ManualMonth:
    """Observed monthly totals of the simulated manual review."""

    month: str
    referral_count: int
    found_count: int
    found_rate: float | None


@dataclass(frozen=True)
class SyntheticCorpus:
    config: GeneratorConfig
    alerts: tuple[Alert, ...]
    outcomes: tuple[OutcomeRecord, ...]
    hotspots: tuple[Hotspot, ...]
    weather_hours: tuple[WeatherHour, ...]
    latent: tuple[LatentQuality, ...]
    lsp_response_rates: dict = field(default_factory=dict)

    def latent_map(self) -> dict:
        return {lq.alert_id: lq for lq in self.latent}

    def counterfactual_found(self, alert: Alert, lq: LatentQuality) -> bool:
        """Would outreach have succeeded, had this alert been referred?"""
        rate = self.lsp_response_rates[alert.lsp_id]
        return lq.respond_coin < rate and lq.success_coin < lq.q

    def counterfactual_rate(self, alert_ids) -> float:
        by_id = {a.id: a for a in self.alerts}
        latent = self.latent_map()
        ids = list(alert_ids)
        if not ids:
            raise ValueError("empty id set")
        hits = sum(self.counterfactual_found(by_id[i], latent[i]) for i in ids)
        return hits / len(ids)


# ---------------------------------------------------------------------------
# Vocabulary pools


LOCATION_TERMS = (
    "station park hotel street road bridge church alley underpass subway "
    "bank library market square arcade canal dock doorway stairwell precinct "
    "cemetery".split() + [
        "train station", "bus stop", "bus station", "car park", "high street",
        "shopping centre", "retail park", "town hall", "multi storey",
        "albion road", "crown street", "mill lane", "station approach",
        "queensway", "riverside walk", "castle hill", "victoria embankment",
        "old kent road", "green lanes", "church walk", "market row",
        "abbey gardens", "north circular", "tanner yard", "paradise row",
        "baker arch", "eastfield parade", "harbour steps", "pelham court",
        "foundry corner", "west pier", "longacre", "stonebridge estate",
        "ferry gate", "holly mews", "drayton walk",
        "camden lock", "bell yard", "orchard place", "vine passage",
    ])

SLEEP_TERMS = ("tent duvet bedded blanket mattress pillow cardboard doorway "
               "rug quilt bedding tarpaulin".split() + [
                   "sleeping bag", "bedded down", "rough sleeping",
                   "sleeping", "wrapped", "huddled", "dossing", "sheltering",
               ])

BEG_TERMS = ("beg begging cup asking money spare coins donations".split() + [
    "small change", "loose change", "please help", "collecting", "tin",
    "sign", "panhandling", "busking", "donation cup", "asking passersby",
    "change",
])

ACTIVITY_TERMS = ("sitting lying drinking shouting camping wandering "
                  "rummaging loitering smoking crying resting slumped "
                  "crouched".split() + ["passed out"])

FILLER = ("saw person man woman young older looked seemed really quite near "
          "next behind opposite outside along under over around corner back "
          "front side today tonight morning evening night week regular same "
          "spot always often sometimes still left right across while walking "
          "home work passed noticed worried concerned cold wet windy dark "
          "quiet busy alone pair group dog belongings bags trolley shopping "
          "moved staying area local council help support please thanks "
          "update again earlier later possibly maybe definitely").split()

COLOURS = "blue red green black grey brown navy dark light beige".split()
GARMENTS = ("coat jacket hoodie jumper boots trainers hat cap scarf gloves "
            "parka anorak tracksuit jeans").split()

_GENDERS = (Gender.MALE, Gender.FEMALE, Gender.MISSING, Gender.UNKNOWN)
_GENDER_P = (0.52, 0.18, 0.22, 0.08)
_AGES = (AgeBand.UNDER_18, AgeBand.A18_TO_25, AgeBand.A26_TO_40,
         AgeBand.A41_TO_60, AgeBand.OVER_60, AgeBand.UNKNOWN, AgeBand.MISSING)
_AGE_P = (0.03, 0.17, 0.32, 0.22, 0.08, 0.06, 0.12)
_PLATFORMS = (Platform.PHONE, Platform.WEBSITE, Platform.MOBILE_APP)
_PLATFORM_P = (0.22, 0.48, 0.30)


def _month_starts(start: datetime, end_inclusive: datetime) -> list[datetime]:
    months = []
    cursor = start.replace(day=1)
    while cursor <= end_inclusive:
        months.append(cursor)
        cursor = (cursor.replace(year=cursor.year + 1, month=1)
                  if cursor.month == 12 else cursor.replace(month=cursor.month + 1))
    return months


def _winter_bump(moment: datetime) -> float:
    """Raised cosine on day-of-year, peaking mid-January."""
    doy = moment.timetuple().tm_yday
    return 0.5 * (1.0 + math.cos(2.0 * math.pi * (doy - 15) / 365.25))


def _seasonal_temp(moment: datetime) -> float:
    doy = moment.timetuple().tm_yday
    return 10.5 + 8.0 * math.cos(2.0 * math.pi * (doy - 196) / 365.25)


def _generate_weather(rng, start: datetime, end: datetime) -> list[WeatherHour]:
    hours = []
    cursor = start
    ar_t, ar_p, ar_w = 0.0, 0.0, 0.0
    while cursor < end:
        ar_t = 0.95 * ar_t + rng.normal(0.0, 0.6)
        ar_p = 0.90 * ar_p + rng.normal(0.0, 0.05)
        ar_w = 0.90 * ar_w + rng.normal(0.0, 1.0)
        diurnal = -3.0 * math.cos(2.0 * math.pi * cursor.hour / 24.0)
        temp = _seasonal_temp(cursor) + diurnal + ar_t
        precip = min(1.0, max(0.0, 0.35 + 0.15 * math.sin(
            2.0 * math.pi * cursor.timetuple().tm_yday / 365.25) + ar_p))
        wind = max(0.0, 12.0 + 4.0 * ar_w)
        gust = wind * (1.25 + 0.5 * abs(rng.normal()))
        snow = max(0.0, (0.5 - temp) * 2.0 * precip) \
            if temp < 0.5 and precip > 0.55 else 0.0
        hours.append(WeatherHour(cursor, round(temp, 2), round(wind, 2),
                                 round(gust, 2), round(precip, 3),
                                 round(snow, 2)))
        cursor += timedelta(hours=1)
    return hours


def _pick(rng, pool, k):
    return [pool[i] for i in rng.integers(0, len(pool), size=k)]


def _phrase(rng, words):
    return " ".join(words)


def generate_corpus(config: GeneratorConfig = GeneratorConfig()) -> SyntheticCorpus:
    """Build the full corpus: alerts, outcomes, hotspots, weather, oracle."""
    rng = np.random.default_rng(config.seed)
    region = config.region

    hotspots = tuple(
        Hotspot(latitude=rng.uniform(region.lat_min, region.lat_max),
                longitude=rng.uniform(region.lon_min, region.lon_max),
                label=f"hotspot-{i:02d}")
        for i in range(config.n_hotspots))

    lsp_centers = [(rng.uniform(region.lat_min, region.lat_max),
                    rng.uniform(region.lon_min, region.lon_max))
                   for _ in range(config.n_lsps)]
    lsp_rates = {f"lsp-{i:02d}": float(rng.uniform(0.60, 0.95))
                 for i in range(config.n_lsps)}
    lsp_lag_scale = {f"lsp-{i:02d}": float(rng.uniform(24.0, 72.0))
                     for i in range(config.n_lsps)}

    weather_hours = _generate_weather(
        rng, config.start_date - timedelta(days=7),
        config.end_date + timedelta(days=2))
    weather_by_day = daily_weather(weather_hours)

    months = _month_starts(config.start_date, config.end_date)
    end_exclusive = config.end_date + timedelta(days=1)

    alerts: list[Alert] = []
    outcomes: list[OutcomeRecord] = []
    latents: list[LatentQuality] = []
    recent: list[tuple[datetime, float, float, str]] = []  # (created, lat, lon, text)
    counter = 0

    for t, month_start in enumerate(months):
        month_end = min(
            months[t + 1] if t + 1 < len(months) else end_exclusive,
            end_exclusive)
        mid = month_start + (month_end - month_start) / 2
        expected = (config.base_monthly_volume
                    * (1.0 + config.growth_rate) ** t
                    * (1.0 + config.seasonal_amplitude * _winter_bump(mid)))
        count = int(rng.poisson(expected))
        span = (month_end - month_start).total_seconds()
        offsets = np.sort(rng.uniform(0.0, span, size=count))

        month_rows = []
        for offset in offsets:
            created = (month_start + timedelta(seconds=float(offset))
                       ).replace(microsecond=0)
            counter += 1
            alert_id = f"a-{counter:06d}"

            horizon = created - timedelta(days=7)
            while recent and recent[0][0] < horizon:
                recent.pop(0)
            duplicate_of = None
            if recent and rng.random() < config.duplicate_rate:
                duplicate_of = recent[int(rng.integers(0, len(recent)))]

            if duplicate_of is not None:
                bearing = rng.uniform(0.0, 2.0 * math.pi)
                dist = rng.uniform(10.0, 100.0)
                lat = duplicate_of[1] + math.degrees(
                    dist * math.cos(bearing) / EARTH_RADIUS_M)
                lon = duplicate_of[2] + math.degrees(
                    dist * math.sin(bearing)
                    / (EARTH_RADIUS_M * math.cos(math.radians(duplicate_of[1]))))
                loc_terms = [duplicate_of[3]]
            elif rng.random() < 0.45:
                hot = hotspots[int(rng.integers(0, len(hotspots)))]
                lat = hot.latitude + math.degrees(
                    rng.normal(0.0, 250.0) / EARTH_RADIUS_M)
                lon = hot.longitude + math.degrees(
                    rng.normal(0.0, 250.0)
                    / (EARTH_RADIUS_M * math.cos(math.radians(hot.latitude))))
                loc_terms = _pick(rng, LOCATION_TERMS, 1)
            else:
                lat = rng.uniform(region.lat_min, region.lat_max)
                lon = rng.uniform(region.lon_min, region.lon_max)
                loc_terms = _pick(rng, LOCATION_TERMS, 1)
            lat = min(max(lat, region.lat_min), region.lat_max)
            lon = min(max(lon, region.lon_min), region.lon_max)

            nearest_hot = min(haversine_m(lat, lon, h.latitude, h.longitude)
                              for h in hotspots)
            lsp_idx = min(range(config.n_lsps),
                          key=lambda i: (lsp_centers[i][0] - lat) ** 2
                          + (lsp_centers[i][1] - lon) ** 2)
            lsp_id = f"lsp-{lsp_idx:02d}"

            detail = float(rng.beta(2.0, 2.0))
            if rng.random() < 0.3:
                loc_terms = loc_terms + _pick(rng, LOCATION_TERMS, 1)
            location_text = _phrase(rng, _pick(rng, FILLER,
                                               2 + int(detail * 5))
                                    + loc_terms)
            appearance_text = "" if rng.random() < 0.15 else _phrase(
                rng, _pick(rng, COLOURS, 1) + _pick(rng, GARMENTS,
                                                    1 + int(detail * 2))
                + _pick(rng, FILLER, 1 + int(detail * 4)))

            sleep_terms = (_pick(rng, SLEEP_TERMS, 1 + int(rng.random() * 2))
                           if rng.random() < 0.45 else [])
            beg_terms = (_pick(rng, BEG_TERMS, 1)
                         if rng.random() < 0.25 else [])
            activity_terms = (_pick(rng, ACTIVITY_TERMS, 1)
                              if rng.random() < 0.55 else [])
            concerns_text = _phrase(
                rng, _pick(rng, FILLER, 3 + int(detail * 7))
                + sleep_terms + beg_terms + activity_terms)

            total_words = (len(location_text.split())
                           + len(appearance_text.split())
                           + len(concerns_text.split()))

            day = weather_by_day[created.date()]
            severity = min(max((7.0 - day.temp_avg) / 7.0, 0.0), 1.0)
            if day.snow_flag:
                severity = min(severity + 0.3, 1.0)

            z_words = min(max((total_words - 14.0) / 12.0, -1.0), 1.0)
            lin = (0.32 * z_words
                   + 0.10 * (1.0 if sleep_terms else 0.0)
                   - 0.08 * (1.0 if nearest_hot < 250.0 else 0.0)
                   + 0.34 * severity
                   + 0.12 * (1.0 if duplicate_of is not None else 0.0))
            q = min(max(0.16 + config.signal_strength * lin
                        + rng.normal(0.0, 0.02), 0.02), 0.95)

            time_seen = None
            if rng.random() < 0.7:
                time_seen = (created - timedelta(
                    seconds=float(rng.uniform(0, 12 * 3600)))
                ).replace(microsecond=0)

            alert = Alert(
                id=alert_id, created_at=created, time_seen=time_seen,
                platform=_PLATFORMS[_choice(rng, _PLATFORM_P)],
                latitude=round(lat, 6), longitude=round(lon, 6),
                lsp_id=lsp_id,
                gender=_GENDERS[_choice(rng, _GENDER_P)],
                age_band=_AGES[_choice(rng, _AGE_P)],
                location_text=location_text,
                appearance_text=appearance_text,
                concerns_text=concerns_text)
            alerts.append(alert)
            latent = LatentQuality(alert_id=alert_id, q=q,
                                   success_coin=float(rng.random()),
                                   respond_coin=float(rng.random()))
            latents.append(latent)
            recent.append((created, lat, lon,
                           loc_terms[0] if loc_terms else "street"))

            manual_h = (0.40 * float(rng.random())
                        + 0.12 * (1.0 if sleep_terms else 0.0)
                        + 0.30 * (1.0 if beg_terms else 0.0)
                        + 0.06 * min(total_words / 20.0, 1.0))
            month_rows.append((alert, latent, manual_h,
                               duplicate_of is not None,
                               nearest_hot < 250.0, total_words))

        # capacity-limited manual review: top share of the month by heuristic
        capacity = int(round(config.referral_ratio * len(month_rows)))
        ranked = sorted(range(len(month_rows)),
                        key=lambda i: -month_rows[i][2])
        referred = set(ranked[:capacity])
        for i, (alert, latent, _h, is_dup, is_hot, words) in enumerate(month_rows):
            outcomes.append(_draw_outcome(
                rng, alert, latent, i in referred, is_dup, is_hot, words,
                lsp_rates, lsp_lag_scale))

    return SyntheticCorpus(config=config, alerts=tuple(alerts),
                           outcomes=tuple(outcomes), hotspots=hotspots,
                           weather_hours=tuple(weather_hours),
                           latent=tuple(latents),
                           lsp_response_rates=lsp_rates)


def _choice(rng, probabilities) -> int:
    roll = rng.random()
    acc = 0.0
    for i, p in enumerate(probabilities):
        acc += p
        if roll < acc:
            return i
    return len(probabilities) - 1


def _draw_outcome(rng, alert, latent, referred, is_dup, is_hot, words,
                  lsp_rates, lsp_lag_scale) -> OutcomeRecord:
    created = alert.created_at
    if not referred:
        if is_dup:
            code = OutcomeCode.DUPLICATE_ALERT
        elif is_hot:
            code = OutcomeCode.KNOWN_HOTSPOT_NO_ACTION
        elif words < 8:
            code = OutcomeCode.NOT_ENOUGH_INFORMATION
        else:
            code = OutcomeCode.INSUFFICIENT_RESOURCES
        lag = timedelta(hours=float(rng.uniform(2.0, 48.0)))
        return OutcomeRecord(alert.id, code, (created + lag).replace(microsecond=0))

    roll = rng.random()
    if roll < 0.04:
        code = OutcomeCode.STILL_OPEN
        lag = timedelta(hours=float(rng.uniform(72.0, 288.0)))
    elif roll < 0.06:
        code = OutcomeCode.REFERRED_OUT_OF_AREA
        lag = timedelta(hours=float(rng.uniform(24.0, 120.0)))
    elif latent.respond_coin >= lsp_rates[alert.lsp_id]:
        code = OutcomeCode.LSP_DID_NOT_RESPOND
        lag = timedelta(hours=float(rng.uniform(48.0, 216.0)))
    else:
        hours = 12.0 + float(rng.exponential(lsp_lag_scale[alert.lsp_id]))
        lag = timedelta(hours=min(hours, 228.0))
        if latent.success_coin < latent.q:
            code = OutcomeCode.PERSON_FOUND
        elif rng.random() < 0.12:
            code = OutcomeCode.PERSON_REFUSED_SERVICE
        else:
            code = OutcomeCode.PERSON_NOT_FOUND
    return OutcomeRecord(alert.id, code, (created + lag).replace(microsecond=0))


def simulate_manual_baseline(alerts, outcomes, month: str) -> ManualMonth:
    """Observed referral and found totals for one calendar month."""
    by_id = {o.alert_id: o for o in outcomes}
    in_month = [a for a in alerts
                if a.created_at.strftime("%Y-%m") == month]
    if not in_month:
        raise ValueError(f"no alerts in month {month}")
    referral_count = 0
    found_count = 0
    for alert in in_month:
        record = by_id.get(alert.id)
        if record is None:
            continue
        if record.labels().referral.value == "Yes":
            referral_count += 1
            if record.outcome_code is OutcomeCode.PERSON_FOUND:
                found_count += 1
    rate = found_count / referral_count if referral_count else None
    return ManualMonth(month=month, referral_count=referral_count,
                       found_count=found_count, found_rate=rate)


# ---------------------------------------------------------------------------
# Files


def write_corpus(corpus: SyntheticCorpus, directory) -> None:
    """CSV corpus + manifest + the hidden-oracle file (tests only)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_alerts_csv(directory / "alerts.csv", corpus.alerts)
    write_outcomes_csv(directory / "outcomes.csv", corpus.outcomes)
    write_hotspots_csv(directory / "hotspots.csv", corpus.hotspots)
    write_weather_csv(directory / "weather.csv", corpus.weather_hours)
    with open(directory / ORACLE_NAME, "w") as handle:
        handle.write("alert_id,q,success_coin,respond_coin\n")
        for lq in corpus.latent:
            handle.write(f"{lq.alert_id},{lq.q!r},{lq.success_coin!r},"
                         f"{lq.respond_coin!r}\n")
    manifest = {
        "config": corpus.config.to_mapping(),
        "counts": {"alerts": len(corpus.alerts),
                   "outcomes": len(corpus.outcomes),
                   "hotspots": len(corpus.hotspots),
                   "weather_hours": len(corpus.weather_hours)},
        "lsp_response_rates": corpus.lsp_response_rates,
    }
    with open(directory / MANIFEST_NAME, "w") as handle:
        json.dump(manifest, handle, indent=1, sort_keys=True)
        handle.write("\n")


def read_oracle(directory) -> tuple[dict, dict]:
    """Latent qualities and LSP response rates, for test accounting."""
    directory = Path(directory)
    latent = {}
    with open(directory / ORACLE_NAME) as handle:
        next(handle)
        for line in handle:
            alert_id, q, success, respond = line.rstrip("\n").split(",")
            latent[alert_id] = LatentQuality(alert_id, float(q),
                                             float(success), float(respond))
    with open(directory / MANIFEST_NAME) as handle:
        manifest = json.load(handle)
    return latent, manifest["lsp_response_rates"]
