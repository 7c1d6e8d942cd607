"""Core data types, outcome-to-label mapping, and validation shared by the pipeline.

All types are immutable value objects. Timestamps are timezone-aware UTC at
second resolution; CSV interchange uses ISO-8601 with a trailing ``Z``.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, replace
from datetime import datetime, date, timezone
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence


class Platform(enum.Enum):
    PHONE = "Phone"
    WEBSITE = "Website"
    MOBILE_APP = "MobileApp"


class Gender(enum.Enum):
    MALE = "Male"
    FEMALE = "Female"
    UNKNOWN = "Unknown"   # reporter explicitly could not tell
    MISSING = "Missing"   # field left empty


class AgeBand(enum.Enum):
    UNDER_18 = "Under18"
    A18_TO_25 = "A18to25"
    A26_TO_40 = "A26to40"
    A41_TO_60 = "A41to60"
    OVER_60 = "Over60"
    UNKNOWN = "Unknown"
    MISSING = "Missing"


class OutcomeCode(enum.Enum):
    """Synthetic outcome vocabulary (stand-in for the private production codes)."""

    PERSON_FOUND = "PersonFound"
    PERSON_NOT_FOUND = "PersonNotFound"
    LSP_DID_NOT_RESPOND = "LspDidNotRespond"
    STILL_OPEN = "StillOpen"
    NOT_ENOUGH_INFORMATION = "NotEnoughInformation"
    DUPLICATE_ALERT = "DuplicateAlert"
    KNOWN_HOTSPOT_NO_ACTION = "KnownHotspotNoAction"
    PERSON_REFUSED_SERVICE = "PersonRefusedService"
    REFERRED_OUT_OF_AREA = "ReferredOutOfArea"
    INSUFFICIENT_RESOURCES = "InsufficientResources"


class ReferralLabel(enum.Enum):
    YES = "Yes"
    NO = "No"


class PositiveLabel(enum.Enum):
    YES = "Yes"
    NO = "No"
    NULL = "Null"


@dataclass(frozen=True)
class LabelPair:
    """Referral label plus positive-outcome label derived from an outcome code.

    A positive-outcome label of Yes or No is only observable after a referral,
    so ``positive != NULL`` forces ``referral == YES``.
    """

    referral: ReferralLabel
    positive: PositiveLabel

    def __post_init__(self) -> None:
        if self.positive is not PositiveLabel.NULL and self.referral is not ReferralLabel.YES:
            raise ValueError("non-NULL positive label requires referral == Yes")


_LABEL_TABLE = {
    OutcomeCode.PERSON_FOUND: LabelPair(ReferralLabel.YES, PositiveLabel.YES),
    OutcomeCode.PERSON_NOT_FOUND: LabelPair(ReferralLabel.YES, PositiveLabel.NO),
    OutcomeCode.PERSON_REFUSED_SERVICE: LabelPair(ReferralLabel.YES, PositiveLabel.NO),
    OutcomeCode.LSP_DID_NOT_RESPOND: LabelPair(ReferralLabel.YES, PositiveLabel.NULL),
    OutcomeCode.STILL_OPEN: LabelPair(ReferralLabel.YES, PositiveLabel.NULL),
    OutcomeCode.REFERRED_OUT_OF_AREA: LabelPair(ReferralLabel.YES, PositiveLabel.NULL),
    OutcomeCode.NOT_ENOUGH_INFORMATION: LabelPair(ReferralLabel.NO, PositiveLabel.NULL),
    OutcomeCode.DUPLICATE_ALERT: LabelPair(ReferralLabel.NO, PositiveLabel.NULL),
    OutcomeCode.KNOWN_HOTSPOT_NO_ACTION: LabelPair(ReferralLabel.NO, PositiveLabel.NULL),
    OutcomeCode.INSUFFICIENT_RESOURCES: LabelPair(ReferralLabel.NO, PositiveLabel.NULL),
}


class UnmappedOutcomeError(KeyError):
    """Raised for outcome codes outside the declared vocabulary."""


def map_outcome_to_labels(outcome_code: OutcomeCode | str) -> LabelPair:
    """Map an outcome code to its (referral, positive) label pair.

    Total over the declared vocabulary; anything else raises
    :class:`UnmappedOutcomeError` rather than silently yielding NULL.
    """
    if isinstance(outcome_code, str):
        try:
            outcome_code = OutcomeCode(outcome_code)
        except ValueError:
            raise UnmappedOutcomeError(f"unmapped outcome: {outcome_code!r}") from None
    pair = _LABEL_TABLE.get(outcome_code)
    if pair is None:
        raise UnmappedOutcomeError(f"unmapped outcome: {outcome_code!r}")
    return pair


@dataclass(frozen=True)
class RegionBounds:
    """Bounding box of the corpus region, degrees."""

    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float

    def __post_init__(self) -> None:
        if not (-90.0 <= self.lat_min < self.lat_max <= 90.0):
            raise ValueError("invalid latitude bounds")
        if not (-180.0 <= self.lon_min < self.lon_max <= 180.0):
            raise ValueError("invalid longitude bounds")

    def contains(self, latitude: float, longitude: float) -> bool:
        return (self.lat_min <= latitude <= self.lat_max
                and self.lon_min <= longitude <= self.lon_max)


@dataclass(frozen=True)
class Alert:
    """One public report of a potential rough sleeper."""

    id: str
    created_at: datetime
    time_seen: Optional[datetime]
    platform: Platform
    latitude: float
    longitude: float
    lsp_id: str
    gender: Gender
    age_band: AgeBand
    location_text: str    # empty string == missing
    appearance_text: str
    concerns_text: str


@dataclass(frozen=True)
class OutcomeRecord:
    alert_id: str
    outcome_code: OutcomeCode
    resolved_at: datetime

    def labels(self) -> LabelPair:
        return map_outcome_to_labels(self.outcome_code)


@dataclass(frozen=True)
class Hotspot:
    """Location with known regular street activity; referrals are not sent there."""

    latitude: float
    longitude: float
    label: str

    def __post_init__(self) -> None:
        if not (-90.0 <= self.latitude <= 90.0 and -180.0 <= self.longitude <= 180.0):
            raise ValueError("hotspot coordinates out of range")


@dataclass(frozen=True)
class WeatherHour:
    timestamp: datetime
    temperature: float          # deg C
    wind_speed: float           # m/s
    wind_gust: float
    precip_probability: float   # [0, 1]
    snow_accumulation: float    # mm, >= 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.precip_probability <= 1.0:
            raise ValueError("precip_probability outside [0, 1]")
        if self.snow_accumulation < 0.0:
            raise ValueError("negative snow accumulation")


@dataclass(frozen=True)
class WeatherDay:
    day: date
    temp_max: float
    temp_min: float
    temp_avg: float
    precip_prob_max: float
    precip_prob_min: float
    snow_flag: bool
    wind_avg: float
    gust_max: float

    def __post_init__(self) -> None:
        if not (self.temp_min <= self.temp_avg <= self.temp_max):
            raise ValueError("daily temperature aggregates out of order")
        if self.precip_prob_min > self.precip_prob_max:
            raise ValueError("daily precip aggregates out of order")


class RejectionError(ValueError):
    """A raw record failed validation; ``reason`` carries the machine-readable code."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


@dataclass(frozen=True)
class Rejection:
    """Rejected raw record plus the reason code, for cleaning reports."""

    record_id: str
    reason: str


UTC = timezone.utc


def parse_timestamp(value: str) -> datetime:
    """Parse an ISO-8601 timestamp to tz-aware UTC; naive inputs are taken as UTC."""
    text = value.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    try:
        parsed = datetime.fromisoformat(text)
    except ValueError:
        raise RejectionError("unparseable timestamp", value) from None
    if parsed.tzinfo is None:
        parsed = parsed.replace(tzinfo=UTC)
    return parsed.astimezone(UTC).replace(microsecond=0)


def format_timestamp(value: datetime) -> str:
    return value.astimezone(UTC).strftime("%Y-%m-%dT%H:%M:%SZ")


def _parse_enum(kind, raw: str, *, missing, field: str):
    text = raw.strip()
    if text == "":
        return missing
    for member in kind:
        if member.value.lower() == text.lower():
            return member
    raise RejectionError(f"invalid {field}", raw)


def validate_alert(record: Mapping[str, object] | Alert,
                   bounds: RegionBounds | None = None) -> Alert:
    """Normalise a raw record into an :class:`Alert`, or raise :class:`RejectionError`.

    Free text is lowercased and stripped, empty demographic strings become
    Missing, timestamps are parsed to UTC. Idempotent: a valid ``Alert``
    passes through unchanged.
    """
    if isinstance(record, Alert):
        _check_alert(record, bounds)
        return record

    raw_created = str(record.get("created_at", "") or "").strip()
    if not raw_created:
        raise RejectionError("missing created_at")
    created_at = parse_timestamp(raw_created)

    raw_seen = str(record.get("time_seen", "") or "").strip()
    time_seen = parse_timestamp(raw_seen) if raw_seen else None
    if time_seen is not None and time_seen > created_at:
        raise RejectionError("time_seen after created_at")

    try:
        latitude = float(record.get("latitude", ""))   # type: ignore[arg-type]
        longitude = float(record.get("longitude", ""))  # type: ignore[arg-type]
    except (TypeError, ValueError):
        raise RejectionError("unparseable coordinate") from None
    _check_coords(latitude, longitude, bounds)

    platform = _parse_enum(Platform, str(record.get("platform", "")), missing=None,
                           field="platform")
    if platform is None:
        raise RejectionError("missing platform")

    alert = Alert(
        id=str(record.get("id", "")).strip(),
        created_at=created_at,
        time_seen=time_seen,
        platform=platform,
        latitude=latitude,
        longitude=longitude,
        lsp_id=str(record.get("lsp_id", "")).strip(),
        gender=_parse_enum(Gender, str(record.get("gender", "")),
                           missing=Gender.MISSING, field="gender"),
        age_band=_parse_enum(AgeBand, str(record.get("age_band", "")),
                             missing=AgeBand.MISSING, field="age_band"),
        location_text=str(record.get("location_text", "") or "").strip().lower(),
        appearance_text=str(record.get("appearance_text", "") or "").strip().lower(),
        concerns_text=str(record.get("concerns_text", "") or "").strip().lower(),
    )
    if not alert.id:
        raise RejectionError("missing id")
    return alert


def _check_coords(latitude: float, longitude: float, bounds: RegionBounds | None) -> None:
    if not (-90.0 <= latitude <= 90.0 and -180.0 <= longitude <= 180.0):
        raise RejectionError("coordinate out of range", f"({latitude}, {longitude})")
    if bounds is not None and not bounds.contains(latitude, longitude):
        raise RejectionError("coordinate out of range",
                             f"({latitude}, {longitude}) outside region")


def _check_alert(alert: Alert, bounds: RegionBounds | None) -> None:
    _check_coords(alert.latitude, alert.longitude, bounds)
    if alert.time_seen is not None and alert.time_seen > alert.created_at:
        raise RejectionError("time_seen after created_at")


# ---------------------------------------------------------------------------
# CSV interchange.  Header rows are fixed and documented here; timestamps are
# ISO-8601 UTC with trailing Z.

ALERT_FIELDS = ["id", "created_at", "time_seen", "platform", "latitude", "longitude",
                "lsp_id", "gender", "age_band", "location_text", "appearance_text",
                "concerns_text"]
OUTCOME_FIELDS = ["alert_id", "outcome_code", "resolved_at"]
HOTSPOT_FIELDS = ["latitude", "longitude", "label"]
WEATHER_FIELDS = ["timestamp", "temperature", "wind_speed", "wind_gust",
                  "precip_probability", "snow_accumulation"]


def alert_to_row(alert: Alert) -> dict:
    return {
        "id": alert.id,
        "created_at": format_timestamp(alert.created_at),
        "time_seen": format_timestamp(alert.time_seen) if alert.time_seen else "",
        "platform": alert.platform.value,
        "latitude": repr(alert.latitude),
        "longitude": repr(alert.longitude),
        "lsp_id": alert.lsp_id,
        "gender": alert.gender.value,
        "age_band": alert.age_band.value,
        "location_text": alert.location_text,
        "appearance_text": alert.appearance_text,
        "concerns_text": alert.concerns_text,
    }


def write_alerts_csv(path: Path | str, alerts: Iterable[Alert]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=ALERT_FIELDS)
        writer.writeheader()
        for alert in alerts:
            writer.writerow(alert_to_row(alert))


def read_alerts_csv(path: Path | str,
                    bounds: RegionBounds | None = None
                    ) -> tuple[list[Alert], list[Rejection]]:
    alerts: list[Alert] = []
    rejections: list[Rejection] = []
    with open(path, newline="", encoding="utf-8") as handle:
        for row in csv.DictReader(handle):
            try:
                alerts.append(validate_alert(row, bounds))
            except RejectionError as err:
                rejections.append(Rejection(str(row.get("id", "")), err.reason))
    return alerts, rejections


def write_outcomes_csv(path: Path | str, outcomes: Iterable[OutcomeRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=OUTCOME_FIELDS)
        writer.writeheader()
        for rec in outcomes:
            writer.writerow({"alert_id": rec.alert_id,
                             "outcome_code": rec.outcome_code.value,
                             "resolved_at": format_timestamp(rec.resolved_at)})


def read_outcomes_csv(path: Path | str) -> list[OutcomeRecord]:
    records = []
    with open(path, newline="", encoding="utf-8") as handle:
        for row in csv.DictReader(handle):
            records.append(OutcomeRecord(
                alert_id=row["alert_id"],
                outcome_code=OutcomeCode(row["outcome_code"]),
                resolved_at=parse_timestamp(row["resolved_at"]),
            ))
    return records


def write_hotspots_csv(path: Path | str, hotspots: Iterable[Hotspot]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=HOTSPOT_FIELDS)
        writer.writeheader()
        for spot in hotspots:
            writer.writerow({"latitude": repr(spot.latitude),
                             "longitude": repr(spot.longitude),
                             "label": spot.label})


def read_hotspots_csv(path: Path | str) -> list[Hotspot]:
    with open(path, newline="", encoding="utf-8") as handle:
        return [Hotspot(float(row["latitude"]), float(row["longitude"]), row["label"])
                for row in csv.DictReader(handle)]


def write_weather_csv(path: Path | str, hours: Iterable[WeatherHour]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=WEATHER_FIELDS)
        writer.writeheader()
        for hour in hours:
            writer.writerow({
                "timestamp": format_timestamp(hour.timestamp),
                "temperature": repr(hour.temperature),
                "wind_speed": repr(hour.wind_speed),
                "wind_gust": repr(hour.wind_gust),
                "precip_probability": repr(hour.precip_probability),
                "snow_accumulation": repr(hour.snow_accumulation),
            })


def read_weather_csv(path: Path | str) -> list[WeatherHour]:
    hours = []
    with open(path, newline="", encoding="utf-8") as handle:
        for row in csv.DictReader(handle):
            hours.append(WeatherHour(
                timestamp=parse_timestamp(row["timestamp"]),
                temperature=float(row["temperature"]),
                wind_speed=float(row["wind_speed"]),
                wind_gust=float(row["wind_gust"]),
                precip_probability=float(row["precip_probability"]),
                snow_accumulation=float(row["snow_accumulation"]),
            ))
    return hours
