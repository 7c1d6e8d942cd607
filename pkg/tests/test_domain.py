import pytest
from hypothesis import given
from hypothesis import strategies as st

from streetrank.domain import (
    Alert,
    AgeBand,
    Gender,
    LabelPair,
    OutcomeCode,
    Platform,
    PositiveLabel,
    ReferralLabel,
    RegionBounds,
    RejectionError,
    UnmappedOutcomeError,
    format_timestamp,
    map_outcome_to_labels,
    parse_timestamp,
    validate_alert,
)


def make_record(**overrides):
    record = {
        "id": "a1",
        "created_at": "2018-01-15T18:30:00Z",
        "time_seen": "2018-01-15T18:00:00Z",
        "platform": "MobileApp",
        "latitude": "51.5",
        "longitude": "-0.12",
        "lsp_id": "lsp-03",
        "gender": "Male",
        "age_band": "A26to40",
        "location_text": "Outside the STATION entrance",
        "appearance_text": "Blue COAT",
        "concerns_text": "",
    }
    record.update(overrides)
    return record


@given(st.sampled_from(list(OutcomeCode)))
def test_every_outcome_code_maps(code):
    pair = map_outcome_to_labels(code)
    assert isinstance(pair, LabelPair)


@given(st.sampled_from(list(OutcomeCode)))
def test_positive_label_implies_referral(code):
    pair = map_outcome_to_labels(code)
    if pair.positive is not PositiveLabel.NULL:
        assert pair.referral is ReferralLabel.YES


def test_label_pairs_match_vocabulary():
    assert map_outcome_to_labels("PersonFound") == LabelPair(ReferralLabel.YES, PositiveLabel.YES)
    assert map_outcome_to_labels("PersonNotFound") == LabelPair(ReferralLabel.YES, PositiveLabel.NO)
    assert map_outcome_to_labels("PersonRefusedService") == LabelPair(ReferralLabel.YES, PositiveLabel.NO)
    assert map_outcome_to_labels("StillOpen") == LabelPair(ReferralLabel.YES, PositiveLabel.NULL)
    assert map_outcome_to_labels("NotEnoughInformation") == LabelPair(ReferralLabel.NO, PositiveLabel.NULL)


def test_unmapped_outcome_raises():
    with pytest.raises(UnmappedOutcomeError):
        map_outcome_to_labels("Abducted")


def test_inconsistent_label_pair_rejected():
    with pytest.raises(ValueError):
        LabelPair(ReferralLabel.NO, PositiveLabel.YES)


def test_validate_lowercases_text():
    alert = validate_alert(make_record())
    assert alert.appearance_text == "blue coat"
    assert alert.location_text == "outside the station entrance"


def test_validate_normalises_empty_demographics_to_missing():
    alert = validate_alert(make_record(gender="", age_band=""))
    assert alert.gender is Gender.MISSING
    assert alert.age_band is AgeBand.MISSING


def test_unknown_is_distinct_from_missing():
    alert = validate_alert(make_record(gender="Unknown"))
    assert alert.gender is Gender.UNKNOWN
    assert alert.gender is not Gender.MISSING


def test_out_of_range_latitude_rejected():
    with pytest.raises(RejectionError) as exc:
        validate_alert(make_record(latitude="95.0"))
    assert exc.value.reason == "coordinate out of range"


def test_missing_created_at_rejected():
    with pytest.raises(RejectionError) as exc:
        validate_alert(make_record(created_at=""))
    assert exc.value.reason == "missing created_at"


def test_unparseable_timestamp_rejected():
    with pytest.raises(RejectionError) as exc:
        validate_alert(make_record(created_at="last tuesday"))
    assert exc.value.reason == "unparseable timestamp"


def test_time_seen_after_created_rejected():
    with pytest.raises(RejectionError):
        validate_alert(make_record(time_seen="2018-01-15T19:00:00Z"))


def test_region_bounds_enforced():
    bounds = RegionBounds(51.0, 52.0, -1.0, 1.0)
    validate_alert(make_record(), bounds)
    with pytest.raises(RejectionError) as exc:
        validate_alert(make_record(latitude="53.0"), bounds)
    assert exc.value.reason == "coordinate out of range"


def test_validate_is_idempotent():
    alert = validate_alert(make_record())
    assert validate_alert(alert) == alert


def test_timestamp_roundtrip():
    stamp = parse_timestamp("2018-06-01T12:34:56Z")
    assert format_timestamp(stamp) == "2018-06-01T12:34:56Z"
    assert parse_timestamp("2018-06-01T13:34:56+01:00") == stamp


def test_csv_roundtrip(tmp_path):
    from streetrank.domain import read_alerts_csv, write_alerts_csv

    alerts = [validate_alert(make_record()),
              validate_alert(make_record(id="a2", gender="", time_seen=""))]
    path = tmp_path / "alerts.csv"
    write_alerts_csv(path, alerts)
    loaded, rejections = read_alerts_csv(path)
    assert loaded == alerts
    assert rejections == []


def test_csv_read_collects_rejections(tmp_path):
    from streetrank.domain import read_alerts_csv, write_alerts_csv

    good = validate_alert(make_record())
    path = tmp_path / "alerts.csv"
    write_alerts_csv(path, [good])
    with open(path, "a", encoding="utf-8") as handle:
        handle.write("a9,,,MobileApp,51.5,-0.12,lsp-01,,,x,y,z\n")
    loaded, rejections = read_alerts_csv(path)
    assert [a.id for a in loaded] == ["a1"]
    assert rejections[0].reason == "missing created_at"
