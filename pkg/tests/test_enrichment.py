from __future__ import annotations

import base64
import json
import random

import pytest

from urbanflow.enrichment import (DecodeError, EnrichmentProcessor,
                                  REASON_BAD_TIMESTAMP, REASON_MALFORMED,
                                  REASON_MISSING_FIELD, REASON_NON_FINITE,
                                  REASON_UNKNOWN_SENSOR, calibrate,
                                  decode_enriched, decode_senml,
                                  encode_enriched, enrich)
from urbanflow.registry import DeviceParams, DeviceRegistry
from urbanflow.streambus import Record

GOLDEN = DeviceParams(
    sensor_name="70B3D5499073C7C0-temp", kind="analog", quantity="temperature",
    unit="degC", calibration_slope=10.0, calibration_offset=-19.0,
    latitude=52.51017262863814, longitude=13.322876673244508, version=1)


def make_record(payload: bytes, partition=3, offset=41, key=b"") -> Record:
    return Record(topic="raw", partition=partition, offset=offset, key=key,
                  payload=payload, append_time_ms=0)


def test_battery_voltage_becomes_calibrated_temperature():
    raw = decode_senml(b'{"n":"70B3D5499073C7C0-temp","t":1625222417,"v":4.2}')
    out = enrich(raw, GOLDEN, source=(3, 41))
    assert out["latitude"] == 52.51017262863814
    assert out["longitude"] == 13.322876673244508
    assert out["time"] == 1625222417
    assert abs(out["temperature"] - 23.0) < 1e-9
    assert out["sensor_name"] == "70B3D5499073C7C0-temp"
    assert out["source"] == [3, 41]
    assert set(out) == {"latitude", "longitude", "time", "temperature",
                        "sensor_name", "source"}


def test_digital_values_pass_through_uncalibrated():
    params = DeviceParams(sensor_name="door-7", kind="digital",
                          quantity="door_open", unit="bool",
                          calibration_slope=1.0, calibration_offset=0.0,
                          latitude=52.5, longitude=13.4, version=1)
    assert calibrate(1.0, params) == 1.0
    assert calibrate(0.0, params) == 0.0


def test_calibration_is_affine():
    rng = random.Random(2209)
    for _ in range(200):
        slope = rng.uniform(-5, 5) or 1.0
        offset = rng.uniform(-50, 50)
        params = DeviceParams(sensor_name="s", kind="analog", quantity="q",
                              unit="u", calibration_slope=slope,
                              calibration_offset=offset, latitude=0.0,
                              longitude=0.0, version=1)
        a, b = rng.uniform(-100, 100), rng.uniform(-100, 100)
        # affine map: f(a) - f(b) == slope * (a - b), f(0) == offset
        assert abs((calibrate(a, params) - calibrate(b, params))
                   - slope * (a - b)) < 1e-6
        assert abs(calibrate(0.0, params) - offset) < 1e-12


def test_decode_rejections_carry_reasons():
    cases = [
        (b"{not json", REASON_MALFORMED),
        (b"[1,2]", REASON_MALFORMED),
        (b'{"t":1,"v":2}', REASON_MISSING_FIELD),
        (b'{"n":"","t":1,"v":2}', REASON_MISSING_FIELD),
        (b'{"n":"s","v":2}', REASON_MISSING_FIELD),
        (b'{"n":"s","t":1}', REASON_MISSING_FIELD),
        (b'{"n":"s","t":0,"v":2}', REASON_BAD_TIMESTAMP),
        (b'{"n":"s","t":-5,"v":2}', REASON_BAD_TIMESTAMP),
        (b'{"n":"s","t":1.5,"v":2}', REASON_BAD_TIMESTAMP),
        (b'{"n":"s","t":true,"v":2}', REASON_BAD_TIMESTAMP),
        (b'{"n":"s","t":1,"v":"x"}', REASON_NON_FINITE),
        (b'{"n":"s","t":1,"v":NaN}', REASON_NON_FINITE),
        (b'{"n":"s","t":1,"v":Infinity}', REASON_NON_FINITE),
        (b'{"n":"s","t":1,"v":true}', REASON_NON_FINITE),
    ]
    for payload, want_reason in cases:
        with pytest.raises(DecodeError) as excinfo:
            decode_senml(payload)
        assert excinfo.value.reason == want_reason, payload


def test_integral_float_timestamp_accepted():
    raw = decode_senml(b'{"n":"s","t":1625222417.0,"v":1}')
    assert raw.timestamp == 1625222417
    assert isinstance(raw.timestamp, int)


def test_enriched_roundtrip_recovers_quantity():
    raw = decode_senml(b'{"n":"70B3D5499073C7C0-temp","t":1625222417,"v":4.2}')
    payload = encode_enriched(enrich(raw, GOLDEN, source=(3, 41)))
    reading = decode_enriched(payload)
    assert reading.quantity == "temperature"
    assert abs(reading.value - 23.0) < 1e-9
    assert reading.sensor_name == "70B3D5499073C7C0-temp"
    assert reading.source == (3, 41)
    assert reading.time == 1625222417


def test_processor_routes_good_bad_and_unknown():
    registry = DeviceRegistry()
    registry.load_entries([GOLDEN])
    proc = EnrichmentProcessor(registry)

    good = list(proc.process(make_record(
        b'{"n":"70B3D5499073C7C0-temp","t":1625222417,"v":4.2}')))
    assert len(good) == 1
    topic, key, payload = good[0]
    assert topic == "enriched"
    assert key == b"70B3D5499073C7C0-temp"
    assert abs(json.loads(payload)["temperature"] - 23.0) < 1e-9

    original = b'{"n":"nobody","t":5,"v":1}'
    dead = list(proc.process(make_record(original, partition=2, offset=9)))
    [(topic, key, payload)] = dead
    assert topic == "dead_letter"
    letter = json.loads(payload)
    assert letter["reason"] == REASON_UNKNOWN_SENSOR
    assert base64.b64decode(letter["original_payload"]) == original
    assert letter["partition"] == 2
    assert letter["offset"] == 9

    garbled = b"\xff\xfe not senml"
    [(topic, _, payload)] = list(proc.process(make_record(garbled)))
    assert topic == "dead_letter"
    letter = json.loads(payload)
    assert letter["reason"] == REASON_MALFORMED
    assert base64.b64decode(letter["original_payload"]) == garbled

    assert proc.metrics.enriched == 1
    assert proc.metrics.dead_lettered == 2


def test_processor_is_stateless_and_replayable():
    registry = DeviceRegistry()
    registry.load_entries([GOLDEN])
    proc = EnrichmentProcessor(registry)
    record = make_record(
        b'{"n":"70B3D5499073C7C0-temp","t":1625222417,"v":4.2}',
        partition=1, offset=77)
    first = list(proc.process(record))
    second = list(proc.process(record))
    assert first == second
    assert proc.snapshot() is None
