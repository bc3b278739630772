from __future__ import annotations

import json
import random
from types import SimpleNamespace

import pytest

from urbanflow.cep import (Alert, AnalyticsProcessor, CepConfig, CepEngine,
                           RepartitionProcessor, alert_association,
                           alert_id_for)
from urbanflow.geocell import GridConfig
from urbanflow.registry import DeviceParams, DeviceRegistry
from urbanflow.streambus import Record
from tests.cep_oracle import NaiveCep

CFG = CepConfig(band_delta=0.5, window_seconds=300.0,
                pattern_window_seconds=60.0, min_window_count=3,
                allowed_lateness_seconds=10.0)


def seeded_engine(cfg=CFG, applied_log=None) -> CepEngine:
    """Engine with a stable window of three 10.0 readings in cell "c"."""
    engine = CepEngine(cfg, applied_log=applied_log)
    for i, name in enumerate(("a", "b", "bg")):
        assert engine.process_reading("c", name, 100 + i, 10.0, (0, i)) is None
    return engine


def test_config_validation():
    for bad in (dict(band_delta=0.0), dict(window_seconds=-1.0),
                dict(pattern_window_seconds=0.0), dict(min_window_count=0),
                dict(allowed_lateness_seconds=-0.1)):
        with pytest.raises(ValueError):
            CepConfig(**{"band_delta": 0.5, **bad})


def test_two_violations_within_pattern_window_alert():
    engine = seeded_engine()
    assert engine.process_reading("c", "s", 110, 12.0, (0, 10)) is None
    alert = engine.process_reading("c", "s", 120, 12.0, (0, 11))
    assert isinstance(alert, Alert)
    assert alert.sensor_name == "s"
    assert alert.cell == "c"
    assert [v.event_time for v in alert.violations] == [110, 120]
    assert alert.violations[0].rolling_average == 10.0
    assert alert.violations[1].rolling_average == 10.5
    assert alert.emitted_at == 120
    assert alert.alert_id == alert_id_for("s", (0, 10))
    payload = json.loads(alert.to_payload())
    assert set(payload) == {"alert_id", "cell", "sensor_name", "violations",
                            "emitted_at"}
    assert payload["violations"][0] == {"event_time": 110, "value": 12.0,
                                        "rolling_average": 10.0}


def test_single_violation_is_silent():
    engine = seeded_engine()
    assert engine.process_reading("c", "s", 110, 12.0, (0, 10)) is None
    state = engine.states["c"]
    assert state.violations_total == 1
    assert state.alerts_total == 0


def test_violations_spanning_beyond_pattern_window_do_not_alert():
    engine = seeded_engine()
    assert engine.process_reading("c", "s", 110, 12.0, (0, 10)) is None
    assert engine.process_reading("c", "s", 171, 12.0, (0, 11)) is None
    state = engine.states["c"]
    assert state.violations_total == 2
    assert state.alerts_total == 0


def test_pattern_window_span_boundary_is_inclusive():
    engine = seeded_engine()
    assert engine.process_reading("c", "s", 110, 12.0, (0, 10)) is None
    alert = engine.process_reading("c", "s", 170, 12.0, (0, 11))
    assert alert is not None
    assert [v.event_time for v in alert.violations] == [110, 170]
    assert alert.emitted_at == 170


def test_burst_extensions_share_anchor_id_until_window_slides():
    engine = seeded_engine()
    engine.process_reading("c", "s", 110, 12.0, (0, 10))
    first = engine.process_reading("c", "s", 130, 12.0, (0, 11))
    second = engine.process_reading("c", "s", 150, 12.0, (0, 12))
    assert first.alert_id == second.alert_id == alert_id_for("s", (0, 10))
    assert len(second.violations) == 3
    # anchor at 110 slides out for a violation at 171
    third = engine.process_reading("c", "s", 171, 12.0, (0, 13))
    assert third is not None
    assert third.alert_id == alert_id_for("s", (0, 11))
    assert [v.event_time for v in third.violations] == [130, 150, 171]


def test_check_requires_min_window_count_before_insert():
    engine = CepEngine(CFG)
    engine.process_reading("c", "a", 100, 10.0, (0, 0))
    engine.process_reading("c", "b", 101, 10.0, (0, 1))
    # window holds 2 < 3 at check time, so even a wild value passes
    assert engine.process_reading("c", "s", 102, 50.0, (0, 2)) is None
    assert engine.states["c"].violations_total == 0
    # now 3 in window, the next wild value is a violation
    engine.process_reading("c", "s", 103, 50.0, (0, 3))
    assert engine.states["c"].violations_total == 1


def test_deviation_must_exceed_band_strictly():
    engine = seeded_engine()
    # window [10, 10, 10], |10.5 - 10| == delta exactly: not a violation
    engine.process_reading("c", "s", 110, 10.5, (0, 10))
    assert engine.states["c"].violations_total == 0
    # window now [10, 10, 10, 10.5], average 10.125
    engine.process_reading("c", "s", 111, 10.75, (0, 11))
    assert engine.states["c"].violations_total == 1


def test_lateness_boundary():
    engine = CepEngine(CFG)
    engine.process_reading("c", "s", 200, 10.0, (0, 0))
    engine.process_reading("c", "s", 190, 10.0, (0, 1))  # exactly newest - L
    engine.process_reading("c", "s", 189, 10.0, (0, 2))  # one past
    state = engine.states["c"]
    assert state.late_dropped == 1
    assert state.applied_count == {"s": 2}
    assert state.count == 2


def test_replayed_sources_are_dropped():
    engine = CepEngine(CFG)
    engine.process_reading("c", "s", 100, 10.0, (2, 5))
    engine.process_reading("c", "s", 101, 10.0, (2, 5))
    engine.process_reading("c", "s", 102, 10.0, (2, 4))
    engine.process_reading("c", "s", 103, 10.0, (2, 6))
    state = engine.states["c"]
    assert state.dedup_dropped == 2
    assert state.applied_count == {"s": 2}
    assert state.last_source["s"] == (2, 6)


def test_window_eviction_tracks_newest_event_time():
    cfg = CepConfig(band_delta=0.5, window_seconds=50.0,
                    pattern_window_seconds=60.0, min_window_count=1,
                    allowed_lateness_seconds=1000.0)
    engine = CepEngine(cfg)
    engine.process_reading("c", "s", 100, 4.0, (0, 0))
    engine.process_reading("c", "s", 200, 8.0, (0, 1))
    state = engine.states["c"]
    # the reading at 100 left the window when newest moved to 200
    assert state.count == 1
    assert state.running_sum == 8.0
    assert state.rolling_average() == 8.0
    assert state.newest_event_time == 200


def test_applied_log_packs_partition_and_offset():
    log = []
    engine = seeded_engine(applied_log=log)
    engine.process_reading("c", "s", 110, 10.0, (3, 7))
    engine.process_reading("c", "s", 110, 10.0, (3, 7))   # duplicate
    engine.process_reading("c", "s", 10, 10.0, (3, 8))    # late
    assert log == [(0 << 56) | 0, (0 << 56) | 1, (0 << 56) | 2,
                   (3 << 56) | 7]


def test_cell_view_shape():
    engine = seeded_engine()
    view = engine.states["c"].view()
    assert view["cell"] == "c"
    assert view["sensors"] == 3
    assert view["window_count"] == 3
    assert view["rolling_average"] == 10.0
    assert view["newest_event_time"] == 102
    assert view["violations_total"] == 0


def normalized(snapshot: dict) -> dict:
    cells = {}
    for cell, snap in snapshot["cells"].items():
        snap = dict(snap)
        snap["buffer"] = sorted(snap["buffer"])  # heap order is not canonical
        cells[cell] = snap
    return {"cells": cells}


def random_feed(rng: random.Random, steps: int):
    cells = [f"c{i}" for i in range(3)]
    sensors = [f"s{i}" for i in range(6)]
    home = {s: rng.choice(cells) for s in sensors}
    partition_of = {s: rng.randrange(4) for s in sensors}
    next_offset = dict.fromkeys(range(4), 0)
    clock = dict.fromkeys(sensors, 0)
    sent = []
    feed = []
    for _ in range(steps):
        if sent and rng.random() < 0.1:
            feed.append(rng.choice(sent))  # replay a past delivery
            continue
        s = rng.choice(sensors)
        clock[s] = max(1, clock[s] + rng.randint(-20, 30))
        # dyadic values keep float sums exact, so the incremental engine and
        # the recomputing referee see bit-identical averages
        value = rng.randint(-8000, 8000) / 8.0
        p = partition_of[s]
        source = (p, next_offset[p])
        next_offset[p] += 1
        item = (home[s], s, clock[s], value, source)
        sent.append(item)
        feed.append(item)
    return feed


def test_randomized_soak_matches_reference():
    for seed in range(6):
        rng = random.Random(4200 + seed)
        cfg = CepConfig(band_delta=rng.choice([0.5, 1.0, 2.0]),
                        window_seconds=rng.choice([40.0, 90.0]),
                        pattern_window_seconds=rng.choice([15.0, 30.0]),
                        min_window_count=rng.choice([1, 2, 3, 5]),
                        allowed_lateness_seconds=rng.choice([0.0, 5.0, 10.0]))
        engine = CepEngine(cfg)
        oracle = NaiveCep(cfg)
        for cell, sensor, et, value, source in random_feed(rng, 3000):
            got = engine.process_reading(cell, sensor, et, value, source)
            want = oracle.process(cell, sensor, et, value, source)
            if got is None:
                assert want is None
            else:
                assert json.loads(got.to_payload()) == want


def test_snapshot_restore_is_transparent():
    cfg = CepConfig(band_delta=1.0, window_seconds=60.0,
                    pattern_window_seconds=30.0, min_window_count=2,
                    allowed_lateness_seconds=5.0)
    rng = random.Random(9917)
    feed = random_feed(rng, 2000)
    engine = CepEngine(cfg)
    for item in feed[:1000]:
        engine.process_reading(*item)
    # through JSON like a real checkpoint
    restored = CepEngine(cfg)
    restored.restore(json.loads(json.dumps(engine.snapshot())))
    tail_a, tail_b = [], []
    for item in feed[1000:]:
        a = engine.process_reading(*item)
        b = restored.process_reading(*item)
        tail_a.append(None if a is None else a.to_payload())
        tail_b.append(None if b is None else b.to_payload())
    assert tail_a == tail_b
    assert normalized(engine.snapshot()) == normalized(restored.snapshot())


def without_drop_counters(snapshot: dict) -> dict:
    cells = {}
    for cell, snap in normalized(snapshot)["cells"].items():
        snap = dict(snap)
        del snap["late_dropped"], snap["dedup_dropped"]
        cells[cell] = snap
    return {"cells": cells}


def test_full_replay_leaves_state_and_output_unchanged():
    rng = random.Random(661)
    feed = random_feed(rng, 1500)
    engine = CepEngine(CFG)
    alerts = [a.to_payload() for a in map(
        lambda item: engine.process_reading(*item), feed) if a is not None]
    before = without_drop_counters(engine.snapshot())
    dropped_before = sum(s.dedup_dropped for s in engine.states.values())
    replay_alerts = [engine.process_reading(*item) for item in feed]
    assert all(a is None for a in replay_alerts)
    # only the drop counter moved; windows, histories and counts did not
    assert without_drop_counters(engine.snapshot()) == before
    dropped_after = sum(s.dedup_dropped for s in engine.states.values())
    assert dropped_after - dropped_before == len(feed)

    fresh = CepEngine(CFG)
    again = [a.to_payload() for a in map(
        lambda item: fresh.process_reading(*item), feed) if a is not None]
    assert again == alerts


def test_alert_association_counts():
    labels = [
        SimpleNamespace(sensor_name="s1", event_time=10, label="anomalous"),
        SimpleNamespace(sensor_name="s1", event_time=20, label="anomalous"),
        SimpleNamespace(sensor_name="s2", event_time=10, label="anomalous"),
        SimpleNamespace(sensor_name="s3", event_time=10, label="normal"),
        SimpleNamespace(sensor_name="s4", event_time=11, label="normal"),
    ]
    alerts = [
        {"sensor_name": "s1", "violations": [{"event_time": 10},
                                             {"event_time": 20}]},
        {"sensor_name": "s3", "violations": [{"event_time": 10}]},
    ]
    counts = alert_association(labels, alerts)
    assert counts.anomalous_total == 3
    assert counts.anomalous_with_alert == 2
    assert counts.anomalous_without_alert == 1
    assert counts.normal_total == 2
    assert counts.normal_with_alert == 1
    assert counts.false_positive_rate == 0.5
    assert alert_association([], []).false_positive_rate == 0.0


def enriched_payload(sensor: str, t: int, value: float,
                     source: tuple[int, int]) -> bytes:
    return json.dumps({"latitude": 0.0, "longitude": 0.0, "time": t,
                       "water_level": value, "sensor_name": sensor,
                       "source": list(source)}).encode()


def make_record(topic: str, key: bytes, payload: bytes, partition=0,
                offset=0) -> Record:
    return Record(topic=topic, partition=partition, offset=offset, key=key,
                  payload=payload, append_time_ms=0)


def device(name: str, lat: float, lon: float) -> DeviceParams:
    return DeviceParams(sensor_name=name, kind="analog",
                        quantity="water_level", unit="m",
                        calibration_slope=1.0, calibration_offset=0.0,
                        latitude=lat, longitude=lon, version=1)


def test_repartition_routes_by_cell():
    grid = GridConfig(origin_latitude=52.5, origin_longitude=13.4)
    registry = DeviceRegistry()
    registry.load_entries([device("near", 52.5, 13.4),
                           device("far", 52.6, 13.6)])
    proc = RepartitionProcessor(registry, grid)

    [(topic, key, payload)] = list(proc.process(make_record(
        "enriched", b"near", enriched_payload("near", 100, 1.0, (0, 0)))))
    assert topic == "enriched_by_cell"
    assert key == b"0:0"
    assert json.loads(payload)["sensor_name"] == "near"

    [(_, far_key, _)] = list(proc.process(make_record(
        "enriched", b"far", enriched_payload("far", 100, 1.0, (0, 1)))))
    assert far_key != key

    assert list(proc.process(make_record("enriched", b"ghost", b"{}"))) == []
    assert proc.unroutable == 1
    assert proc.snapshot() is None


def test_analytics_processor_emits_alerts_and_views():
    views = []
    proc = AnalyticsProcessor(CFG, publish_view=lambda cell, view:
                              views.append((cell, view)))
    offset = 0

    def feed(sensor, t, value):
        nonlocal offset
        record = make_record("enriched_by_cell", b"0:0",
                             enriched_payload(sensor, t, value, (0, offset)))
        offset += 1
        return list(proc.process(record))

    for i, name in enumerate(("a", "b", "bg")):
        assert feed(name, 100 + i, 10.0) == []
    assert feed("s", 110, 12.0) == []
    [(topic, key, payload)] = feed("s", 120, 12.0)
    assert topic == "alerts"
    assert key == b"0:0"
    alert = json.loads(payload)
    assert alert["sensor_name"] == "s"
    assert alert["cell"] == "0:0"
    assert len(alert["violations"]) == 2

    proc.tick(5.0)
    assert views == [("0:0", proc.engine.states["0:0"].view())]
    proc.tick(5.5)  # below the 1s cadence, nothing published
    assert len(views) == 1
    feed("s", 121, 10.0)
    proc.tick(6.5)
    assert len(views) == 2

    state = json.loads(json.dumps(proc.snapshot()))
    clone = AnalyticsProcessor(CFG)
    clone.restore(state)
    assert normalized(clone.snapshot()) == normalized(proc.snapshot())
