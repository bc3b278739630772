from __future__ import annotations

import json
import threading
import time

import pytest

from urbanflow.registry import (DeviceParams, DeviceRegistry, DuplicateSensorError,
                                ParameterUpdate, ParamsInvalidError, SnapshotError,
                                StaleVersionError, UpdateSubscriber,
                                VersionGapError)
from urbanflow.streambus import StreamBus


def make_params(name="s1", version=1, **overrides) -> DeviceParams:
    fields = dict(sensor_name=name, kind="analog", quantity="temperature",
                  unit="degC", calibration_slope=2.0, calibration_offset=-1.0,
                  latitude=52.5, longitude=13.4, version=version)
    fields.update(overrides)
    return DeviceParams(**fields)


def test_validation_rejects_bad_fields():
    with pytest.raises(ParamsInvalidError):
        make_params(kind="quantum").validate()
    with pytest.raises(ParamsInvalidError):
        make_params(latitude=91.0).validate()
    with pytest.raises(ParamsInvalidError):
        make_params(longitude=-181.0).validate()
    with pytest.raises(ParamsInvalidError):
        make_params(name="").validate()
    with pytest.raises(ParamsInvalidError):
        make_params(quantity="source").validate()  # reserved wire field
    with pytest.raises(ParamsInvalidError):
        make_params(kind="digital", calibration_slope=2.0).validate()
    make_params(kind="digital", calibration_slope=1.0,
                calibration_offset=0.0).validate()


def test_snapshot_load_and_errors(tmp_path):
    good = tmp_path / "sensors.json"
    good.write_text(json.dumps([make_params("a").to_dict(),
                                make_params("b").to_dict()]))
    registry = DeviceRegistry()
    assert registry.load_snapshot(str(good)) == 2
    assert registry.lookup("a").calibration_slope == 2.0
    assert registry.lookup("missing") is None

    dupes = tmp_path / "dupes.json"
    dupes.write_text(json.dumps([make_params("a").to_dict(),
                                 make_params("a").to_dict()]))
    with pytest.raises(DuplicateSensorError):
        DeviceRegistry().load_snapshot(str(dupes))

    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(SnapshotError):
        DeviceRegistry().load_snapshot(str(broken))

    bad_record = tmp_path / "bad.json"
    bad_record.write_text(json.dumps([{"sensor_name": "x"}]))
    with pytest.raises(SnapshotError) as excinfo:
        DeviceRegistry().load_snapshot(str(bad_record))
    assert "record 0" in str(excinfo.value)


def test_apply_update_versioning():
    registry = DeviceRegistry()
    registry.load_entries([make_params("s1", version=1)])
    update = ParameterUpdate("s1", make_params("s1", version=2,
                                               calibration_slope=3.0), 0)
    registry.apply_update(update)
    assert registry.lookup("s1").calibration_slope == 3.0
    assert registry.current_version("s1") == 2
    with pytest.raises(StaleVersionError):
        registry.apply_update(update)
    with pytest.raises(VersionGapError):
        registry.apply_update(
            ParameterUpdate("s1", make_params("s1", version=9), 0))
    # unknown sensor starts at version 0, so the first update must be 1
    with pytest.raises(VersionGapError):
        registry.apply_update(
            ParameterUpdate("new", make_params("new", version=3), 0))
    registry.apply_update(ParameterUpdate("new", make_params("new", version=1), 0))
    assert registry.current_version("new") == 1


def test_lookup_never_sees_torn_update():
    registry = DeviceRegistry()
    registry.load_entries([make_params("s1", version=1, calibration_slope=1.0,
                                       calibration_offset=10.0)])
    stop = threading.Event()
    torn = []

    def reader():
        while not stop.is_set():
            params = registry.lookup("s1")
            # slope and offset always move together: slope v, offset 10 * v
            if params.calibration_offset != params.calibration_slope * 10.0:
                torn.append(params)

    thread = threading.Thread(target=reader)
    thread.start()
    for version in range(2, 400):
        registry.apply_update(ParameterUpdate(
            "s1", make_params("s1", version=version,
                              calibration_slope=float(version),
                              calibration_offset=float(version) * 10.0), 0))
    stop.set()
    thread.join()
    assert torn == []


def test_subscriber_applies_updates_in_order():
    bus = StreamBus()
    bus.create_topic("parameters", 1)
    registry = DeviceRegistry()
    registry.load_entries([make_params("s1", version=1)])
    subscriber = UpdateSubscriber(registry, bus, poll_interval=0.01).start()
    try:
        for version in (2, 3):
            update = ParameterUpdate("s1", make_params("s1", version=version), 0)
            partition, offset = bus.publish("parameters", b"s1", update.to_payload())
        assert subscriber.wait_for_offset(partition, offset, timeout=5.0)
        assert registry.current_version("s1") == 3

        # duplicate delivery of an old version is dropped, not applied
        bus.publish("parameters", b"s1",
                    ParameterUpdate("s1", make_params("s1", version=2), 0).to_payload())
        partition, offset = bus.publish("parameters", b"junk", b"{not json")
        assert subscriber.wait_for_offset(partition, offset, timeout=5.0)
        assert registry.current_version("s1") == 3
        assert registry.metrics.stale_dropped == 1
        assert registry.metrics.malformed_dropped == 1
    finally:
        subscriber.stop()
