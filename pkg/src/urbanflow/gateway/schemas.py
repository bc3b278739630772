from __future__ import annotations

from typing import Any

from pydantic import BaseModel


class CellView(BaseModel):
    cell: str
    q: int
    r: int
    center_latitude: float
    center_longitude: float
    hex_circumradius_m: float
    sensors: int
    window_count: int
    rolling_average: float | None = None
    newest_event_time: int
    violations_total: int
    alerts_total: int
    late_dropped: int
    dedup_dropped: int
    updated_at: float


class ViolationOut(BaseModel):
    event_time: int
    value: float
    rolling_average: float


class AlertOut(BaseModel):
    alert_id: str
    cell: str
    sensor_name: str
    violations: list[ViolationOut]
    emitted_at: int


class HistoryOut(BaseModel):
    alerts: list[AlertOut]
    next_token: str | None = None


class SensorOut(BaseModel):
    sensor_name: str
    kind: str
    quantity: str
    unit: str
    calibration_slope: float
    calibration_offset: float
    latitude: float
    longitude: float
    version: int


class ParameterUpdateIn(BaseModel):
    sensor_name: str
    kind: str
    quantity: str
    unit: str = ""
    calibration_slope: float
    calibration_offset: float
    latitude: float
    longitude: float
    expected_version: int | None = None
    create: bool = False


class ParameterUpdateOut(BaseModel):
    version: int
    partition: int
    offset: int
    committed: bool


class IngestIn(BaseModel):
    readings: list[Any]


class IngestOut(BaseModel):
    published: int
