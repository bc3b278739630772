"""Turning raw SenML-style readings into self-describing enriched records.

A raw reading is a single JSON object {"n": name, "t": unix_seconds,
"v": value}. Enrichment looks the sensor up in the device registry, applies
affine calibration (analog) or passes the value through (digital), and emits

    {"latitude": .., "longitude": .., "time": .., "<quantity>": value,
     "sensor_name": .., "source": [partition, offset]}

keyed by sensor name. Anything undecodable or unknown goes to the dead-letter
topic with a machine-readable reason and the original payload preserved.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass
from typing import Iterable

from .registry import DeviceRegistry, DeviceParams, KIND_ANALOG

REASON_MALFORMED = "malformed-json"
REASON_MISSING_FIELD = "missing-field"
REASON_NON_FINITE = "non-finite-value"
REASON_BAD_TIMESTAMP = "invalid-timestamp"
REASON_UNKNOWN_SENSOR = "unknown-sensor"

_FIXED_KEYS = ("latitude", "longitude", "time", "sensor_name", "source")


class DecodeError(Exception):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}{': ' + detail if detail else ''}")
        self.reason = reason


@dataclass(frozen=True)
class RawReading:
    name: str
    timestamp: int
    value: float


@dataclass(frozen=True)
class EnrichedReading:
    sensor_name: str
    latitude: float
    longitude: float
    time: int
    quantity: str
    value: float
    source: tuple[int, int]


def decode_senml(payload: bytes) -> RawReading:
    try:
        obj = json.loads(payload)
    except (ValueError, UnicodeDecodeError) as e:
        raise DecodeError(REASON_MALFORMED, str(e)) from None
    if not isinstance(obj, dict):
        raise DecodeError(REASON_MALFORMED, "not a JSON object")
    for key in ("n", "t", "v"):
        if key not in obj:
            raise DecodeError(REASON_MISSING_FIELD, key)
    name = obj["n"]
    if not isinstance(name, str) or not name:
        raise DecodeError(REASON_MISSING_FIELD, "n must be a non-empty string")
    ts = obj["t"]
    if isinstance(ts, bool) or not isinstance(ts, (int, float)) or ts != int(ts) or ts <= 0:
        raise DecodeError(REASON_BAD_TIMESTAMP, repr(ts))
    value = obj["v"]
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise DecodeError(REASON_NON_FINITE, repr(value))
    return RawReading(name=name, timestamp=int(ts), value=float(value))


def calibrate(value: float, params: DeviceParams) -> float:
    if params.kind == KIND_ANALOG:
        return value * params.calibration_slope + params.calibration_offset
    return value


def enrich(raw: RawReading, params: DeviceParams, source: tuple[int, int]) -> dict:
    return {
        "latitude": params.latitude,
        "longitude": params.longitude,
        "time": raw.timestamp,
        params.quantity: calibrate(raw.value, params),
        "sensor_name": raw.name,
        "source": [source[0], source[1]],
    }


def encode_enriched(obj: dict) -> bytes:
    return json.dumps(obj, separators=(",", ":")).encode()


def decode_enriched(payload: bytes) -> EnrichedReading:
    obj = json.loads(payload)
    quantity = None
    for key in obj:
        if key not in _FIXED_KEYS:
            quantity = key
            break
    if quantity is None:
        raise DecodeError(REASON_MISSING_FIELD, "quantity")
    return EnrichedReading(
        sensor_name=obj["sensor_name"],
        latitude=obj["latitude"],
        longitude=obj["longitude"],
        time=obj["time"],
        quantity=quantity,
        value=obj[quantity],
        source=(obj["source"][0], obj["source"][1]),
    )


def dead_letter_payload(reason: str, original: bytes, source: tuple[int, int]) -> bytes:
    return json.dumps({
        "reason": reason,
        "original_payload": base64.b64encode(original).decode("ascii"),
        "partition": source[0],
        "offset": source[1],
    }, separators=(",", ":")).encode()


@dataclass
class EnrichmentMetrics:
    enriched: int = 0
    dead_lettered: int = 0


class EnrichmentProcessor:
    """Stateless stage: raw topic in, enriched + dead-letter out.

    Statelessness is what makes replay safe here; duplicates produced by a
    replayed range carry identical source fields and are deduplicated by the
    stateful consumer downstream.
    """

    def __init__(self, registry: DeviceRegistry, output_topic: str = "enriched",
                 dead_letter_topic: str = "dead_letter"):
        self._registry = registry
        self._output_topic = output_topic
        self._dead_letter_topic = dead_letter_topic
        self.metrics = EnrichmentMetrics()

    def process(self, record) -> Iterable[tuple[str, bytes, bytes]]:
        source = (record.partition, record.offset)
        try:
            raw = decode_senml(record.payload)
        except DecodeError as e:
            self.metrics.dead_lettered += 1
            yield (self._dead_letter_topic, record.key,
                   dead_letter_payload(e.reason, record.payload, source))
            return
        params = self._registry.lookup(raw.name)
        if params is None:
            self.metrics.dead_lettered += 1
            yield (self._dead_letter_topic, raw.name.encode(),
                   dead_letter_payload(REASON_UNKNOWN_SENSOR, record.payload, source))
            return
        self.metrics.enriched += 1
        yield (self._output_topic, raw.name.encode(),
               encode_enriched(enrich(raw, params, source)))

    def snapshot(self):
        return None

    def restore(self, state):
        pass
