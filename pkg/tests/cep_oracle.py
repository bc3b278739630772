"""List-based reference implementation of the per-cell CEP semantics.

No heaps, no running sums, no incremental eviction: every check recomputes
the window and the average from the full reading history. Slow but plainly
readable against the documented behaviour, which makes it a fair referee for
the optimized engine in randomized soaks.
"""

from __future__ import annotations

from urbanflow.cep import CepConfig, alert_id_for


class NaiveCell:
    def __init__(self):
        self.readings: list[tuple[int, float]] = []  # inserted (et, value)
        self.newest = 0
        self.newest_per_sensor: dict[str, int] = {}
        self.history: dict[str, list[dict]] = {}
        self.last_source: dict[str, tuple[int, int]] = {}


class NaiveCep:
    def __init__(self, cfg: CepConfig):
        self.cfg = cfg
        self.cells: dict[str, NaiveCell] = {}

    def process(self, cell_key: str, sensor: str, event_time: int, value: float,
                source: tuple[int, int]) -> dict | None:
        cfg = self.cfg
        cell = self.cells.setdefault(cell_key, NaiveCell())
        last = cell.last_source.get(sensor)
        if last is not None and source[0] == last[0] and source[1] <= last[1]:
            return None
        cell.last_source[sensor] = source
        newest_own = cell.newest_per_sensor.get(sensor)
        if (newest_own is not None
                and event_time < newest_own - cfg.allowed_lateness_seconds):
            return None
        cell.newest_per_sensor[sensor] = max(newest_own or 0, event_time)
        window = [v for t, v in cell.readings if t >= cell.newest - cfg.window_seconds]
        violation = None
        if len(window) >= cfg.min_window_count:
            average = sum(window) / len(window)
            if abs(value - average) > cfg.band_delta:
                violation = {"event_time": event_time, "value": value,
                             "rolling_average": average, "source": source}
        cell.readings.append((event_time, value))
        cell.newest = max(cell.newest, event_time)
        cell.readings = [(t, v) for t, v in cell.readings
                         if t >= cell.newest - cfg.window_seconds]
        if violation is None:
            return None
        history = cell.history.setdefault(sensor, [])
        history.append(violation)
        history.sort(key=lambda v: v["event_time"])
        cutoff = history[-1]["event_time"] - cfg.pattern_window_seconds
        history[:] = [v for v in history if v["event_time"] >= cutoff]
        if violation["event_time"] < cutoff or len(history) < 2:
            return None
        return {
            "alert_id": alert_id_for(sensor, history[0]["source"]),
            "cell": cell_key,
            "sensor_name": sensor,
            "violations": [{"event_time": v["event_time"], "value": v["value"],
                            "rolling_average": v["rolling_average"]}
                           for v in history],
            "emitted_at": history[-1]["event_time"],
        }
