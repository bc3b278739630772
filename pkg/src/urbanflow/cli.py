"""Command line entry points: serve the platform, drive simulations,
run experiments.

The simulator talks to a running gateway over HTTP only, registering its
fleet through the steering endpoint and pushing readings through ingestion,
so it exercises the same surface any external client would.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

log = logging.getLogger(__name__)


def _env(name: str, default: str | None = None) -> str | None:
    value = os.environ.get(name)
    return value if value else default


def cmd_run(args) -> int:
    import uvicorn

    from .gateway import create_app
    from .platform import Platform, PlatformConfig

    config = (PlatformConfig.from_yaml(args.config) if args.config
              else PlatformConfig())
    data_dir = args.data_dir or _env("UF_DATA_DIR")
    if data_dir:
        config.data_dir = data_dir
    listen = args.listen or _env("UF_LISTEN_ADDR", "127.0.0.1:8000")
    host, _, port = listen.rpartition(":")
    token = args.token or _env("UF_API_TOKEN")
    frontend = args.frontend
    if frontend is None:
        candidate = os.path.join(os.getcwd(), "frontend", "dist")
        frontend = candidate if os.path.isdir(candidate) else None

    platform = Platform(config).start()
    try:
        app = create_app(platform, token=token, frontend_dir=frontend)
        uvicorn.run(app, host=host or "127.0.0.1", port=int(port), log_level="info")
    finally:
        platform.stop()
    return 0


class _GatewaySink:
    """Batches simulator output into gateway ingestion calls."""

    def __init__(self, base_url: str, token: str | None, batch_size: int = 500):
        import httpx

        self._client = httpx.Client(
            base_url=base_url, timeout=30.0,
            headers={"Authorization": f"Bearer {token}"} if token else {})
        self._batch: list = []
        self._batch_size = batch_size
        self.published = 0

    def publish(self, topic: str, key: bytes, payload: bytes):
        self._batch.append(json.loads(payload))
        if len(self._batch) >= self._batch_size:
            self.flush()

    def flush(self):
        if not self._batch:
            return
        response = self._client.post("/api/ingest", json={"readings": self._batch})
        response.raise_for_status()
        self.published += response.json()["published"]
        self._batch = []

    def register(self, params_list) -> int:
        registered = 0
        for params in params_list:
            body = params.to_dict()
            del body["version"]
            body["create"] = True
            response = self._client.post("/api/parameters", json=body)
            if response.status_code == 200:
                registered += 1
            else:
                log.warning("registering %s failed: %s %s",
                            params.sensor_name, response.status_code, response.text)
        return registered

    def close(self):
        self._client.close()


def cmd_simulate(args) -> int:
    from .geocell import GridConfig
    from .simulator import (AnomalySpec, FleetSpec, generate_fleet,
                            run_simulation)

    fleet_spec = FleetSpec.from_json_file(args.fleet)
    anomalies = (AnomalySpec.list_from_json_file(args.anomalies)
                 if args.anomalies else [])
    grid = GridConfig(args.origin_latitude, args.origin_longitude)
    fleet = generate_fleet(fleet_spec, grid)
    token = args.token or _env("UF_API_TOKEN")
    sink = _GatewaySink(args.gateway, token)
    try:
        registered = sink.register(fleet.registry_entries())
        print(f"registered {registered}/{len(fleet.sensors)} sensors")
        labels = run_simulation(fleet, anomalies, args.duration, sink,
                                speedup=args.speedup, labels_path=args.labels)
        sink.flush()
        anomalous = sum(1 for l in labels if l.label == "anomalous")
        print(f"published {sink.published} readings "
              f"({anomalous} labelled anomalous)")
        if args.labels:
            print(f"labels written to {args.labels}")
    finally:
        sink.close()
    return 0


def _coerce(text: str, current):
    if isinstance(current, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, tuple):
        element = current[0] if current else 0
        return tuple(_coerce(part, element) for part in text.split(","))
    return text


def cmd_experiment(args) -> int:
    from .experiments import EXPERIMENTS

    config_cls, run_fn = EXPERIMENTS[args.name]
    defaults = config_cls()
    overrides = {}
    for item in args.set or []:
        key, _, value = item.partition("=")
        if not hasattr(defaults, key):
            print(f"unknown option {key!r} for {args.name}", file=sys.stderr)
            return 2
        overrides[key] = _coerce(value, getattr(defaults, key))
    config = config_cls(**overrides) if overrides else defaults
    results = run_fn(config, out_dir=args.out)
    print(json.dumps(results, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="urbanflow",
        description="dependable sensor stream processing on a single machine")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="start the platform and its HTTP gateway")
    p_run.add_argument("--config", help="platform YAML config")
    p_run.add_argument("--data-dir", help="bus/checkpoint directory "
                                          "(default in-memory; env UF_DATA_DIR)")
    p_run.add_argument("--listen", help="host:port (env UF_LISTEN_ADDR)")
    p_run.add_argument("--token", help="bearer token (env UF_API_TOKEN)")
    p_run.add_argument("--frontend", help="directory of built dashboard assets")
    p_run.set_defaults(fn=cmd_run)

    p_sim = sub.add_parser("simulate", help="drive a simulated fleet into a gateway")
    p_sim.add_argument("--fleet", required=True, help="fleet spec JSON")
    p_sim.add_argument("--anomalies", help="anomaly specs JSON")
    p_sim.add_argument("--duration", type=int, default=600,
                       help="simulated seconds (default 600)")
    p_sim.add_argument("--speedup", type=float, default=None,
                       help="simulated seconds per wall second "
                            "(default: as fast as possible)")
    p_sim.add_argument("--gateway", default="http://127.0.0.1:8000")
    p_sim.add_argument("--token", help="bearer token (env UF_API_TOKEN)")
    p_sim.add_argument("--labels", help="write ground-truth labels here (JSON lines)")
    p_sim.add_argument("--origin-latitude", type=float, default=52.52)
    p_sim.add_argument("--origin-longitude", type=float, default=13.405)
    p_sim.set_defaults(fn=cmd_simulate)

    # keep in sync with experiments.EXPERIMENTS; imported lazily in the command
    p_exp = sub.add_parser("experiment", help="run a measurement harness")
    p_exp.add_argument("name", choices=["cep", "reliability", "scalability",
                                        "shift-detection"])
    p_exp.add_argument("--out", default="results", help="output directory")
    p_exp.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field (repeatable)")
    p_exp.set_defaults(fn=cmd_experiment)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s %(message)s")
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
