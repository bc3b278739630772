"""HTTP facade over a running platform.

Read views (cells, history, metrics), a server-sent-event stream of alerts,
ingestion for thin clients, and the steering endpoint for versioned
parameter updates. When UF_API_TOKEN is set every endpoint requires it as a
bearer header; the event stream also accepts ?token= because EventSource
cannot set headers.
"""

from __future__ import annotations

import contextlib
import json
import logging
import os
import threading

from fastapi import Depends, FastAPI, Header, HTTPException, Query, Request
from fastapi.responses import JSONResponse, StreamingResponse
from fastapi.staticfiles import StaticFiles

from ..platform import Platform, SteeringConflictError, UnknownSensorError
from ..registry import RegistryError
from . import schemas

log = logging.getLogger(__name__)

_KEEPALIVE_SECONDS = 10.0


def create_app(platform: Platform, token: str | None = None,
               frontend_dir: str | None = None) -> FastAPI:
    stopping = threading.Event()

    @contextlib.asynccontextmanager
    async def lifespan(_app):
        yield
        stopping.set()  # lets open event streams finish with an end event

    app = FastAPI(title="urbanflow gateway", lifespan=lifespan)

    def require_token(authorization: str | None = Header(default=None)):
        if token and authorization != f"Bearer {token}":
            raise HTTPException(status_code=401, detail="missing or invalid token")

    auth = [Depends(require_token)]

    @app.get("/api/cells", response_model=list[schemas.CellView],
             dependencies=auth)
    def get_cells():
        return platform.cells()

    @app.get("/api/sensors", response_model=list[schemas.SensorOut],
             dependencies=auth)
    def get_sensors():
        sensors = sorted(platform.registry.sensors(), key=lambda s: s.sensor_name)
        return [s.to_dict() for s in sensors]

    @app.get("/api/history", response_model=schemas.HistoryOut, dependencies=auth)
    def get_history(token_param: str | None = Query(default=None, alias="token"),
                    limit: int = Query(default=100, ge=1, le=1000)):
        try:
            return platform.alert_history(token_param, limit)
        except ValueError as e:
            raise HTTPException(status_code=400, detail=str(e))

    @app.get("/api/metrics", dependencies=auth)
    def get_metrics():
        return platform.metrics()

    @app.post("/api/parameters", response_model=schemas.ParameterUpdateOut,
              dependencies=auth)
    def post_parameters(update: schemas.ParameterUpdateIn):
        fields = (update.model_dump() if hasattr(update, "model_dump")
                  else update.dict())
        expected = fields.pop("expected_version", None)
        create = fields.pop("create", False)
        try:
            return platform.apply_parameter_update(fields, expected_version=expected,
                                                   create=create)
        except UnknownSensorError as e:
            raise HTTPException(status_code=404,
                                detail=f"unknown sensor {e}; set create to add it")
        except SteeringConflictError as e:
            return JSONResponse(status_code=409, content={
                "detail": str(e), "current_version": e.current_version})
        except RegistryError as e:
            raise HTTPException(status_code=422, detail=str(e))

    @app.post("/api/ingest", response_model=schemas.IngestOut, dependencies=auth)
    def post_ingest(body: schemas.IngestIn):
        payloads = [json.dumps(r, separators=(",", ":")).encode()
                    for r in body.readings]
        return {"published": platform.ingest(payloads)}

    @app.get("/api/alerts/stream")
    def alert_stream(request: Request,
                     authorization: str | None = Header(default=None),
                     token_param: str | None = Query(default=None, alias="token")):
        if token and authorization != f"Bearer {token}" and token_param != token:
            raise HTTPException(status_code=401, detail="missing or invalid token")

        def events():
            feed = platform.alert_feed
            seq = feed.latest_seq
            yield "retry: 2000\n\n"
            idle = 0.0
            while True:
                if stopping.is_set():
                    yield "event: end\ndata: {}\n\n"
                    return
                entries = feed.wait_since(seq, timeout=0.5)
                if entries:
                    idle = 0.0
                    for seq, alert in entries:
                        payload = json.dumps(alert, separators=(",", ":"))
                        yield f"id: {seq}\nevent: alert\ndata: {payload}\n\n"
                else:
                    idle += 0.5
                    if idle >= _KEEPALIVE_SECONDS:
                        idle = 0.0
                        yield ": keepalive\n\n"

        return StreamingResponse(events(), media_type="text/event-stream",
                                 headers={"Cache-Control": "no-cache",
                                          "X-Accel-Buffering": "no"})

    if frontend_dir and os.path.isdir(frontend_dir):
        app.mount("/", StaticFiles(directory=frontend_dir, html=True), name="ui")

    return app
