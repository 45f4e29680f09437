"""HTTP API of the collector service (FastAPI).

``create_app`` wraps an existing :class:`Collector`; with ``settings`` it
also owns the telemetry listener, the watchdog loop and periodic storage
flushes for the lifetime of the app.
"""

from __future__ import annotations

import asyncio
import contextlib
import io
import logging
import threading

import httpx
from fastapi import FastAPI, HTTPException, Query
from fastapi.responses import PlainTextResponse
from pydantic import BaseModel, Field

from . import calibration as cal
from .collector import Collector, Event, status_to_text
from .config import CollectorSettings
from .netio import TelemetryServer, watchdog_loop
from .onewire import BusTopology, bus_health

log = logging.getLogger(__name__)


class SauHealthModel(BaseModel):
    sau_id: str
    state: str
    last_seen_ms: int
    escalation_count: int
    firmware: str


class MetricValue(BaseModel):
    timestamp_ms: int
    value: float


class AlarmModel(BaseModel):
    key: str
    rule: str


class StatusResponse(BaseModel):
    saus: list[SauHealthModel]
    metrics: dict[str, MetricValue]
    alarms: list[AlarmModel]
    counters: dict[str, int]


class Point(BaseModel):
    timestamp_ms: int
    value: float


class QueryResponse(BaseModel):
    key: str
    points: list[Point]


class EventModel(BaseModel):
    timestamp_ms: int
    sau_id: str
    kind: str
    detail: str


class FitRequest(BaseModel):
    csv: str = Field(description="chamber sweep, header t_elapsed_s,t_ref_c,t_raw")
    force: bool = False


class ConstantsResponse(BaseModel):
    d1: float
    d2: float
    d3: float
    max_residual_k: float | None = None


class DeviationRequest(BaseModel):
    factory: tuple[float, float, float]
    new: tuple[float, float, float]
    t_lo: float = -40.0
    t_hi: float = 60.0


class DeviationResponse(BaseModel):
    dev_at_lo: float
    dev_at_hi: float


class BusHealthResponse(BaseModel):
    recovery_time_us: float
    discovery_reliable: bool


def webhook_notifier(url: str):
    """Fire-and-forget POST of each alarm event."""

    def notify(ev: Event) -> None:
        def post() -> None:
            try:
                httpx.post(url, json=ev.__dict__, timeout=5.0)
            except httpx.HTTPError as exc:
                log.warning("webhook %s failed: %s", url, exc)

        threading.Thread(target=post, daemon=True).start()

    return notify


def create_app(collector: Collector, settings: CollectorSettings | None = None) -> FastAPI:
    @contextlib.asynccontextmanager
    async def lifespan(app: FastAPI):
        tasks = []
        server = None
        if settings is not None:
            server = TelemetryServer(collector)
            collector.command_sink = server.send_command
            port = await server.start(*settings.telemetry)
            log.info("telemetry listening on %s:%d", settings.telemetry[0], port)
            tasks.append(asyncio.create_task(watchdog_loop(collector)))
            if collector.store.directory is not None:
                tasks.append(asyncio.create_task(_flush_loop(collector, settings.flush_interval_s)))
        app.state.telemetry = server
        try:
            yield
        finally:
            for t in tasks:
                t.cancel()
            if server is not None:
                await server.stop()
            collector.store.flush()
            collector.close()

    app = FastAPI(title="envmon collector", lifespan=lifespan)

    @app.get("/status", response_model=StatusResponse)
    def status():
        return collector.status()

    @app.get("/status.txt", response_class=PlainTextResponse)
    def status_text():
        return status_to_text(collector.status())

    @app.get("/keys", response_model=list[str])
    def keys():
        return collector.store.keys()

    @app.get("/query/{key}", response_model=QueryResponse)
    def query(
        key: str,
        t_from: int = Query(0, alias="from"),
        t_to: int = Query(2**62, alias="to"),
        max_points: int = Query(1000, ge=1),
    ):
        if key not in collector.store.archives:
            raise HTTPException(404, f"no archive for {key}")
        pts = collector.store.query(key, t_from, t_to, max_points)
        return {"key": key, "points": [{"timestamp_ms": t, "value": v} for t, v in pts]}

    @app.get("/events", response_model=list[EventModel])
    def events(since_ms: int = 0, sau_id: str | None = None):
        return [
            e.__dict__ for e in collector.events
            if e.timestamp_ms >= since_ms and (sau_id is None or e.sau_id == sau_id)
        ]

    @app.post("/calib/bme280/fit", response_model=ConstantsResponse)
    def fit(req: FitRequest):
        try:
            sweep = cal.ChamberSweep.read_csv(io.StringIO(req.csv), force=req.force)
            poly = cal.fit_poly(sweep)
            d = cal.constants_from_poly(poly)
        except ValueError as exc:
            raise HTTPException(422, str(exc)) from None
        return {"d1": d.d1, "d2": d.d2, "d3": d.d3, "max_residual_k": cal.max_residual(poly, sweep)}

    @app.post("/calib/bme280/deviation", response_model=DeviationResponse)
    def deviation(req: DeviationRequest):
        try:
            lo, hi = cal.deviation_range(
                cal.DeviceConstants(*req.factory), cal.DeviceConstants(*req.new), req.t_lo, req.t_hi
            )
        except ValueError as exc:
            raise HTTPException(422, str(exc)) from None
        return {"dev_at_lo": lo, "dev_at_hi": hi}

    @app.get("/bus/health", response_model=BusHealthResponse)
    def health(radius: float = Query(..., gt=0), sensors: int = Query(..., ge=0), splitters: int = Query(0, ge=0)):
        h = bus_health(BusTopology(radius, sensors, splitters))
        return {"recovery_time_us": h.recovery_time_us, "discovery_reliable": h.discovery_reliable}

    return app


async def _flush_loop(collector: Collector, interval_s: float) -> None:
    while True:
        await asyncio.sleep(interval_s)
        await asyncio.to_thread(collector.store.flush)
