"""Topology and collector configuration (TOML).

See ``config/example-topology.toml`` for a documented example.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .calibration import DeviceConstants
from .collector import AlarmRule, WatchdogConfig
from .onewire import RomCode
from .sau import ConfigError, PortConfig, SauConfig, SauTimings, SensorConfig
from .sensors import EnvironmentProfile, Schedule, SensorKind
from .storage import DEFAULT_TIERS, TierSpec

CONFIG_ENV = "ENVMON_CONFIG"
DEFAULT_START_MS = 1_700_000_000_000


def _hostport(text: str, default_port: int) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host:
        return text or "127.0.0.1", default_port
    return host, int(port)


@dataclass
class CollectorSettings:
    telemetry: tuple[str, int] = ("127.0.0.1", 4547)
    http: tuple[str, int] = ("127.0.0.1", 8047)
    switch: tuple[str, int] = ("127.0.0.1", 4548)
    data_dir: Path | None = None
    event_log: Path | None = None
    webhook: str | None = None
    flush_interval_s: float = 60.0


@dataclass
class Topology:
    saus: list[SauConfig] = field(default_factory=list)
    watchdog: WatchdogConfig = field(default_factory=WatchdogConfig)
    rules: list[AlarmRule] = field(default_factory=list)
    tiers: tuple[TierSpec, ...] = DEFAULT_TIERS
    switch_ports: int = 24
    seed: int = 0
    start_ms: int = DEFAULT_START_MS
    duration_s: int = 600
    faults: list[str] = field(default_factory=list)
    collector: CollectorSettings = field(default_factory=CollectorSettings)

    @property
    def switch_map(self) -> dict[str, int]:
        return {s.sau_id: s.switch_port for s in self.saus if s.switch_port is not None}


def _schedule(value) -> Schedule:
    try:
        return Schedule.from_pairs(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad schedule {value!r}: {exc}") from None


def _environment(doc: dict) -> EnvironmentProfile:
    env = EnvironmentProfile()
    if "temperature" in doc:
        env.temperature = _schedule(doc["temperature"])
    if "humidity" in doc:
        env.humidity = _schedule(doc["humidity"])
    if "pressure" in doc:
        env.pressure = _schedule(doc["pressure"])
    if "flow_rate" in doc:
        env.flow_rate = _schedule(doc["flow_rate"])
    env.leak_events = [(float(t), bool(w)) for t, w in doc.get("leak_events", [])]
    return env


def _constants(value) -> DeviceConstants | None:
    if value is None:
        return None
    if isinstance(value, str):
        return DeviceConstants.parse(value)
    return DeviceConstants(*(float(v) for v in value))


def _sensors(sau_id: str, docs: list[dict]) -> list[SensorConfig]:
    out = []
    for d in docs:
        try:
            kind = SensorKind(str(d["kind"]).upper().replace("-", ""))
        except (KeyError, ValueError):
            raise ConfigError(f"{sau_id}: sensor kind {d.get('kind')!r} unknown") from None
        count = int(d.get("count", 1))
        ids = d.get("ids") or ([d["id"]] if "id" in d else [])
        for n in range(count if not ids else len(ids)):
            ident = str(ids[n]) if ids else ""
            if kind is SensorKind.DS18B20 and ident:
                rom = RomCode.from_hex(ident)
                if not rom.valid:
                    raise ConfigError(f"{sau_id}: ROM {ident} fails CRC")
            out.append(
                SensorConfig(
                    kind=kind,
                    port=int(d["port"]),
                    id=ident,
                    constants=_constants(d.get("constants")),
                    calibration=_constants(d.get("calibration")),
                    offset_error=d.get("offset_error"),
                    offset_correction=float(d.get("offset_correction", 0.0)),
                    airflow=bool(d.get("airflow", False)),
                    signal=str(d.get("signal", "digital")),
                    i2c_address=d.get("i2c_address"),
                )
            )
    return out


def parse(doc: dict, base: Path | None = None) -> Topology:
    base = base or Path.cwd()
    sim = doc.get("simulation", {})
    wd = WatchdogConfig(**doc.get("watchdog", {}))
    rules = []
    for r in doc.get("alarm", []):
        r = dict(r)
        if "debounce" in r:
            r["debounce_ticks"] = r.pop("debounce")
        if "sau" in r:
            r["sau_id"] = r.pop("sau")
        rules.append(AlarmRule(**r))
    tiers = DEFAULT_TIERS
    if "storage" in doc and "tiers" in doc["storage"]:
        tiers = tuple(TierSpec(int(s), int(c), str(k)) for s, c, k in doc["storage"]["tiers"])
    envs = {name: _environment(e) for name, e in doc.get("environment", {}).items()}
    timings = SauTimings(**doc.get("timings", {}))
    saus = []
    seen = set()
    for s in doc.get("sau", []):
        sau_id = str(s["id"])
        if sau_id in seen:
            raise ConfigError(f"duplicate SAU id {sau_id}")
        seen.add(sau_id)
        ports = {}
        for p in s.get("port", []):
            pc = PortConfig(
                port_no=int(p["port"]),
                pin2=str(p.get("pin2", "digital")),
                onewire_pullup=bool(p.get("onewire_pullup", False)),
                i2c_pullup=bool(p.get("i2c_pullup", False)),
                radius_m=float(p.get("radius_m", 5.0)),
                n_splitters=int(p.get("splitters", 0)),
            )
            ports[pc.port_no] = pc
        env_name = s.get("environment", "default")
        if env_name not in envs and env_name != "default":
            raise ConfigError(f"{sau_id}: unknown environment {env_name!r}")
        saus.append(
            SauConfig(
                sau_id=sau_id,
                sensors=_sensors(sau_id, s.get("sensor", [])),
                ports=ports,
                firmware=str(s.get("firmware", "v1")),
                switch_port=s.get("switch_port"),
                environment=envs.get(env_name, EnvironmentProfile()),
                timings=timings,
                queue_size=int(s.get("queue_size", 4096)),
            )
        )
    c = doc.get("collector", {})
    settings = CollectorSettings(
        telemetry=_hostport(c.get("listen", "127.0.0.1:4547"), 4547),
        http=_hostport(c.get("http", "127.0.0.1:8047"), 8047),
        switch=_hostport(c.get("switch", "127.0.0.1:4548"), 4548),
        data_dir=(base / c["data_dir"]) if c.get("data_dir") else None,
        event_log=(base / c["event_log"]) if c.get("event_log") else None,
        webhook=c.get("webhook") or None,
        flush_interval_s=float(c.get("flush_interval_s", 60.0)),
    )
    return Topology(
        saus=saus,
        watchdog=wd,
        rules=rules,
        tiers=tiers,
        switch_ports=int(doc.get("switch", {}).get("ports", 24)),
        seed=int(sim.get("seed", 0)),
        start_ms=int(sim.get("start_ms", DEFAULT_START_MS)),
        duration_s=int(sim.get("duration_s", 600)),
        faults=[str(f) for f in doc.get("faults", [])],
        collector=settings,
    )


def load(path: str | Path | None = None) -> Topology:
    if path is None:
        path = os.environ.get(CONFIG_ENV)
        if not path:
            raise ConfigError(f"no config file given and {CONFIG_ENV} is not set")
    path = Path(path)
    with open(path, "rb") as fh:
        try:
            doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    try:
        return parse(doc, path.parent)
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
