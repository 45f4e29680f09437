"""Line protocol between SAU agents and the collector.

Telemetry (agent -> collector)::

    v1 <sau_id> <seq> <timestamp_ms> <port> <sensor_id> <metric> <value> <unit>

Commands (collector -> agent)::

    cmd reset <sau_id>
    cmd flash <sau_id> <image_id>
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

VERSION = "v1"
MAX_LINE_BYTES = 256

# metric -> unit
METRIC_UNITS: dict[str, str] = {
    "temp_c": "c",
    "humidity_pct": "pct",
    "pressure_hpa": "hpa",
    "flow_pulses": "pulses",
    "leak": "bool",
    "heartbeat": "bool",
}

_TOKEN = re.compile(r"^[!-~]+$")  # printable ASCII, no spaces


class ProtocolError(ValueError):
    pass


class MalformedLine(ProtocolError):
    pass


class BadNumber(ProtocolError):
    pass


class UnknownMetric(ProtocolError):
    pass


def _check_token(name: str, value: str) -> None:
    if not _TOKEN.match(value):
        raise MalformedLine(f"{name} {value!r} must be non-empty printable ASCII without spaces")


def format_value(value: float) -> str:
    """Shortest round-trip decimal; integral values print without a fraction."""
    value = float(value)
    if value.is_integer() and abs(value) < 1e16:
        return str(int(value))
    return repr(value)


@dataclass(frozen=True)
class TelemetryRecord:
    sau_id: str
    seq: int
    timestamp_ms: int
    port: int
    sensor_id: str
    metric: str
    value: float
    unit: str

    def __post_init__(self) -> None:
        for name in ("sau_id", "sensor_id", "unit"):
            _check_token(name, getattr(self, name))
        if self.metric not in METRIC_UNITS:
            raise UnknownMetric(self.metric)
        if not 0 <= self.port <= 11:
            raise MalformedLine(f"port {self.port} outside 0..11")
        if self.seq < 0 or self.timestamp_ms < 0:
            raise BadNumber("seq and timestamp must be non-negative")
        if not math.isfinite(self.value):
            raise BadNumber(f"non-finite value {self.value}")
        if len(self._line()) > MAX_LINE_BYTES:
            raise MalformedLine("encoded record exceeds 256 bytes")

    @property
    def key(self) -> str:
        return f"{self.sau_id}:{self.port}:{self.sensor_id}:{self.metric}"

    @property
    def is_heartbeat(self) -> bool:
        return self.metric == "heartbeat"

    def _line(self) -> bytes:
        return (
            f"{VERSION} {self.sau_id} {self.seq} {self.timestamp_ms} {self.port} "
            f"{self.sensor_id} {self.metric} {format_value(float(self.value))} {self.unit}\n"
        ).encode("utf-8")


def encode(record: TelemetryRecord) -> str:
    return record._line().decode("utf-8")


def _int(text: str, what: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise BadNumber(f"{what} {text!r} is not an integer") from None


def decode(line: str | bytes) -> TelemetryRecord:
    if isinstance(line, bytes):
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError:
            raise MalformedLine("not UTF-8") from None
    if len(line.encode("utf-8")) > MAX_LINE_BYTES:
        raise MalformedLine("line exceeds 256 bytes")
    fields = line.rstrip("\r\n").split(" ")
    if len(fields) != 9 or fields[0] != VERSION:
        raise MalformedLine(f"expected 9 fields starting with {VERSION}")
    _, sau_id, seq, ts, port, sensor_id, metric, value, unit = fields
    if metric not in METRIC_UNITS:
        raise UnknownMetric(metric)
    try:
        v = float(value)
    except ValueError:
        raise BadNumber(f"value {value!r}") from None
    if not math.isfinite(v):
        raise BadNumber(f"non-finite value {value!r}")
    return TelemetryRecord(
        sau_id, _int(seq, "seq"), _int(ts, "timestamp"), _int(port, "port"), sensor_id, metric, v, unit
    )


@dataclass(frozen=True)
class Command:
    action: str  # "reset" | "flash"
    sau_id: str
    image_id: str | None = None

    def __post_init__(self) -> None:
        if self.action not in ("reset", "flash"):
            raise MalformedLine(f"unknown command {self.action!r}")
        _check_token("sau_id", self.sau_id)
        if (self.action == "flash") != (self.image_id is not None):
            raise MalformedLine("flash takes an image id, reset does not")
        if self.image_id is not None:
            _check_token("image_id", self.image_id)


def encode_command(cmd: Command) -> str:
    if cmd.action == "reset":
        return f"cmd reset {cmd.sau_id}\n"
    return f"cmd flash {cmd.sau_id} {cmd.image_id}\n"


def decode_command(line: str | bytes) -> Command:
    if isinstance(line, bytes):
        line = line.decode("utf-8", errors="replace")
    fields = line.rstrip("\r\n").split(" ")
    if len(fields) < 3 or fields[0] != "cmd":
        raise MalformedLine(f"not a command: {line!r}")
    if fields[1] == "reset" and len(fields) == 3:
        return Command("reset", fields[2])
    if fields[1] == "flash" and len(fields) == 4:
        return Command("flash", fields[2], fields[3])
    raise MalformedLine(f"bad command: {line!r}")
