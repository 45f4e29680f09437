"""Sensor Aggregation Unit emulator.

An SAU has two halves. The MCU reads the sensors on its eleven RJ12 ports
once per second and pushes framed raw readings over a serial link; the
agent decodes the frames, converts raw values to engineering units, and
queues telemetry records plus one heartbeat per tick for the collector.

The halves fail independently. A shorted sensor port browns out the MCU
only, and the MCU restarts one tick after the short clears. A wedged MCU
jams the serial link, which stalls the agent's collection loop (no
heartbeats) while its command listener keeps working, so a soft reset
recovers it. A wedged agent ignores commands and only recovers from
losing power.
"""

from __future__ import annotations

import logging
import struct
import zlib
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import onewire
from .calibration import DeviceConstants, compensate, poly_from_constants
from .onewire import OneWireBus, RomCode, decode_scratchpad, read_scratchpad, search_rom
from .protocol import METRIC_UNITS, Command, TelemetryRecord
from .sensors import (
    CATALOG,
    METRICS,
    EnvironmentProfile,
    SensorInstance,
    SensorKind,
    advance,
    hyt_decode,
    read_raw,
    sample_offset_error,
)

log = logging.getLogger(__name__)

N_PORTS = 11
ANALOG_PORTS = range(1, 7)
FRAME_START = 0x7E
I2C_KINDS = (SensorKind.HYT271, SensorKind.BME280)
DEFAULT_I2C_ADDRESS = {SensorKind.HYT271: 0x28, SensorKind.BME280: 0x76}
# inert: recorded for completeness, never interpreted
FUSES = {"low": 0xDE, "high": 0xDE, "extended": 0xFD}


class ConfigError(ValueError):
    pass


class FlashWhileShorted(RuntimeError):
    pass


# -- serial link --------------------------------------------------------------

def encode_frame(payload: bytes) -> bytes:
    if len(payload) > 255:
        raise ValueError("payload longer than 255 bytes")
    body = bytes([len(payload)]) + payload
    return bytes([FRAME_START]) + body + bytes([onewire.crc8(body)])


def decode_frames(data: bytes) -> tuple[list[bytes], int]:
    """Split a serial burst into payloads; returns ``(payloads, dropped)``.

    A CRC mismatch, a truncated frame, or a run of bytes that does not
    start with 0x7E each count as one drop.
    """
    payloads: list[bytes] = []
    drops = 0
    i = 0
    n = len(data)
    skipping = False
    while i < n:
        if data[i] != FRAME_START:
            if not skipping:
                drops += 1
                skipping = True
            i += 1
            continue
        if i + 1 >= n:
            drops += 1
            break
        length = data[i + 1]
        end = i + 2 + length
        if end >= n:
            drops += 1
            # resync on the next start byte inside the remainder
            i += 1
            skipping = True
            continue
        body = data[i + 1 : end]
        if onewire.crc8(body) == data[end]:
            payloads.append(bytes(body[1:]))
            i = end + 1
            skipping = False
        else:
            drops += 1
            i += 1
            skipping = True
    return payloads, drops


_ENTRY = struct.Struct("<Bd")
ENTRIES_PER_FRAME = 255 // _ENTRY.size


def pack_readings(readings: list[tuple[int, float]]) -> bytes:
    frames = []
    for k in range(0, len(readings), ENTRIES_PER_FRAME):
        chunk = readings[k : k + ENTRIES_PER_FRAME]
        frames.append(encode_frame(b"".join(_ENTRY.pack(i, v) for i, v in chunk)))
    return b"".join(frames)


def unpack_payload(payload: bytes) -> list[tuple[int, float]]:
    if len(payload) % _ENTRY.size:
        return []
    return [_ENTRY.unpack_from(payload, k) for k in range(0, len(payload), _ENTRY.size)]


# -- configuration ------------------------------------------------------------

@dataclass(frozen=True)
class PortConfig:
    port_no: int
    pin2: str = "digital"  # "analog" | "digital"
    onewire_pullup: bool = False
    i2c_pullup: bool = False
    radius_m: float = 5.0
    n_splitters: int = 0

    def __post_init__(self) -> None:
        if not 1 <= self.port_no <= N_PORTS:
            raise ConfigError(f"port {self.port_no} outside 1..{N_PORTS}")
        if self.pin2 not in ("analog", "digital"):
            raise ConfigError(f"pin2 mode {self.pin2!r}")
        if self.pin2 == "analog" and self.port_no not in ANALOG_PORTS:
            raise ConfigError(f"port {self.port_no}: analog I/O only on ports 1-6")


@dataclass(frozen=True)
class SensorConfig:
    kind: SensorKind
    port: int
    id: str = ""
    constants: DeviceConstants | None = None  # what the device really does (BME280)
    calibration: DeviceConstants | None = None  # what the agent compensates with
    offset_error: float | None = None  # true error; sampled from the seed if None
    offset_correction: float = 0.0  # DS18B20 offset applied by the agent
    airflow: bool = False
    signal: str = "digital"  # LEAK / FLOW_METER input type
    i2c_address: int | None = None


@dataclass(frozen=True)
class SauTimings:
    reset_s: float = 2.0
    flash_s: float = 5.0
    boot_s: float = 20.0
    bod_restart_s: float = 1.0


@dataclass
class SauConfig:
    sau_id: str
    sensors: list[SensorConfig] = field(default_factory=list)
    ports: dict[int, PortConfig] = field(default_factory=dict)
    firmware: str = "v1"
    switch_port: int | None = None
    environment: EnvironmentProfile = field(default_factory=EnvironmentProfile)
    timings: SauTimings = field(default_factory=SauTimings)
    queue_size: int = 4096

    def __post_init__(self) -> None:
        for p in range(1, N_PORTS + 1):
            self.ports.setdefault(p, PortConfig(p))
        addresses: dict[int, int] = {}
        for i, s in enumerate(self.sensors):
            if s.port not in self.ports:
                raise ConfigError(f"{self.sau_id}: sensor on unknown port {s.port}")
            if s.kind is SensorKind.BME280 and s.constants is None:
                raise ConfigError(f"{self.sau_id}: BME280 needs device constants")
            if s.kind in (SensorKind.LEAK, SensorKind.FLOW_METER):
                if s.signal not in ("analog", "digital"):
                    raise ConfigError(f"signal {s.signal!r}")
                if s.signal == "analog":
                    if s.port not in ANALOG_PORTS:
                        raise ConfigError(
                            f"{self.sau_id}: analog sensor on port {s.port}; analog I/O only on ports 1-6"
                        )
                    port = self.ports[s.port]
                    if port.pin2 != "analog":
                        self.ports[s.port] = replace(port, pin2="analog")
            if s.kind is SensorKind.DS18B20:
                port = self.ports[s.port]
                if not port.onewire_pullup:
                    self.ports[s.port] = replace(port, onewire_pullup=True)
            if s.kind in I2C_KINDS:
                addr = s.i2c_address if s.i2c_address is not None else DEFAULT_I2C_ADDRESS[s.kind]
                if addr in addresses:
                    raise ConfigError(f"{self.sau_id}: I2C address 0x{addr:02x} used twice on the shared bus")
                addresses[addr] = i


# -- runtime state ------------------------------------------------------------

@dataclass
class SauState:
    sau_id: str
    firmware_version: str
    mcu_uptime_s: float = 0.0
    agent_uptime_s: float = 0.0
    mcu_alive: bool = True
    agent_alive: bool = True
    powered: bool = True
    shorted_ports: set[int] = field(default_factory=set)
    sample_rate_hz: int = 1
    fuse_constants: dict = field(default_factory=lambda: dict(FUSES))


@dataclass(frozen=True)
class Channel:
    port: int
    sensor: int  # index into Sau.sensors
    metric: str
    sensor_id: str


def _stable_seed(*parts) -> list[int]:
    return [zlib.crc32(str(p).encode()) for p in parts]


class Sau:
    def __init__(self, config: SauConfig, seed: int = 0, start_ms: int = 0):
        self.config = config
        self.seed = seed
        self.start_ms = start_ms
        self.state = SauState(config.sau_id, config.firmware)
        self.sensors: list[SensorInstance] = []
        self.sensor_ids: list[str] = []
        self.buses: dict[int, OneWireBus] = {}
        self._rom_index: dict[RomCode, int] = {}
        self._build_sensors()
        self.scan: list[Channel] = []
        self.outbox: deque[TelemetryRecord] = deque()
        self.queue_drops = 0
        self.serial_drops = 0
        self.seq = 0
        self.mcu_wedged = False
        self.agent_wedged = False
        self.corrupt_rate = 0.0
        self._rng = np.random.default_rng(_stable_seed(seed, config.sau_id, "serial"))
        self._mcu_down_until = start_ms
        self._agent_up_at: int | None = None
        self._last_ms: int | None = None
        self.power_on(start_ms)

    @property
    def sau_id(self) -> str:
        return self.config.sau_id

    def _build_sensors(self) -> None:
        env = self.config.environment
        t0 = env.temperature.at(0.0)
        for i, sc in enumerate(self.config.sensors):
            spec = CATALOG[sc.kind]
            err = sc.offset_error
            if err is None:
                err = sample_offset_error(sc.kind, _stable_seed(self.seed, self.sau_id, i)[0])
            if sc.kind is SensorKind.DS18B20:
                rom = RomCode.from_hex(sc.id) if sc.id else RomCode.make(
                    _stable_seed(self.seed, self.sau_id, i)[0] << 8 | i
                )
                ident = str(rom)
            else:
                rom = None
                ident = sc.id or f"{sc.kind.value.lower()}-{sc.port}-{i}"
            inst = SensorInstance(
                spec=spec,
                id=rom.value if rom else i,
                lag_state=t0,
                offset_error=err,
                device_constants=sc.constants,
                airflow=sc.airflow,
                humidity=env.humidity.at(0.0),
                pressure=env.pressure.at(0.0),
            )
            self.sensors.append(inst)
            self.sensor_ids.append(ident)
            if rom is not None:
                port = self.config.ports[sc.port]
                bus = self.buses.setdefault(
                    sc.port,
                    OneWireBus(port.radius_m, port.n_splitters, seed=_stable_seed(self.seed, self.sau_id, sc.port)[0]),
                )
                if rom in bus.devices:
                    raise ConfigError(f"{self.sau_id}: duplicate ROM {rom}")
                bus.attach(rom, inst)
                self._rom_index[rom] = i

    # -- lifecycle ----------------------------------------------------------
    def _build_scan_list(self) -> None:
        scan: list[Channel] = []
        for port_no in sorted(self.buses):
            for rom in search_rom(self.buses[port_no]):
                i = self._rom_index[rom]
                scan.append(Channel(port_no, i, "temp_c", self.sensor_ids[i]))
        for i, sc in enumerate(self.config.sensors):
            if sc.kind is SensorKind.DS18B20:
                continue
            for metric in METRICS[sc.kind]:
                scan.append(Channel(sc.port, i, metric, self.sensor_ids[i]))
        self.scan = scan

    def power_on(self, now_ms: int) -> SauState:
        """Initialisation after power-up: enumerate sensors, zero uptimes."""
        st = self.state
        st.powered = True
        st.agent_alive = True
        st.mcu_alive = not st.shorted_ports
        st.mcu_uptime_s = st.agent_uptime_s = 0.0
        self._agent_up_at = None
        self._mcu_down_until = now_ms
        self.seq = 0
        self._build_scan_list()
        return st

    def set_power(self, on: bool, now_ms: int) -> None:
        st = self.state
        if not on:
            st.powered = False
            st.agent_alive = False
            st.mcu_alive = False
            st.mcu_uptime_s = st.agent_uptime_s = 0.0
            self.mcu_wedged = False
            self.agent_wedged = False
            self.outbox.clear()
            self._agent_up_at = None
        elif not st.powered:
            st.powered = True
            self._agent_up_at = now_ms + int(self.config.timings.boot_s * 1000)

    def power_cycle(self, now_ms: int) -> SauState:
        self.set_power(False, now_ms)
        self.set_power(True, now_ms)
        return self.state

    def soft_reset(self, now_ms: int) -> SauState:
        """Pulse the MCU reset line; the agent is untouched."""
        self.mcu_wedged = False
        self.state.mcu_uptime_s = 0.0
        self._mcu_down_until = max(self._mcu_down_until, now_ms + int(self.config.timings.reset_s * 1000))
        self._build_scan_list()
        return self.state

    def flash_firmware(self, image_id: str, now_ms: int) -> SauState:
        if self.state.shorted_ports:
            raise FlashWhileShorted(f"{self.sau_id}: port(s) {sorted(self.state.shorted_ports)} shorted")
        self.mcu_wedged = False
        self.state.firmware_version = image_id
        self.state.mcu_uptime_s = 0.0
        self._mcu_down_until = max(self._mcu_down_until, now_ms + int(self.config.timings.flash_s * 1000))
        self._build_scan_list()
        return self.state

    def handle_command(self, cmd: Command, now_ms: int) -> bool:
        """Agent command listener; False if the agent could not act on it."""
        st = self.state
        if cmd.sau_id != self.sau_id or not st.powered or not st.agent_alive or self.agent_wedged:
            return False
        if cmd.action == "reset":
            self.soft_reset(now_ms)
        else:
            try:
                self.flash_firmware(cmd.image_id, now_ms)
            except FlashWhileShorted as exc:
                log.warning("%s", exc)
                return False
        return True

    # -- faults -------------------------------------------------------------
    def short_port(self, port_no: int, shorted: bool = True) -> None:
        if shorted:
            self.state.shorted_ports.add(port_no)
        else:
            self.state.shorted_ports.discard(port_no)

    # -- main loop ----------------------------------------------------------
    def _advance_physics(self, now_ms: int) -> None:
        last = self._last_ms if self._last_ms is not None else now_ms - 1000
        self._last_ms = now_ms
        dt = (now_ms - last) / 1000.0
        if dt <= 0:
            return
        t = (now_ms - self.start_ms) / 1000.0
        env = self.config.environment
        for s in self.sensors:
            advance(s, env, t, dt)

    def _mcu_collect(self) -> bytes:
        readings: list[tuple[int, float]] = []
        for idx, ch in enumerate(self.scan):
            sensor = self.sensors[ch.sensor]
            kind = sensor.kind
            if kind is SensorKind.DS18B20:
                rom = RomCode(sensor.id)
                try:
                    frame = read_scratchpad(self.buses[ch.port], rom)
                    raw = decode_scratchpad(frame) * 16
                except (onewire.NoSuchDevice, onewire.BusFault):
                    continue
            elif kind is SensorKind.HYT271:
                t_code, rh_code = read_raw(sensor)
                raw = t_code if ch.metric == "temp_c" else rh_code
            elif kind is SensorKind.BME280:
                if ch.metric == "temp_c":
                    raw = read_raw(sensor)
                elif ch.metric == "humidity_pct":
                    raw = sensor.humidity
                else:
                    raw = sensor.pressure
            else:
                raw = read_raw(sensor)
            readings.append((idx, float(raw)))
        return pack_readings(readings)

    def _corrupt(self, burst: bytes) -> bytes:
        if self.corrupt_rate <= 0 or not burst:
            return burst
        data = bytearray(burst)
        # one Bernoulli draw per frame-sized chunk
        for start in range(0, len(data), 256):
            if self._rng.random() < self.corrupt_rate:
                pos = start + int(self._rng.integers(0, min(256, len(data) - start)))
                data[pos] ^= 1 << int(self._rng.integers(0, 8))
        return bytes(data)

    def _convert(self, ch: Channel, raw: float) -> float:
        sc = self.config.sensors[ch.sensor]
        kind = sc.kind
        if kind is SensorKind.DS18B20:
            return raw / 16.0 + sc.offset_correction
        if kind is SensorKind.HYT271:
            if ch.metric == "temp_c":
                return hyt_decode(int(raw), 0)[0]
            return hyt_decode(0, int(raw))[1]
        if kind is SensorKind.BME280 and ch.metric == "temp_c":
            consts = sc.calibration or sc.constants
            return float(compensate(poly_from_constants(consts), raw))
        return raw

    def _record(self, now_ms: int, port: int, sensor_id: str, metric: str, value: float) -> TelemetryRecord:
        rec = TelemetryRecord(self.sau_id, self.seq, now_ms, port, sensor_id, metric, value, METRIC_UNITS[metric])
        self.seq += 1
        return rec

    def tick(self, now_ms: int) -> list[TelemetryRecord]:
        """One 1 Hz loop iteration at simulated time ``now_ms``."""
        self._advance_physics(now_ms)
        st = self.state
        if not st.powered:
            return []
        if self._agent_up_at is not None:
            if now_ms < self._agent_up_at:
                return []
            self.power_on(now_ms)
        st.agent_uptime_s += 1.0
        if self.agent_wedged:
            return []

        burst = b""
        if st.shorted_ports:
            # brown-out holds the MCU in reset; release costs one more tick
            st.mcu_alive = False
            self.mcu_wedged = False
            st.mcu_uptime_s = 0.0
            self._mcu_down_until = max(
                self._mcu_down_until, now_ms + int((1.0 + self.config.timings.bod_restart_s) * 1000)
            )
        elif self.mcu_wedged:
            return []  # serial link jammed; the agent loop blocks
        elif now_ms >= self._mcu_down_until:
            st.mcu_alive = True
            st.mcu_uptime_s += 1.0
            burst = self._mcu_collect()
        else:
            st.mcu_alive = False

        records: list[TelemetryRecord] = []
        if burst:
            payloads, drops = decode_frames(self._corrupt(burst))
            self.serial_drops += drops
            for payload in payloads:
                for idx, raw in unpack_payload(payload):
                    if idx >= len(self.scan):
                        continue
                    ch = self.scan[idx]
                    value = self._convert(ch, raw)
                    records.append(self._record(now_ms, ch.port, ch.sensor_id, ch.metric, value))
        records.append(self._record(now_ms, 0, st.firmware_version, "heartbeat", 1.0))
        self._enqueue(records)
        return records

    def _enqueue(self, records: list[TelemetryRecord]) -> None:
        limit = self.config.queue_size
        for r in records:
            if len(self.outbox) >= limit:
                self.outbox.popleft()
                self.queue_drops += 1
            self.outbox.append(r)

    def drain(self, max_n: int | None = None) -> list[TelemetryRecord]:
        n = len(self.outbox) if max_n is None else min(max_n, len(self.outbox))
        return [self.outbox.popleft() for _ in range(n)]
