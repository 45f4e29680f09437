"""OneWire bus model: Dallas CRC-8, ROM search, scratchpad reads, load diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .sensors import SensorInstance, quantize_ds18b20

DS18B20_FAMILY = 0x28
RELIABLE_RECOVERY_US = 50.0


def _make_table() -> list[int]:
    table = []
    for byte in range(256):
        crc = byte
        for _ in range(8):
            crc = (crc >> 1) ^ 0x8C if crc & 1 else crc >> 1
        table.append(crc)
    return table


_CRC_TABLE = _make_table()


def crc8(data: Iterable[int]) -> int:
    """Dallas/Maxim CRC-8 (poly x^8+x^5+x^4+1, reflected, init 0)."""
    crc = 0
    for b in data:
        crc = _CRC_TABLE[crc ^ (b & 0xFF)]
    return crc


class NoSuchDevice(LookupError):
    pass


class BusFault(RuntimeError):
    pass


@dataclass(frozen=True, order=True)
class RomCode:
    """64-bit ROM: family byte, 48-bit serial, CRC byte (wire order LSB first)."""

    value: int

    @classmethod
    def make(cls, serial: int, family: int = DS18B20_FAMILY) -> RomCode:
        if not 0 <= serial < 1 << 48:
            raise ValueError("serial must fit in 48 bits")
        body = family | (serial << 8)
        crc = crc8(body.to_bytes(7, "little"))
        return cls(body | (crc << 56))

    @classmethod
    def from_bytes(cls, data: bytes) -> RomCode:
        if len(data) != 8:
            raise ValueError("ROM code is 8 bytes")
        return cls(int.from_bytes(data, "little"))

    @classmethod
    def from_hex(cls, text: str) -> RomCode:
        return cls(int(text, 16))

    @property
    def family(self) -> int:
        return self.value & 0xFF

    @property
    def serial(self) -> int:
        return (self.value >> 8) & ((1 << 48) - 1)

    @property
    def crc(self) -> int:
        return self.value >> 56

    def to_bytes(self) -> bytes:
        return self.value.to_bytes(8, "little")

    @property
    def valid(self) -> bool:
        return crc8(self.to_bytes()) == 0

    def __str__(self) -> str:
        return f"{self.value:016x}"


@dataclass(frozen=True)
class BusTopology:
    radius_m: float
    n_sensors: int
    n_splitters: int = 0

    def __post_init__(self) -> None:
        if self.radius_m <= 0:
            raise ValueError("radius_m must be positive")
        if self.n_sensors < 0 or self.n_splitters < 0:
            raise ValueError("counts must be non-negative")


@dataclass(frozen=True)
class LoadModel:
    r0_us: float = 120.0
    per_metre_us: float = 1.2
    per_sensor_us: float = 1.0
    per_splitter_us: float = 2.0


@dataclass(frozen=True)
class BusHealth:
    recovery_time_us: float
    discovery_reliable: bool

    @property
    def p_miss(self) -> float:
        if self.discovery_reliable:
            return 0.0
        return min(1.0, max(0.0, (RELIABLE_RECOVERY_US - self.recovery_time_us) / RELIABLE_RECOVERY_US))


def bus_health(topology: BusTopology, model: LoadModel = LoadModel()) -> BusHealth:
    rec = (
        model.r0_us
        - model.per_metre_us * topology.radius_m
        - model.per_sensor_us * topology.n_sensors
        - model.per_splitter_us * topology.n_splitters
    )
    return BusHealth(rec, rec > RELIABLE_RECOVERY_US)


def _search(responding: list[int]) -> list[int]:
    """Binary-tree ROM search over the responding devices (Maxim AN187).

    Each pass walks the 64 ROM bits LSB first. Every participating device
    drives its bit then the complement onto the wired-AND line; ``(0, 1)``
    or ``(1, 0)`` means all agree, ``(0, 0)`` is a discrepancy, ``(1, 1)``
    means nobody answered.
    """
    found: list[int] = []
    if not responding:
        return found
    last_discrepancy = 0
    last_rom = 0
    while True:
        active = responding
        rom = 0
        last_zero = 0
        for bit_no in range(1, 65):
            shift = bit_no - 1
            has0 = any(not (r >> shift) & 1 for r in active)
            has1 = any((r >> shift) & 1 for r in active)
            id_bit, cmp_bit = int(not has0), int(not has1)
            if id_bit and cmp_bit:
                return found
            if id_bit != cmp_bit:
                direction = id_bit
            else:
                if bit_no < last_discrepancy:
                    direction = (last_rom >> shift) & 1
                else:
                    direction = int(bit_no == last_discrepancy)
                if direction == 0:
                    last_zero = bit_no
            rom |= direction << shift
            active = [r for r in active if (r >> shift) & 1 == direction]
        found.append(rom)
        last_rom = rom
        last_discrepancy = last_zero
        if last_discrepancy == 0:
            return found


@dataclass
class OneWireBus:
    """One OneWire segment (one SAU port) with its attached DS18B20 devices."""

    radius_m: float = 5.0
    n_splitters: int = 0
    seed: int = 0
    model: LoadModel = field(default_factory=LoadModel)
    devices: dict[RomCode, SensorInstance] = field(default_factory=dict)
    attempts: int = 0

    def attach(self, rom: RomCode, sensor: SensorInstance) -> None:
        if not rom.valid:
            raise ValueError(f"ROM {rom} fails CRC")
        self.devices[rom] = sensor

    @property
    def topology(self) -> BusTopology:
        return BusTopology(self.radius_m, len(self.devices), self.n_splitters)

    @property
    def health(self) -> BusHealth:
        return bus_health(self.topology, self.model)


def search_rom(bus: OneWireBus) -> list[RomCode]:
    """Discover devices; on an overloaded bus devices drop out at random.

    Dropout draws are keyed by ``(bus.seed, attempt)`` so runs repeat.
    """
    health = bus.health
    attempt = bus.attempts
    bus.attempts += 1
    installed = sorted(bus.devices)
    if health.discovery_reliable:
        responding = [r.value for r in installed]
    else:
        rng = np.random.default_rng([bus.seed & 0xFFFFFFFF, attempt])
        keep = rng.random(len(installed)) >= health.p_miss
        responding = [r.value for r, k in zip(installed, keep) if k]
    return sorted(RomCode(v) for v in set(_search(responding)))


def encode_scratchpad(temp_c: float) -> bytes:
    """DS18B20 scratchpad: temperature LSB first in 1/16 K, 12-bit config, CRC."""
    sixteenths = int(round(quantize_ds18b20(temp_c) * 16))
    body = bytearray(sixteenths.to_bytes(2, "little", signed=True))
    body += bytes([0x4B, 0x46, 0x7F, 0xFF, 0x0C, 0x10])
    body.append(crc8(body))
    return bytes(body)


def decode_scratchpad(frame: bytes) -> float:
    if len(frame) != 9 or crc8(frame) != 0:
        raise BusFault("scratchpad CRC mismatch")
    return int.from_bytes(frame[0:2], "little", signed=True) / 16.0


def read_scratchpad(bus: OneWireBus, rom: RomCode) -> bytes:
    sensor = bus.devices.get(rom)
    if sensor is None:
        raise NoSuchDevice(str(rom))
    if bus.health.recovery_time_us <= 0:
        raise BusFault("bus does not recover; reads fail")
    return encode_scratchpad(sensor.lag_state + sensor.offset_error)
