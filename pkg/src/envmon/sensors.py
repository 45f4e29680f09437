"""Behavioural sensor models: thermal lag, per-device error, raw encodings."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .calibration import DeviceConstants, poly_from_constants, raw_for_temperature


class SensorKind(str, enum.Enum):
    DS18B20 = "DS18B20"
    HYT271 = "HYT271"
    BME280 = "BME280"
    FLOW_METER = "FLOW_METER"
    LEAK = "LEAK"


@dataclass(frozen=True)
class SensorSpec:
    kind: SensorKind
    tau_still_air: float | None
    tau_airflow: float | None
    accuracy: float
    quantization: float | None


CATALOG: dict[SensorKind, SensorSpec] = {
    SensorKind.DS18B20: SensorSpec(SensorKind.DS18B20, 90.0, None, 0.5, 0.0625),
    SensorKind.HYT271: SensorSpec(SensorKind.HYT271, 180.0, 4.0, 0.2, 165.0 / (2**14 - 1)),
    SensorKind.BME280: SensorSpec(SensorKind.BME280, 270.0, 1.0, 1.0, 1.0),
    SensorKind.FLOW_METER: SensorSpec(SensorKind.FLOW_METER, None, None, 0.0, 1.0),
    SensorKind.LEAK: SensorSpec(SensorKind.LEAK, None, None, 0.0, None),
}

# metrics each kind produces, in scan order
METRICS: dict[SensorKind, tuple[str, ...]] = {
    SensorKind.DS18B20: ("temp_c",),
    SensorKind.HYT271: ("temp_c", "humidity_pct"),
    SensorKind.BME280: ("temp_c", "humidity_pct", "pressure_hpa"),
    SensorKind.FLOW_METER: ("flow_pulses",),
    SensorKind.LEAK: ("leak",),
}

DS18B20_MIN, DS18B20_MAX = -55.0, 125.0
HYT_T_MIN, HYT_T_SPAN = -40.0, 165.0
HYT_FULL_SCALE = 2**14 - 1


@dataclass
class SensorInstance:
    spec: SensorSpec
    id: int
    lag_state: float = 20.0
    offset_error: float = 0.0
    device_constants: DeviceConstants | None = None
    airflow: bool = False
    humidity: float = 40.0
    pressure: float = 1013.25
    pulses: float = 0.0
    wet: bool = False
    litres_per_pulse: float = 1.0

    @property
    def kind(self) -> SensorKind:
        return self.spec.kind

    @property
    def tau(self) -> float | None:
        if self.airflow and self.spec.tau_airflow is not None:
            return self.spec.tau_airflow
        return self.spec.tau_still_air


def lag_update(state: float, target: float, dt: float, tau: float) -> float:
    """Exact first-order response over ``dt``; stable for any step size."""
    return state + (target - state) * -math.expm1(-dt / tau)


def step(sensor: SensorInstance, env_value: float, dt: float) -> SensorInstance:
    """Advance the thermal lag toward ``env_value`` (in place; returns the sensor)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    tau = sensor.tau
    if tau is not None:
        sensor.lag_state = lag_update(sensor.lag_state, env_value, dt, tau)
    return sensor


def quantize_ds18b20(temp_c: float) -> float:
    t = min(max(temp_c, DS18B20_MIN), DS18B20_MAX)
    return math.floor(t * 16.0) / 16.0


def hyt_codes(temp_c: float, rh_pct: float) -> tuple[int, int]:
    t = min(max(temp_c, HYT_T_MIN), HYT_T_MIN + HYT_T_SPAN)
    rh = min(max(rh_pct, 0.0), 100.0)
    return (
        int(round((t - HYT_T_MIN) / HYT_T_SPAN * HYT_FULL_SCALE)),
        int(round(rh / 100.0 * HYT_FULL_SCALE)),
    )


def hyt_decode(t_code: int, rh_code: int) -> tuple[float, float]:
    return (
        t_code / HYT_FULL_SCALE * HYT_T_SPAN + HYT_T_MIN,
        rh_code / HYT_FULL_SCALE * 100.0,
    )


def read_raw(sensor: SensorInstance):
    """Raw reading as the sensor would report it.

    DS18B20 gives degrees on a 1/16 K grid, HYT-271 a ``(t_code, rh_code)``
    pair, BME280 an integer ADC count, the flow meter its cumulative pulse
    count and the leak sensor 0/1.
    """
    kind = sensor.kind
    sensed = sensor.lag_state + sensor.offset_error
    if kind is SensorKind.DS18B20:
        return quantize_ds18b20(sensed)
    if kind is SensorKind.HYT271:
        return hyt_codes(sensed, sensor.humidity)
    if kind is SensorKind.BME280:
        if sensor.device_constants is None:
            raise ValueError("BME280 sensor without device constants")
        poly = poly_from_constants(sensor.device_constants)
        return int(round(raw_for_temperature(poly, sensed)))
    if kind is SensorKind.FLOW_METER:
        return int(math.floor(sensor.pulses))
    if kind is SensorKind.LEAK:
        return 1 if sensor.wet else 0
    raise ValueError(f"unknown sensor kind {kind}")


def sample_offset_error(kind: SensorKind, rng_seed: int, sigma_fraction: float = 0.5) -> float:
    """Per-device offset: Gaussian with sigma = fraction * accuracy, truncated to +-accuracy."""
    acc = CATALOG[SensorKind(kind)].accuracy
    if acc == 0:
        return 0.0
    rng = np.random.default_rng(rng_seed)
    sigma = sigma_fraction * acc
    while True:
        x = float(rng.normal(0.0, sigma))
        if abs(x) <= acc:
            return x


@dataclass
class Schedule:
    """Piecewise-linear schedule over simulated seconds; held flat outside its knots."""

    times: list[float]
    values: list[float]

    def __post_init__(self) -> None:
        if not self.times or len(self.times) != len(self.values):
            raise ValueError("schedule needs matching, non-empty times and values")
        if any(b < a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("schedule times must be non-decreasing")

    @classmethod
    def constant(cls, value: float) -> Schedule:
        return cls([0.0], [float(value)])

    @classmethod
    def from_pairs(cls, pairs) -> Schedule:
        if isinstance(pairs, (int, float)):
            return cls.constant(pairs)
        return cls([float(t) for t, _ in pairs], [float(v) for _, v in pairs])

    def at(self, t: float) -> float:
        return float(np.interp(t, self.times, self.values))


@dataclass
class EnvironmentProfile:
    temperature: Schedule = field(default_factory=lambda: Schedule.constant(22.0))
    humidity: Schedule = field(default_factory=lambda: Schedule.constant(40.0))
    pressure: Schedule = field(default_factory=lambda: Schedule.constant(1013.25))
    flow_rate: Schedule = field(default_factory=lambda: Schedule.constant(0.0))
    # (time_s, wet) events; the latest event at or before t wins
    leak_events: list[tuple[float, bool]] = field(default_factory=list)

    def leak_at(self, t: float) -> bool:
        wet = False
        for when, state in sorted(self.leak_events):
            if when <= t:
                wet = state
            else:
                break
        return wet


def advance(sensor: SensorInstance, env: EnvironmentProfile, t: float, dt: float) -> None:
    """Advance one sensor to time ``t`` given the environment."""
    kind = sensor.kind
    if kind is SensorKind.FLOW_METER:
        sensor.pulses += env.flow_rate.at(t) * dt
        return
    if kind is SensorKind.LEAK:
        sensor.wet = env.leak_at(t)
        return
    step(sensor, env.temperature.at(t), dt)
    if kind in (SensorKind.HYT271, SensorKind.BME280):
        target = env.humidity.at(t)
        if sensor.tau is not None:
            sensor.humidity = lag_update(sensor.humidity, target, dt, sensor.tau)
        if kind is SensorKind.BME280:
            sensor.pressure = env.pressure.at(t)
