"""BME280 temperature recalibration and DS18B20 offset calibration.

The BME280 maps a raw ADC count to degrees Celsius through a quadratic
whose coefficients are derived from three per-device constants stored in
the chip. Recalibration fits a fresh quadratic against a reference probe
and inverts the coefficient map to obtain new constants.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

# Coefficient scale factors of the compensation polynomial.
K0 = 4.0 / (5.0 * 2**22)
K1 = 4.0 / (5.0 * 2**26)
K2 = 4.0 / (5.0 * 2**46)

MAX_RAMP_C_PER_MIN = 0.2
CHAMBER_T_MIN = -40.0
CHAMBER_T_MAX = 60.0
MAX_BATH_SPREAD_K = 0.5
# Offsets are snapped to this grid so that adding and then subtracting one is
# exact for every reading on a coarser binary grid (DS18B20 output is 1/16 K).
OFFSET_QUANTUM = 2.0**-16

# |d3| below this after inversion is treated as a linear (c2 == 0) device.
DEGENERATE_D3 = 1e-6


class CalibrationError(ValueError):
    """Base class for calibration failures."""


class NegativeDiscriminant(CalibrationError):
    pass


class Underdetermined(CalibrationError):
    pass


class InsufficientData(CalibrationError):
    pass


class SingularFit(CalibrationError):
    pass


class RangeUnreachable(CalibrationError):
    pass


class RampTooFast(CalibrationError):
    pass


class OutOfChamberRange(CalibrationError):
    pass


class EmptyReadings(CalibrationError):
    pass


class UnstableBath(CalibrationError):
    pass


@dataclass(frozen=True)
class DeviceConstants:
    d1: float
    d2: float
    d3: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.d1, self.d2, self.d3)):
            raise ValueError(f"non-finite device constants {self}")

    @classmethod
    def parse(cls, text: str) -> DeviceConstants:
        """Parse ``"d1,d2,d3"``."""
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 3:
            raise ValueError(f"expected d1,d2,d3 but got {text!r}")
        return cls(*(float(p) for p in parts))


@dataclass(frozen=True)
class CompensationPoly:
    c0: float
    c1: float
    c2: float

    @property
    def discriminant(self) -> float:
        return self.c1 * self.c1 - 4.0 * self.c0 * self.c2

    def __call__(self, t_raw):
        return self.c0 + self.c1 * t_raw + self.c2 * t_raw * t_raw


@dataclass(frozen=True)
class SweepPoint:
    t_elapsed: float
    t_ref: float
    t_raw: float


@dataclass(frozen=True)
class ChamberSweep:
    """Climate-chamber sweep; construction enforces ramp rate and range."""

    points: tuple[SweepPoint, ...]
    forced: bool = False

    def __post_init__(self) -> None:
        if self.forced:
            return
        for p in self.points:
            if not CHAMBER_T_MIN <= p.t_ref <= CHAMBER_T_MAX:
                raise OutOfChamberRange(
                    f"reference {p.t_ref} C at t={p.t_elapsed}s outside "
                    f"[{CHAMBER_T_MIN}, {CHAMBER_T_MAX}]"
                )
        for a, b in zip(self.points, self.points[1:]):
            dt = b.t_elapsed - a.t_elapsed
            if dt <= 0:
                raise RampTooFast(f"non-increasing elapsed time at t={b.t_elapsed}s")
            rate = abs(b.t_ref - a.t_ref) / dt * 60.0
            if rate > MAX_RAMP_C_PER_MIN + 1e-9:
                raise RampTooFast(
                    f"ramp {rate:.3f} C/min between t={a.t_elapsed}s and "
                    f"t={b.t_elapsed}s exceeds {MAX_RAMP_C_PER_MIN} C/min"
                )

    @classmethod
    def from_arrays(cls, t_elapsed, t_ref, t_raw, force: bool = False) -> ChamberSweep:
        pts = tuple(
            SweepPoint(float(e), float(r), float(w))
            for e, r, w in zip(t_elapsed, t_ref, t_raw)
        )
        return cls(pts, forced=force)

    @classmethod
    def read_csv(cls, source: str | Path | io.TextIOBase, force: bool = False) -> ChamberSweep:
        """Load ``t_elapsed_s,t_ref_c,t_raw`` rows; ``#`` starts a comment."""
        if isinstance(source, (str, Path)):
            text = Path(source).read_text(encoding="utf-8")
        else:
            text = source.read()
        lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
        reader = csv.DictReader(lines)
        want = ["t_elapsed_s", "t_ref_c", "t_raw"]
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != want:
            raise ValueError(f"sweep header must be {','.join(want)}")
        pts = []
        for row in reader:
            row = {k.strip(): v for k, v in row.items()}
            pts.append(SweepPoint(float(row["t_elapsed_s"]), float(row["t_ref_c"]), float(row["t_raw"])))
        return cls(tuple(pts), forced=force)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("t_elapsed_s,t_ref_c,t_raw\n")
            for p in self.points:
                fh.write(f"{p.t_elapsed!r},{p.t_ref!r},{p.t_raw!r}\n")

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        a = np.array([(p.t_elapsed, p.t_ref, p.t_raw) for p in self.points], dtype=float)
        if a.size == 0:
            a = a.reshape(0, 3)
        return a[:, 0], a[:, 1], a[:, 2]


def poly_from_constants(d: DeviceConstants) -> CompensationPoly:
    c0 = -K0 * (d.d1 * d.d2 - d.d1 * d.d1 * d.d3 / 2**16)
    c1 = K1 * (d.d2 - d.d1 * d.d3 / 2**15)
    c2 = K2 * d.d3
    return CompensationPoly(c0, c1, c2)


def constants_from_poly(c: CompensationPoly) -> DeviceConstants:
    """Invert :func:`poly_from_constants`.

    Of the two roots for ``d1`` only ``(-c1 + sqrt(disc)) / (32 c2)``
    reproduces the forward map. It is evaluated in the conjugate form
    ``-c0 / (8 (c1 + sqrt(disc)))``, which avoids cancellation for small
    ``d3`` and reduces to the linear solution when ``c2 == 0``.
    """
    disc = c.discriminant
    if disc < 0:
        raise NegativeDiscriminant(f"c1^2 - 4 c0 c2 = {disc!r} < 0")
    root = math.sqrt(disc)
    d2 = root / K1
    d3 = c.c2 / K2
    if abs(d3) < DEGENERATE_D3:
        log.debug("degenerate quadratic (d3=%g), using linear inversion", d3)
        d3 = 0.0
        d2 = c.c1 / K1
        if d2 == 0:
            raise Underdetermined("c1 and c2 are both zero")
        return DeviceConstants(-c.c0 / (K0 * d2), d2, 0.0)
    denom = 8.0 * (c.c1 + root)
    if denom == 0:
        raise Underdetermined("c1 + sqrt(disc) vanishes; d1 is undetermined")
    return DeviceConstants(-c.c0 / denom, d2, d3)


def compensate(c: CompensationPoly, t_raw):
    return c.c0 + c.c1 * t_raw + c.c2 * t_raw * t_raw


def raw_for_temperature(c: CompensationPoly, temp_c: float) -> float:
    """Raw count at which ``c`` yields ``temp_c``, on the increasing branch."""
    a, b, cc = c.c2, c.c1, c.c0 - temp_c
    if a == 0:
        if b == 0:
            raise RangeUnreachable("constant polynomial")
        return -cc / b
    disc = b * b - 4.0 * a * cc
    if disc < 0:
        raise RangeUnreachable(f"no real raw value maps to {temp_c} C")
    # The increasing branch is the one with b + 2 a x > 0, i.e. x = (-b + sqrt) / 2a.
    root = math.sqrt(disc)
    if b > 0:
        # conjugate form, stable for small a
        return -2.0 * cc / (b + root)
    return (-b + root) / (2.0 * a)


def fit_poly(sweep: ChamberSweep) -> CompensationPoly:
    """Unweighted least-squares quadratic from raw counts to reference temperature."""
    _, t_ref, t_raw = sweep.arrays()
    if len(t_raw) < 3:
        raise InsufficientData(f"need at least 3 points, got {len(t_raw)}")
    if len(np.unique(t_raw)) < 3:
        raise SingularFit("fewer than 3 distinct raw values")
    # centre and scale the abscissa; raw counts near 5e5 make t_raw^2 ill-conditioned
    mid = float(np.mean(t_raw))
    scale = float(np.max(np.abs(t_raw - mid)))
    u = (t_raw - mid) / scale
    design = np.column_stack([np.ones_like(u), u, u * u])
    coef, _, rank, _ = np.linalg.lstsq(design, t_ref, rcond=None)
    if rank < 3:
        raise SingularFit(f"design matrix rank {rank} < 3")
    a0, a1, a2 = (float(x) for x in coef)
    c2 = a2 / scale**2
    c1 = a1 / scale - 2.0 * a2 * mid / scale**2
    c0 = a0 - a1 * mid / scale + a2 * mid * mid / scale**2
    return CompensationPoly(c0, c1, c2)


def max_residual(c: CompensationPoly, sweep: ChamberSweep) -> float:
    _, t_ref, t_raw = sweep.arrays()
    if len(t_ref) == 0:
        return 0.0
    return float(np.max(np.abs(compensate(c, t_raw) - t_ref)))


def recalibrate(sweep: ChamberSweep) -> DeviceConstants:
    return constants_from_poly(fit_poly(sweep))


def deviation_range(
    factory: DeviceConstants,
    fresh: DeviceConstants,
    t_lo: float = CHAMBER_T_MIN,
    t_hi: float = CHAMBER_T_MAX,
) -> tuple[float, float]:
    """Factory-calibration error at the two range endpoints, in kelvin.

    Each endpoint temperature is mapped to raw counts through the fresh
    calibration; the factory polynomial is evaluated there and compared.
    """
    fp = poly_from_constants(factory)
    np_ = poly_from_constants(fresh)
    # fresh(raw) == t by construction, so factory(raw) - t is the difference
    # polynomial at raw; exactly zero for identical calibrations
    diff = CompensationPoly(fp.c0 - np_.c0, fp.c1 - np_.c1, fp.c2 - np_.c2)
    out = [float(compensate(diff, raw_for_temperature(np_, t))) for t in (t_lo, t_hi)]
    return out[0], out[1]


def format_report(d: DeviceConstants, residual: float | None = None) -> str:
    lines = [f"d1={d.d1:.6f}", f"d2={d.d2:.6f}", f"d3={d.d3:.6f}"]
    if residual is not None:
        lines.append(f"max_residual_k={residual:.6f}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class OffsetCalibration:
    sensor_id: int
    offset: float
    reference_temp: float
    n_samples: int

    def apply(self, reading: float) -> float:
        return reading + self.offset

    def unapply(self, reading: float) -> float:
        return reading - self.offset


def ds18b20_offset(
    readings: Sequence[float] | Iterable[float],
    reference: float = 20.0,
    sensor_id: int = 0,
) -> OffsetCalibration:
    values = [float(r) for r in readings]
    if not values:
        raise EmptyReadings("no readings")
    spread = max(values) - min(values)
    if spread >= MAX_BATH_SPREAD_K:
        raise UnstableBath(f"reading spread {spread:.3f} K >= {MAX_BATH_SPREAD_K} K")
    offset = round((reference - math.fsum(values) / len(values)) / OFFSET_QUANTUM) * OFFSET_QUANTUM
    return OffsetCalibration(sensor_id, offset, reference, len(values))


def read_offset_csv(path: str | Path) -> dict[str, list[float]]:
    """Readings grouped by sensor. Accepts ``sensor_id,temp_c`` or bare ``temp_c``."""
    text = Path(path).read_text(encoding="utf-8")
    rows = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not rows:
        return {}
    groups: dict[str, list[float]] = {}
    header = [h.strip() for h in rows[0].split(",")]
    if "temp_c" in header:
        body = csv.DictReader(rows)
        for row in body:
            row = {k.strip(): v for k, v in row.items()}
            groups.setdefault(row.get("sensor_id", "-").strip(), []).append(float(row["temp_c"]))
    else:
        for ln in rows:
            groups.setdefault("-", []).append(float(ln.split(",")[-1]))
    return groups
