"""Fixed-size round-robin time-series archives with consolidation tiers.

File layout (little-endian)::

    b"ENVRRA1\\0"
    u32 tier_count
    tier_count x { u32 step_s, u32 capacity, u8 consolidation, u32 write_index }
    for each tier: capacity x { i64 timestamp_ms, f64 value }

Unused slots hold ``timestamp_ms == EMPTY_TS``. Tier 0 is the raw tier
and stores samples as appended; every later tier stores one consolidated
value per ``step_s`` window, stamped with the window start.
"""

from __future__ import annotations

import math
import os
import re
import struct
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"ENVRRA1\0"
EMPTY_TS = np.iinfo(np.int64).min
CONSOLIDATIONS = ("avg", "min", "max", "last")
_SLOT = np.dtype([("ts", "<i8"), ("value", "<f8")])
_HEADER = struct.Struct("<I")
_TIER = struct.Struct("<IIBI")


class StorageError(Exception):
    pass


class OutOfOrder(StorageError):
    pass


class CorruptArchive(StorageError):
    pass


@dataclass(frozen=True)
class TierSpec:
    step_s: int
    capacity: int
    consolidation: str = "avg"

    def __post_init__(self) -> None:
        if self.step_s <= 0 or self.capacity <= 0:
            raise ValueError("tier step and capacity must be positive")
        if self.consolidation not in CONSOLIDATIONS:
            raise ValueError(f"unknown consolidation {self.consolidation!r}")


DEFAULT_TIERS = (
    TierSpec(1, 3600, "avg"),
    TierSpec(60, 10080, "avg"),
    TierSpec(3600, 8760, "avg"),
)


def _validate_tiers(tiers) -> None:
    if not tiers:
        raise ValueError("at least one tier required")
    for a, b in zip(tiers, tiers[1:]):
        if b.step_s % a.step_s:
            raise ValueError(f"tier step {b.step_s}s is not a multiple of {a.step_s}s")


def file_size(tiers) -> int:
    return len(MAGIC) + _HEADER.size + len(tiers) * _TIER.size + sum(t.capacity for t in tiers) * _SLOT.itemsize


def _empty_slots(n: int) -> np.ndarray:
    slots = np.empty(n, dtype=_SLOT)
    slots["ts"] = EMPTY_TS
    slots["value"] = 0.0
    return slots


class _Ring:
    """Ring of ``capacity`` slots; memory grows on demand until first wrap."""

    def __init__(self, spec: TierSpec, slots: np.ndarray | None = None, write_index: int = 0):
        self.spec = spec
        self.slots = _empty_slots(min(spec.capacity, 64)) if slots is None else slots
        self.write_index = write_index

    def push(self, ts: int, value: float) -> None:
        n = len(self.slots)
        if self.write_index >= n:
            grown = _empty_slots(min(self.spec.capacity, 2 * n))
            grown[:n] = self.slots
            self.slots = grown
        self.slots[self.write_index] = (ts, value)
        self.write_index = (self.write_index + 1) % self.spec.capacity

    def full_slots(self) -> np.ndarray:
        if len(self.slots) == self.spec.capacity:
            return self.slots
        out = _empty_slots(self.spec.capacity)
        out[: len(self.slots)] = self.slots
        return out

    def ordered(self) -> np.ndarray:
        s = np.concatenate([self.slots[self.write_index:], self.slots[: self.write_index]])
        return s[s["ts"] != EMPTY_TS]

    @property
    def wrapped(self) -> bool:
        """True once the ring has overwritten its oldest sample at least once."""
        return (
            len(self.slots) == self.spec.capacity
            and int(self.slots[self.write_index % self.spec.capacity]["ts"]) != EMPTY_TS
        )

    def newest_ts(self) -> int | None:
        i = (self.write_index - 1) % self.spec.capacity
        if i >= len(self.slots):
            return None
        ts = int(self.slots[i]["ts"])
        return None if ts == EMPTY_TS else ts

    def rewrite_newest(self, ts: int, value: float) -> None:
        self.slots[(self.write_index - 1) % self.spec.capacity] = (ts, value)


def _consolidate(kind: str, values: list[float]) -> float:
    if kind == "avg":
        return math.fsum(values) / len(values)
    if kind == "min":
        return min(values)
    if kind == "max":
        return max(values)
    return values[-1]


class Archive:
    """One metric's archive. Single writer; readers see the last flushed file."""

    def __init__(self, key: str, tiers=DEFAULT_TIERS, path: str | Path | None = None):
        tiers = tuple(tiers)
        _validate_tiers(tiers)
        self.key = key
        self.tiers = tiers
        self.path = Path(path) if path is not None else None
        self.rings = [_Ring(t) for t in tiers]
        # per coarse tier: [window_start_ms, values, already_pushed]
        self._pending: list[list] = [[None, [], False] for _ in tiers[1:]]
        self._lock = threading.Lock()

    # -- writing ---------------------------------------------------------
    def append(self, timestamp_ms: int, value: float) -> None:
        timestamp_ms = int(timestamp_ms)
        value = float(value)
        with self._lock:
            newest = self.rings[0].newest_ts()
            if newest is not None and timestamp_ms <= newest:
                raise OutOfOrder(f"{self.key}: {timestamp_ms} <= newest {newest}")
            self.rings[0].push(timestamp_ms, value)
            raw_step_ms = self.tiers[0].step_s * 1000
            for ring, pend in zip(self.rings[1:], self._pending):
                self._feed(ring, pend, timestamp_ms, value, raw_step_ms)

    @staticmethod
    def _window(ts: int, step_ms: int) -> int:
        return ts - ts % step_ms

    def _feed(self, ring: _Ring, pend: list, ts: int, value: float, raw_step_ms: int) -> None:
        # pend = [window_start_ms, values, already_pushed]
        step_ms = ring.spec.step_s * 1000
        start = self._window(ts, step_ms)
        if pend[0] is not None and pend[0] != start:
            if not pend[2]:
                ring.push(pend[0], _consolidate(ring.spec.consolidation, pend[1]))
            pend[:] = [None, [], False]
        if pend[0] is None:
            done = ring.newest_ts()
            if done is not None and start <= done:
                return  # window consolidated before a reopen; raw tier still has it
            pend[:] = [start, [], False]
        pend[1].append(value)
        if pend[2]:
            # late sample in a window already written early: rewrite the newest slot
            ring.rewrite_newest(start, _consolidate(ring.spec.consolidation, pend[1]))
        elif ts + raw_step_ms >= start + step_ms:
            # the window's last raw slot is filled, so write it now
            ring.push(start, _consolidate(ring.spec.consolidation, pend[1]))
            pend[2] = True

    # -- reading ---------------------------------------------------------
    def tier_samples(self, tier: int = 0) -> list[tuple[int, float]]:
        with self._lock:
            s = self.rings[tier].ordered()
        return [(int(t), float(v)) for t, v in zip(s["ts"], s["value"])]

    def query(self, t_from: int, t_to: int, max_points: int = 1000) -> list[tuple[int, float]]:
        """Samples in ``[t_from, t_to]`` from the finest tier reaching back to ``t_from``.

        A tier that has never wrapped holds everything ever written and so
        reaches back to any ``t_from``.

        More than ``max_points`` samples are reduced by averaging runs of
        ``ceil(n / max_points)`` consecutive samples, each stamped with the
        run's first timestamp.
        """
        if t_to < t_from or max_points <= 0:
            return []
        with self._lock:
            ordered = [r.ordered() for r in self.rings]
            complete = [not r.wrapped for r in self.rings]
        chosen = None
        for s, whole in zip(ordered, complete):
            if len(s) and (whole or int(s["ts"][0]) <= t_from):
                chosen = s
                break
        if chosen is None:
            # nothing reaches back far enough: the tier with the oldest data
            nonempty = [s for s in ordered if len(s)]
            if not nonempty:
                return []
            chosen = min(nonempty, key=lambda s: int(s["ts"][0]))
        mask = (chosen["ts"] >= t_from) & (chosen["ts"] <= t_to)
        sel = chosen[mask]
        n = len(sel)
        if n <= max_points:
            return [(int(t), float(v)) for t, v in zip(sel["ts"], sel["value"])]
        k = -(-n // max_points)
        out = []
        for i in range(0, n, k):
            chunk = sel[i : i + k]
            out.append((int(chunk["ts"][0]), math.fsum(chunk["value"].tolist()) / len(chunk)))
        return out

    # -- persistence -----------------------------------------------------
    def to_bytes(self) -> bytes:
        with self._lock:
            parts = [MAGIC, _HEADER.pack(len(self.tiers))]
            for t, r in zip(self.tiers, self.rings):
                parts.append(_TIER.pack(t.step_s, t.capacity, CONSOLIDATIONS.index(t.consolidation), r.write_index))
            for r in self.rings:
                parts.append(r.full_slots().tobytes())
        return b"".join(parts)

    def flush(self) -> None:
        if self.path is None:
            raise StorageError("archive has no path")
        data = self.to_bytes()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=self.path.name + ".", dir=self.path.parent)
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, self.path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise

    close = flush

    @classmethod
    def from_bytes(cls, key: str, data: bytes, path: str | Path | None = None) -> Archive:
        if data[: len(MAGIC)] != MAGIC:
            raise CorruptArchive("bad magic")
        off = len(MAGIC)
        try:
            (count,) = _HEADER.unpack_from(data, off)
            off += _HEADER.size
            if count == 0 or count > 64:
                raise CorruptArchive(f"implausible tier count {count}")
            headers = []
            for _ in range(count):
                headers.append(_TIER.unpack_from(data, off))
                off += _TIER.size
        except struct.error:
            raise CorruptArchive("truncated header") from None
        try:
            tiers = tuple(TierSpec(s, c, CONSOLIDATIONS[k]) for s, c, k, _ in headers)
            _validate_tiers(tiers)
        except (ValueError, IndexError) as exc:
            raise CorruptArchive(str(exc)) from None
        if len(data) != file_size(tiers):
            raise CorruptArchive(f"size {len(data)} != expected {file_size(tiers)}")
        arc = cls(key, tiers, path)
        for i, (t, (_, cap, _, widx)) in enumerate(zip(tiers, headers)):
            if widx >= cap:
                raise CorruptArchive("write index out of range")
            n = cap * _SLOT.itemsize
            slots = np.frombuffer(data, dtype=_SLOT, count=cap, offset=off).copy()
            off += n
            arc.rings[i] = _Ring(t, slots, widx)
        arc._rebuild_pending()
        return arc

    @classmethod
    def open(cls, path: str | Path, key: str | None = None) -> Archive:
        path = Path(path)
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            raise
        return cls.from_bytes(key or key_from_filename(path.name), data, path)

    def _rebuild_pending(self) -> None:
        # Open windows are not stored; recover them from the retained raw samples.
        raw = self.rings[0].ordered()
        for ring, pend in zip(self.rings[1:], self._pending):
            step_ms = ring.spec.step_s * 1000
            done = ring.newest_ts()
            for ts, v in zip(raw["ts"].tolist(), raw["value"].tolist()):
                start = self._window(ts, step_ms)
                if done is not None and start <= done:
                    continue
                if pend[0] != start:
                    pend[:] = [start, [], False]
                pend[1].append(v)

    def export_csv(self, rows=None) -> str:
        rows = self.tier_samples(0) if rows is None else rows
        return "timestamp_ms,value\n" + "".join(f"{t},{v!r}\n" for t, v in rows)


_UNSAFE = re.compile(r"[^A-Za-z0-9._-]")


def filename_for_key(key: str) -> str:
    return _UNSAFE.sub(lambda m: f"%{ord(m.group()):02x}", key) + ".rra"


def key_from_filename(name: str) -> str:
    stem = name[:-4] if name.endswith(".rra") else name
    return re.sub(r"%([0-9a-f]{2})", lambda m: chr(int(m.group(1), 16)), stem)


class Store:
    """Archives keyed by ``sau_id:port:sensor_id:metric``, optionally backed by a directory."""

    def __init__(self, directory: str | Path | None = None, tiers=DEFAULT_TIERS):
        self.directory = Path(directory) if directory is not None else None
        self.tiers = tuple(tiers)
        self.archives: dict[str, Archive] = {}
        if self.directory is not None and self.directory.exists():
            for p in sorted(self.directory.glob("*.rra")):
                arc = Archive.open(p)
                self.archives[arc.key] = arc

    def archive(self, key: str) -> Archive:
        arc = self.archives.get(key)
        if arc is None:
            path = self.directory / filename_for_key(key) if self.directory is not None else None
            arc = self.archives[key] = Archive(key, self.tiers, path)
        return arc

    def append(self, key: str, timestamp_ms: int, value: float) -> None:
        self.archive(key).append(timestamp_ms, value)

    def query(self, key: str, t_from: int, t_to: int, max_points: int = 1000):
        arc = self.archives.get(key)
        return [] if arc is None else arc.query(t_from, t_to, max_points)

    def keys(self) -> list[str]:
        return sorted(self.archives)

    def flush(self) -> None:
        if self.directory is None:
            return
        for arc in list(self.archives.values()):
            arc.flush()
