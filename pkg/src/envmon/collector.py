"""Central collector: ingest, alarm rules, per-SAU watchdog escalation.

Staleness is judged on heartbeats only. A SAU whose MCU is browned out
still heartbeats through its agent and is never escalated; the missing
metrics show up through alarm rules instead.

Escalation ladder for a silent SAU (default timings)::

    HEALTHY --10 s without heartbeat--> STALE -> RESET_SENT -> AWAITING_RESET
    AWAITING_RESET --30 s--> CYCLE_SENT -> AWAITING_CYCLE
    AWAITING_CYCLE --60 s--> FAILED (+ alarm), retried by power cycle with
    exponential backoff (5 min, x2, capped at 1 h)

A heartbeat in any state returns the SAU to HEALTHY.
"""

from __future__ import annotations

import enum
import logging
import math
import threading
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .protocol import Command, ProtocolError, TelemetryRecord, decode, format_value
from .storage import OutOfOrder, Store

log = logging.getLogger(__name__)


class HealthState(str, enum.Enum):
    HEALTHY = "HEALTHY"
    STALE = "STALE"
    RESET_SENT = "RESET_SENT"
    AWAITING_RESET = "AWAITING_RESET"
    CYCLE_SENT = "CYCLE_SENT"
    AWAITING_CYCLE = "AWAITING_CYCLE"
    FAILED = "FAILED"


_LEGAL = {
    HealthState.HEALTHY: {HealthState.STALE},
    HealthState.STALE: {HealthState.RESET_SENT},
    HealthState.RESET_SENT: {HealthState.AWAITING_RESET},
    HealthState.AWAITING_RESET: {HealthState.CYCLE_SENT},
    HealthState.CYCLE_SENT: {HealthState.AWAITING_CYCLE},
    HealthState.AWAITING_CYCLE: {HealthState.FAILED},
    HealthState.FAILED: {HealthState.CYCLE_SENT},
}


@dataclass(frozen=True)
class WatchdogConfig:
    stale_ms: int = 10_000
    reset_grace_ms: int = 30_000
    cycle_grace_ms: int = 60_000
    backoff_base_ms: int = 300_000
    backoff_factor: float = 2.0
    backoff_cap_ms: int = 3_600_000
    cycle_off_ms: int = 3_000

    def backoff_ms(self, failures: int) -> int:
        """Delay before retry number ``failures`` (1-based)."""
        delay = self.backoff_base_ms * self.backoff_factor ** max(0, failures - 1)
        return int(min(delay, self.backoff_cap_ms))


@dataclass
class SauHealth:
    sau_id: str
    state: HealthState = HealthState.HEALTHY
    last_seen_ms: int = 0
    escalation_count: int = 0
    since_ms: int = 0
    failures: int = 0
    next_retry_ms: int | None = None
    firmware: str = "-"
    last_error: str | None = None


@dataclass(frozen=True)
class AlarmRule:
    metric: str
    min: float = -math.inf
    max: float = math.inf
    for_leak: bool = False
    debounce_ticks: int | None = None
    sau_id: str | None = None

    def __post_init__(self) -> None:
        if self.min > self.max:
            raise ValueError(f"alarm rule for {self.metric}: min > max")
        if self.debounce_ticks is not None and self.debounce_ticks < 1:
            raise ValueError("debounce_ticks must be >= 1")

    @property
    def debounce(self) -> int:
        if self.debounce_ticks is not None:
            return self.debounce_ticks
        return 1 if self.for_leak else 3

    def matches(self, rec: TelemetryRecord) -> bool:
        return rec.metric == self.metric and (self.sau_id is None or rec.sau_id == self.sau_id)

    def violated(self, value: float) -> bool:
        if self.for_leak:
            return value != 0
        return value < self.min or value > self.max

    def describe(self) -> str:
        if self.for_leak:
            return f"{self.metric}!=0"
        parts = []
        if self.min != -math.inf:
            parts.append(f"{self.metric}<{format_value(self.min)}")
        if self.max != math.inf:
            parts.append(f"{self.metric}>{format_value(self.max)}")
        return "|".join(parts) or self.metric


@dataclass(frozen=True)
class Event:
    timestamp_ms: int
    sau_id: str
    kind: str
    detail: str

    def line(self) -> str:
        return f"{self.timestamp_ms} {self.sau_id} {self.kind} {self.detail}"


@dataclass(frozen=True)
class Action:
    kind: str  # "reset" | "cycle"
    sau_id: str
    ok: bool


@dataclass
class _AlarmState:
    bad: int = 0
    good: int = 0
    active: bool = False


CommandSink = Callable[[Command], bool]


class Collector:
    def __init__(
        self,
        watchdog: WatchdogConfig = WatchdogConfig(),
        rules: list[AlarmRule] | tuple[AlarmRule, ...] = (),
        store: Store | None = None,
        switch_client=None,
        switch_ports: dict[str, int] | None = None,
        command_sink: CommandSink | None = None,
        event_log: str | Path | None = None,
        notifier: Callable[[Event], None] | None = None,
    ):
        self.watchdog = watchdog
        self.rules = list(rules)
        self.store = store if store is not None else Store()
        self.switch_client = switch_client
        self.switch_ports = dict(switch_ports or {})
        self.command_sink = command_sink
        self.event_log = Path(event_log) if event_log else None
        self.notifier = notifier
        self.health: dict[str, SauHealth] = {}
        self.events: list[Event] = []
        self.counters: Counter[str] = Counter()
        self.last_values: dict[str, tuple[int, float]] = {}
        self._alarms: dict[tuple[int, str], _AlarmState] = {}
        self._lock = threading.RLock()
        self._log_fh = open(self.event_log, "a", encoding="utf-8") if self.event_log else None

    def close(self) -> None:
        if self._log_fh is not None:
            self._log_fh.close()
            self._log_fh = None

    # -- events ---------------------------------------------------------------
    def _emit(self, ts: int, sau_id: str, kind: str, detail: str) -> Event:
        ev = Event(ts, sau_id, kind, detail)
        self.events.append(ev)
        if self._log_fh is not None:
            self._log_fh.write(ev.line() + "\n")
            self._log_fh.flush()
        if self.notifier is not None and kind in ("alarm", "alarm_clear", "failed"):
            try:
                self.notifier(ev)
            except Exception:  # notification is best effort
                log.exception("notifier failed")
        return ev

    def _move(self, h: SauHealth, new: HealthState, ts: int, detail: str) -> None:
        if new is not HealthState.HEALTHY and new not in _LEGAL[h.state]:
            raise RuntimeError(f"illegal transition {h.state.value} -> {new.value}")
        h.state = new
        h.since_ms = ts
        h.last_error = None
        kind = "recovered" if new is HealthState.HEALTHY else new.value.lower()
        self._emit(ts, h.sau_id, kind, detail)

    # -- ingest ---------------------------------------------------------------
    def register(self, sau_id: str, now_ms: int) -> SauHealth:
        """Expect ``sau_id``; it counts as seen at ``now_ms``."""
        with self._lock:
            h = self.health.get(sau_id)
            if h is None:
                h = self.health[sau_id] = SauHealth(sau_id, last_seen_ms=now_ms, since_ms=now_ms)
            return h

    def ingest_line(self, line: str | bytes, now_ms: int | None = None) -> TelemetryRecord | None:
        try:
            rec = decode(line)
        except ProtocolError as exc:
            with self._lock:
                self.counters[f"decode_error_{type(exc).__name__}"] += 1
            return None
        self.ingest(rec, now_ms)
        return rec

    def ingest(self, rec: TelemetryRecord, now_ms: int | None = None) -> None:
        seen = rec.timestamp_ms if now_ms is None else now_ms
        with self._lock:
            if rec.is_heartbeat:
                self.counters["heartbeats"] += 1
                h = self.health.get(rec.sau_id)
                if h is None:
                    h = self.health[rec.sau_id] = SauHealth(rec.sau_id, last_seen_ms=seen, since_ms=seen)
                    self._emit(seen, rec.sau_id, "registered", f"firmware={rec.sensor_id}")
                h.last_seen_ms = max(h.last_seen_ms, seen)
                h.firmware = rec.sensor_id
                if h.state is not HealthState.HEALTHY:
                    prev = h.state.value
                    h.failures = 0
                    h.next_retry_ms = None
                    self._move(h, HealthState.HEALTHY, seen, f"from={prev}")
                return
            self.counters["records"] += 1
            key = rec.key
            self.last_values[key] = (rec.timestamp_ms, rec.value)
            try:
                self.store.append(key, rec.timestamp_ms, rec.value)
            except OutOfOrder:
                self.counters["storage_out_of_order"] += 1
            self._evaluate(rec)

    def _evaluate(self, rec: TelemetryRecord) -> None:
        for i, rule in enumerate(self.rules):
            if not rule.matches(rec):
                continue
            st = self._alarms.setdefault((i, rec.key), _AlarmState())
            if rule.violated(rec.value):
                st.bad += 1
                st.good = 0
                if not st.active and st.bad >= rule.debounce:
                    st.active = True
                    self.counters["alarms"] += 1
                    self._emit(rec.timestamp_ms, rec.sau_id, "alarm",
                               f"{rec.key} value={format_value(rec.value)} rule={rule.describe()}")
            else:
                st.good += 1
                st.bad = 0
                if st.active and st.good >= rule.debounce:
                    st.active = False
                    self._emit(rec.timestamp_ms, rec.sau_id, "alarm_clear",
                               f"{rec.key} value={format_value(rec.value)} rule={rule.describe()}")

    # -- watchdog -------------------------------------------------------------
    def _send_reset(self, h: SauHealth, now_ms: int) -> bool:
        if self.command_sink is None:
            return False
        try:
            return bool(self.command_sink(Command("reset", h.sau_id)))
        except Exception as exc:
            self._emit(now_ms, h.sau_id, "command_error", type(exc).__name__)
            return False

    def _send_cycle(self, h: SauHealth, now_ms: int) -> bool:
        port = self.switch_ports.get(h.sau_id)
        try:
            if port is None:
                raise LookupError("no switch port mapped")
            if self.switch_client is None:
                raise LookupError("no switch client")
            self.switch_client.cycle(port, self.watchdog.cycle_off_ms)
            return True
        except Exception as exc:
            err = f"{type(exc).__name__}:{str(exc).replace(' ', '_') or '-'}"
            if err != h.last_error:
                self._emit(now_ms, h.sau_id, "switch_error", err)
                h.last_error = err
            return False

    def _cycle(self, h: SauHealth, now_ms: int, actions: list[Action]) -> None:
        if h.state is not HealthState.CYCLE_SENT:
            self._move(h, HealthState.CYCLE_SENT, now_ms, f"port={self.switch_ports.get(h.sau_id, '-')}")
        ok = self._send_cycle(h, now_ms)
        actions.append(Action("cycle", h.sau_id, ok))
        if ok:
            h.escalation_count += 1
            self._move(h, HealthState.AWAITING_CYCLE, now_ms, f"grace_ms={self.watchdog.cycle_grace_ms}")

    def watchdog_tick(self, now_ms: int) -> list[Action]:
        wd = self.watchdog
        actions: list[Action] = []
        with self._lock:
            for sau_id in sorted(self.health):
                h = self.health[sau_id]
                s = h.state
                if s is HealthState.HEALTHY:
                    age = now_ms - h.last_seen_ms
                    if age >= wd.stale_ms:
                        self._move(h, HealthState.STALE, now_ms, f"age_ms={age}")
                        s = h.state
                if s is HealthState.STALE:
                    self._move(h, HealthState.RESET_SENT, now_ms, "cmd=reset")
                    ok = self._send_reset(h, now_ms)
                    actions.append(Action("reset", sau_id, ok))
                    h.escalation_count += 1
                    self._move(h, HealthState.AWAITING_RESET, now_ms, f"delivered={'yes' if ok else 'no'}")
                elif s is HealthState.AWAITING_RESET:
                    if now_ms - h.since_ms >= wd.reset_grace_ms:
                        self._cycle(h, now_ms, actions)
                elif s is HealthState.CYCLE_SENT:
                    self._cycle(h, now_ms, actions)
                elif s is HealthState.AWAITING_CYCLE:
                    if now_ms - h.since_ms >= wd.cycle_grace_ms:
                        h.failures += 1
                        h.next_retry_ms = now_ms + wd.backoff_ms(h.failures)
                        self._move(h, HealthState.FAILED, now_ms, f"retry_at_ms={h.next_retry_ms}")
                        self.counters["alarms"] += 1
                        self._emit(now_ms, sau_id, "alarm", f"sau_failed escalations={h.escalation_count}")
                elif s is HealthState.FAILED:
                    if h.next_retry_ms is not None and now_ms >= h.next_retry_ms:
                        self._cycle(h, now_ms, actions)
        return actions

    # -- inspection -----------------------------------------------------------
    def active_alarms(self) -> list[tuple[str, str]]:
        with self._lock:
            return sorted(
                (key, self.rules[i].describe()) for (i, key), st in self._alarms.items() if st.active
            )

    def status(self) -> dict:
        with self._lock:
            return {
                "saus": [
                    {
                        "sau_id": h.sau_id,
                        "state": h.state.value,
                        "last_seen_ms": h.last_seen_ms,
                        "escalation_count": h.escalation_count,
                        "firmware": h.firmware,
                    }
                    for h in sorted(self.health.values(), key=lambda h: h.sau_id)
                ],
                "metrics": {k: {"timestamp_ms": t, "value": v} for k, (t, v) in sorted(self.last_values.items())},
                "alarms": [{"key": k, "rule": r} for k, r in self.active_alarms()],
                "counters": dict(sorted(self.counters.items())),
            }

    def status_text(self) -> str:
        return status_to_text(self.status())


def status_to_text(snap: dict) -> str:
    lines = []
    for s in snap["saus"]:
        lines.append(
            f"sau {s['sau_id']} state={s['state']} last_seen_ms={s['last_seen_ms']} "
            f"escalations={s['escalation_count']} firmware={s['firmware']}"
        )
    for key, m in snap["metrics"].items():
        lines.append(f"metric {key} ts={m['timestamp_ms']} value={format_value(float(m['value']))}")
    for a in snap["alarms"]:
        lines.append(f"alarm {a['key']} rule={a['rule']}")
    for name, value in snap["counters"].items():
        lines.append(f"counter {name} {value}")
    return "\n".join(lines) + ("\n" if lines else "")
