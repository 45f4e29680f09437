"""Deterministic in-process fleet simulation on a virtual 1 s clock.

Per tick, in order: scheduled faults apply, the switch completes due power
cycles, every SAU runs its loop and its queued records cross the wire
(encoded and decoded as text lines), then the collector's watchdog runs
and its commands and power cycles take effect.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

from .collector import Collector
from .config import Topology
from .poe import LocalSwitchClient, PoeSwitch
from .protocol import Command, decode_command, encode, encode_command
from .sau import Sau
from .storage import Store


class FaultSpecError(ValueError):
    pass


@dataclass(frozen=True)
class Fault:
    kind: str  # wedge-mcu | wedge-agent | short | corrupt-serial
    sau_id: str
    start_s: float = 0.0
    end_s: float | None = None
    port: int | None = None
    rate: float = 0.0

    @classmethod
    def parse(cls, spec: str) -> Fault:
        """Parse ``wedge-mcu:<sau>:<t>``, ``wedge-agent:<sau>:<t>``,
        ``short:<sau>:<port>:<t1>-<t2>`` or ``corrupt-serial:<sau>:<rate>``."""
        parts = spec.split(":")
        try:
            kind = parts[0]
            if kind in ("wedge-mcu", "wedge-agent") and len(parts) == 3:
                return cls(kind, parts[1], float(parts[2]))
            if kind == "short" and len(parts) == 4:
                m = re.fullmatch(r"([0-9.]+)-([0-9.]+)", parts[3])
                if not m:
                    raise ValueError(parts[3])
                t1, t2 = float(m.group(1)), float(m.group(2))
                if t2 <= t1:
                    raise ValueError("short must end after it starts")
                return cls(kind, parts[1], t1, t2, port=int(parts[2]))
            if kind == "corrupt-serial" and len(parts) == 3:
                rate = float(parts[2])
                if not 0 <= rate <= 1:
                    raise ValueError("rate outside [0, 1]")
                return cls(kind, parts[1], rate=rate)
        except ValueError as exc:
            raise FaultSpecError(f"bad fault spec {spec!r}: {exc}") from None
        raise FaultSpecError(f"bad fault spec {spec!r}")


class FaultInjector:
    """Applies fault specs to SAUs as simulated time passes."""

    def __init__(self, faults, saus: dict[str, Sau]):
        self.faults = list(faults)
        self.saus = saus
        for f in self.faults:
            if f.sau_id not in saus:
                raise FaultSpecError(f"fault names unknown SAU {f.sau_id!r}")
        self._fired: set[int] = set()

    def apply(self, t_s: float) -> None:
        for i, f in enumerate(self.faults):
            sau = self.saus[f.sau_id]
            if f.kind in ("wedge-mcu", "wedge-agent"):
                # one-shot, at the first tick at or after its time
                if i in self._fired or t_s < f.start_s:
                    continue
                self._fired.add(i)
                if f.kind == "wedge-mcu":
                    sau.mcu_wedged = True
                elif sau.state.powered:
                    sau.agent_wedged = True
            elif f.kind == "short":
                sau.short_port(f.port, f.start_s <= t_s < f.end_s)
            elif f.kind == "corrupt-serial":
                sau.corrupt_rate = f.rate


class Simulation:
    def __init__(
        self,
        topology: Topology,
        faults: list[Fault] | tuple[Fault, ...] = (),
        seed: int | None = None,
        event_log: str | Path | None = None,
        switch_log: str | Path | None = None,
        store: Store | None = None,
        wire: bool = True,
    ):
        self.topology = topology
        self.seed = topology.seed if seed is None else seed
        self.start_ms = topology.start_ms
        self.now_ms = self.start_ms
        self.wire = wire
        self.saus: dict[str, Sau] = {
            cfg.sau_id: Sau(cfg, seed=self.seed, start_ms=self.start_ms) for cfg in topology.saus
        }
        self.injector = FaultInjector(faults, self.saus)
        self.switch = PoeSwitch(topology.switch_ports, listener=self._on_power, log_path=switch_log)
        for cfg in topology.saus:
            if cfg.switch_port is not None:
                self.switch.attach(cfg.switch_port, cfg.sau_id)
        self.collector = Collector(
            watchdog=topology.watchdog,
            rules=topology.rules,
            store=store if store is not None else Store(tiers=topology.tiers),
            switch_client=LocalSwitchClient(self.switch, lambda: self.now_ms),
            switch_ports=topology.switch_map,
            command_sink=self._deliver,
            event_log=event_log,
        )
        for sau_id in sorted(self.saus):
            self.collector.register(sau_id, self.start_ms)
        self.delivered = 0
        self.ticks = 0

    def _on_power(self, sau_id: str, on: bool, now_ms: int) -> None:
        self.saus[sau_id].set_power(on, now_ms)

    def _deliver(self, cmd: Command) -> bool:
        sau = self.saus.get(cmd.sau_id)
        if sau is None:
            return False
        return sau.handle_command(decode_command(encode_command(cmd)), self.now_ms)

    def step(self) -> None:
        now = self.now_ms
        t_s = (now - self.start_ms) / 1000.0
        self.injector.apply(t_s)
        self.switch.poll(now)
        ingest = self.collector.ingest_line if self.wire else self.collector.ingest
        for sau_id in sorted(self.saus):
            sau = self.saus[sau_id]
            sau.tick(now)
            for rec in sau.drain():
                if self.wire:
                    ingest(encode(rec), now)
                else:
                    ingest(rec, now)
                self.delivered += 1
        self.collector.watchdog_tick(now)
        self.ticks += 1
        self.now_ms = now + 1000

    def run(self, duration_s: float | None = None) -> Simulation:
        n = int(self.topology.duration_s if duration_s is None else duration_s)
        for _ in range(n):
            self.step()
        return self

    def event_lines(self) -> list[str]:
        return [e.line() for e in self.collector.events]

    def close(self) -> None:
        self.collector.close()
