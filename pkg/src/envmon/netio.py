"""asyncio networking: the collector's telemetry listener and a wall-clock fleet runner."""

from __future__ import annotations

import asyncio
import logging
import time
from typing import Callable

from .collector import Collector
from .config import Topology
from .poe import PoeSwitch, SwitchServer
from .protocol import Command, ProtocolError, decode_command, encode, encode_command
from .sau import Sau
from .simulation import Fault, FaultInjector

log = logging.getLogger(__name__)

DEFAULT_TELEMETRY_PORT = 4547


def wall_ms() -> int:
    return time.time_ns() // 1_000_000


class TelemetryServer:
    """Accepts one connection per SAU; commands go back on the same connection."""

    def __init__(self, collector: Collector, clock: Callable[[], int] = wall_ms):
        self.collector = collector
        self.clock = clock
        self.connections: dict[str, asyncio.StreamWriter] = {}
        self._loop: asyncio.AbstractEventLoop | None = None
        self._server: asyncio.base_events.Server | None = None

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        owner: str | None = None
        try:
            while line := await reader.readline():
                rec = self.collector.ingest_line(line, self.clock())
                if rec is not None and owner != rec.sau_id:
                    owner = rec.sau_id
                    self.connections[owner] = writer
        except (ConnectionError, asyncio.LimitOverrunError, ValueError):
            pass
        finally:
            if owner is not None and self.connections.get(owner) is writer:
                del self.connections[owner]
            writer.close()

    def send_command(self, cmd: Command) -> bool:
        """Queue a command line to the SAU's connection; safe from any thread."""
        writer = self.connections.get(cmd.sau_id)
        if writer is None or self._loop is None or writer.is_closing():
            return False
        self._loop.call_soon_threadsafe(writer.write, encode_command(cmd).encode())
        return True

    async def start(self, host: str = "127.0.0.1", port: int = DEFAULT_TELEMETRY_PORT) -> int:
        self._loop = asyncio.get_running_loop()
        self._server = await asyncio.start_server(self._handle, host, port)
        return self._server.sockets[0].getsockname()[1]

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            for w in list(self.connections.values()):
                w.close()
            await self._server.wait_closed()


async def watchdog_loop(collector: Collector, clock: Callable[[], int] = wall_ms, interval_s: float = 1.0) -> None:
    while True:
        # switch I/O may block; keep it off the event loop
        await asyncio.to_thread(collector.watchdog_tick, clock())
        await asyncio.sleep(interval_s)


class RealtimeFleet:
    """Runs SAU emulators on the wall clock against a collector over TCP,
    with the PoE switch simulator listening on its control port."""

    def __init__(
        self,
        topology: Topology,
        collector_addr: tuple[str, int],
        switch_addr: tuple[str, int],
        faults: list[Fault] | tuple[Fault, ...] = (),
        seed: int | None = None,
        clock: Callable[[], int] = wall_ms,
        tick_s: float = 1.0,
    ):
        self.topology = topology
        self.collector_addr = collector_addr
        self.switch_addr = switch_addr
        self.clock = clock
        self.tick_s = tick_s
        self.start_ms = clock()
        seed = topology.seed if seed is None else seed
        self.saus = {c.sau_id: Sau(c, seed=seed, start_ms=self.start_ms) for c in topology.saus}
        self.injector = FaultInjector(faults, self.saus)
        self.switch = PoeSwitch(topology.switch_ports, listener=self._on_power)
        for c in topology.saus:
            if c.switch_port is not None:
                self.switch.attach(c.switch_port, c.sau_id)
        self._writers: dict[str, asyncio.StreamWriter] = {}
        self.sent = 0

    def _on_power(self, sau_id: str, on: bool, now_ms: int) -> None:
        self.saus[sau_id].set_power(on, now_ms)
        if not on:
            w = self._writers.pop(sau_id, None)
            if w is not None:
                w.close()

    async def _commands(self, sau: Sau, reader: asyncio.StreamReader) -> None:
        try:
            while line := await reader.readline():
                try:
                    cmd = decode_command(line)
                except ProtocolError:
                    continue
                sau.handle_command(cmd, self.clock())
        except ConnectionError:
            pass

    async def _connection(self, sau: Sau) -> asyncio.StreamWriter | None:
        w = self._writers.get(sau.sau_id)
        if w is not None and not w.is_closing():
            return w
        try:
            reader, w = await asyncio.open_connection(*self.collector_addr)
        except OSError as exc:
            log.warning("%s: collector unreachable: %s", sau.sau_id, exc)
            return None
        self._writers[sau.sau_id] = w
        asyncio.create_task(self._commands(sau, reader))
        return w

    async def _run_sau(self, sau: Sau, deadline_ms: int) -> None:
        while (now := self.clock()) < deadline_ms:
            self.injector.apply(round((now - self.start_ms) / 1000.0))
            sau.tick(now)
            if sau.outbox and sau.state.powered and not sau.agent_wedged:
                w = await self._connection(sau)
                if w is not None:
                    lines = [encode(r) for r in sau.drain()]
                    w.write("".join(lines).encode())
                    self.sent += len(lines)
                    try:
                        await w.drain()
                    except ConnectionError:
                        self._writers.pop(sau.sau_id, None)
            await asyncio.sleep(max(0.0, self.tick_s - (self.clock() - now) / 1000.0))

    async def run(self, duration_s: float) -> None:
        server = SwitchServer(self.switch, self.clock)
        srv = await server.serve(*self.switch_addr)
        poller = asyncio.create_task(self._poll_switch())
        try:
            deadline = self.clock() + int(duration_s * 1000)
            await asyncio.gather(*(self._run_sau(s, deadline) for s in self.saus.values()))
        finally:
            poller.cancel()
            srv.close()
            for w in self._writers.values():
                w.close()

    async def _poll_switch(self) -> None:
        while True:
            self.switch.poll(self.clock())
            await asyncio.sleep(0.1)
