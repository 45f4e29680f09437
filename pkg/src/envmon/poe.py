"""Simulated PoE switch with per-port power control, plus clients for it.

Control protocol (one TCP connection, newline-terminated lines)::

    power <port> on|off   -> ok | err <reason>
    cycle <port> <ms>     -> ok | err <reason>   (answered once power is back)
"""

from __future__ import annotations

import asyncio
import logging
import socket
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol

log = logging.getLogger(__name__)

DEFAULT_CONTROL_PORT = 4548
DEFAULT_OFF_MS = 3000


class SwitchError(Exception):
    pass


class NoSuchPort(SwitchError):
    pass


@dataclass
class SwitchPort:
    port_no: int
    powered: bool = True
    attached_sau: str | None = None
    cycle_until_ms: int | None = None


PowerListener = Callable[[str, bool, int], None]


class PoeSwitch:
    """Port power state machine. All mutations are serialised by one lock.

    The switch itself never loses power. ``listener(sau_id, on, now_ms)``
    is called for every transition on a port with an attached SAU.
    """

    def __init__(self, n_ports: int = 24, listener: PowerListener | None = None,
                 log_path: str | Path | None = None):
        self.ports = {n: SwitchPort(n) for n in range(1, n_ports + 1)}
        self.listener = listener
        self.events: list[str] = []
        self.log_path = Path(log_path) if log_path else None
        self._lock = threading.RLock()

    def attach(self, port_no: int, sau_id: str) -> None:
        self._port(port_no).attached_sau = sau_id

    def port_of(self, sau_id: str) -> int | None:
        for p in self.ports.values():
            if p.attached_sau == sau_id:
                return p.port_no
        return None

    def _port(self, port_no: int) -> SwitchPort:
        try:
            return self.ports[port_no]
        except KeyError:
            raise NoSuchPort(f"no such port {port_no}") from None

    def _transition(self, port: SwitchPort, on: bool, now_ms: int) -> None:
        if port.powered == on:
            return
        port.powered = on
        line = f"{now_ms} port{port.port_no} {'on' if on else 'off'} {port.attached_sau or '-'}"
        self.events.append(line)
        if self.log_path is not None:
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
        if self.listener is not None and port.attached_sau is not None:
            self.listener(port.attached_sau, on, now_ms)

    def set_power(self, port_no: int, on: bool, now_ms: int) -> str:
        with self._lock:
            self._transition(self._port(port_no), on, now_ms)
        return "ok"

    def begin_cycle(self, port_no: int, off_ms: int, now_ms: int) -> bool:
        """Switch off now; power returns on :meth:`poll` at ``now_ms + off_ms``.

        A request for a port already mid-cycle joins that cycle and
        returns False.
        """
        with self._lock:
            port = self._port(port_no)
            if port.cycle_until_ms is not None:
                return False
            self._transition(port, False, now_ms)
            port.cycle_until_ms = now_ms + off_ms
            return True

    def cycling(self, port_no: int) -> bool:
        return self._port(port_no).cycle_until_ms is not None

    def poll(self, now_ms: int) -> None:
        with self._lock:
            for port in self.ports.values():
                if port.cycle_until_ms is not None and now_ms >= port.cycle_until_ms:
                    port.cycle_until_ms = None
                    self._transition(port, True, now_ms)

    def handle_line(self, line: str, now_ms: int) -> str:
        """Execute a ``power`` line; ``cycle`` needs waiting and is handled by the server."""
        parts = line.split()
        try:
            if len(parts) == 3 and parts[0] == "power" and parts[2] in ("on", "off"):
                return self.set_power(int(parts[1]), parts[2] == "on", now_ms)
        except NoSuchPort as exc:
            return f"err {exc}"
        except ValueError:
            pass
        return "err malformed"


class SwitchClient(Protocol):
    def power(self, port_no: int, on: bool) -> None: ...

    def cycle(self, port_no: int, off_ms: int = DEFAULT_OFF_MS) -> None: ...


class LocalSwitchClient:
    """In-process client for simulations; ``cycle`` returns at once, power
    comes back when the simulation polls the switch."""

    def __init__(self, switch: PoeSwitch, clock: Callable[[], int]):
        self.switch = switch
        self.clock = clock

    def power(self, port_no: int, on: bool) -> None:
        self.switch.set_power(port_no, on, self.clock())

    def cycle(self, port_no: int, off_ms: int = DEFAULT_OFF_MS) -> None:
        self.switch.begin_cycle(port_no, off_ms, self.clock())


class TcpSwitchClient:
    """Blocking client for the switch control protocol."""

    def __init__(self, host: str = "127.0.0.1", port: int = DEFAULT_CONTROL_PORT,
                 timeout: float = 30.0, wait_cycle: bool = True):
        self.host = host
        self.port = port
        self.timeout = timeout
        # False: cycle() returns once the request is sent; the reply is read in the background
        self.wait_cycle = wait_cycle

    @staticmethod
    def _reply(sock: socket.socket) -> None:
        reply = sock.makefile("r", encoding="utf-8").readline().strip()
        if reply != "ok":
            raise SwitchError(reply or "no reply")

    def _request(self, line: str, wait: bool = True) -> None:
        sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
        try:
            sock.sendall(line.encode() + b"\n")
        except BaseException:
            sock.close()
            raise
        if wait:
            with sock:
                self._reply(sock)
            return

        def finish() -> None:
            with sock:
                try:
                    self._reply(sock)
                except (OSError, SwitchError) as exc:
                    log.warning("switch request %r failed: %s", line, exc)

        threading.Thread(target=finish, daemon=True).start()

    def power(self, port_no: int, on: bool) -> None:
        self._request(f"power {port_no} {'on' if on else 'off'}")

    def cycle(self, port_no: int, off_ms: int = DEFAULT_OFF_MS) -> None:
        self._request(f"cycle {port_no} {off_ms}", wait=self.wait_cycle)


class SwitchServer:
    """asyncio TCP front end for a :class:`PoeSwitch` on the wall clock."""

    def __init__(self, switch: PoeSwitch, clock: Callable[[], int]):
        self.switch = switch
        self.clock = clock
        self._cycles: dict[int, asyncio.Event] = {}

    async def _cycle(self, port_no: int, off_ms: int) -> str:
        done = self._cycles.get(port_no)
        if done is not None:
            await done.wait()
            return "ok"
        try:
            self.switch.begin_cycle(port_no, off_ms, self.clock())
        except NoSuchPort as exc:
            return f"err {exc}"
        done = self._cycles[port_no] = asyncio.Event()
        try:
            await asyncio.sleep(off_ms / 1000)
            while self.switch.cycling(port_no):
                self.switch.poll(self.clock())
                await asyncio.sleep(0.005)
        finally:
            done.set()
            del self._cycles[port_no]
        return "ok"

    async def handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            while line := await reader.readline():
                text = line.decode("utf-8", errors="replace").strip()
                parts = text.split()
                if len(parts) == 3 and parts[0] == "cycle":
                    try:
                        reply = await self._cycle(int(parts[1]), int(parts[2]))
                    except ValueError:
                        reply = "err malformed"
                else:
                    reply = self.switch.handle_line(text, self.clock())
                writer.write(reply.encode() + b"\n")
                await writer.drain()
        except ConnectionError:
            pass
        finally:
            writer.close()

    async def serve(self, host: str = "127.0.0.1", port: int = DEFAULT_CONTROL_PORT) -> asyncio.base_events.Server:
        return await asyncio.start_server(self.handle, host, port)
