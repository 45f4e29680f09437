"""``envmon`` command line.

Exit status: 0 on success, 1 on a domain error, 2 on a usage error.
Machine-readable output goes to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import asyncio
import logging
import os
import sys
from pathlib import Path

from . import calibration as cal
from .onewire import BusTopology, bus_health

log = logging.getLogger("envmon")

SERVER_ENV = "ENVMON_SERVER"


class DomainError(Exception):
    pass


def _fmt(x: float) -> str:
    return f"{round(x, 1) + 0.0:.1f}"


# -- calib ----------------------------------------------------------------------

def cmd_calib_fit(args) -> int:
    sweep = cal.ChamberSweep.read_csv(args.sweep, force=args.force)
    poly = cal.fit_poly(sweep)
    d = cal.constants_from_poly(poly)
    sys.stdout.write(cal.format_report(d, cal.max_residual(poly, sweep)))
    return 0


def _range(text: str) -> tuple[float, float]:
    lo, sep, hi = text.partition(":")
    if not sep:
        raise argparse.ArgumentTypeError("range must be lo:hi")
    return float(lo), float(hi)


def cmd_calib_deviation(args) -> int:
    lo, hi = cal.deviation_range(args.factory, args.new, *args.range)
    print(f"{_fmt(lo)} .. {_fmt(hi)}")
    return 0


def cmd_calib_offset(args) -> int:
    groups = cal.read_offset_csv(args.readings)
    if not groups:
        raise cal.EmptyReadings(f"{args.readings}: no readings")
    for sensor, values in groups.items():
        oc = cal.ds18b20_offset(values, args.ref)
        prefix = "" if sensor == "-" else f"sensor_id={sensor} "
        print(f"{prefix}offset={oc.offset:.4f} reference_temp={oc.reference_temp:g} n_samples={oc.n_samples}")
    return 0


# -- bus ------------------------------------------------------------------------

def cmd_bus_health(args) -> int:
    h = bus_health(BusTopology(args.radius, args.sensors, args.splitters))
    print(f"{h.recovery_time_us:g} us, {'OK' if h.discovery_reliable else 'CRITICAL'}")
    return 0


# -- simulate / collect ---------------------------------------------------------

def _parse_faults(specs):
    from .simulation import Fault

    return [Fault.parse(s) for s in specs]


def _hostport(text: str, default_port: int) -> tuple[str, int]:
    from .config import _hostport as hp

    return hp(text, default_port)


def cmd_simulate(args) -> int:
    from . import config
    from .simulation import Simulation

    topo = config.load(args.topology)
    faults = _parse_faults(list(topo.faults) + list(args.fault or []))
    duration = args.duration if args.duration is not None else topo.duration_s
    if args.collector:
        from .netio import RealtimeFleet

        fleet = RealtimeFleet(
            topo,
            _hostport(args.collector, 4547),
            _hostport(args.switch_listen, 4548),
            faults=faults,
            seed=args.seed,
        )
        asyncio.run(fleet.run(duration))
        print(f"sent {fleet.sent} records")
        return 0
    if args.events:
        Path(args.events).unlink(missing_ok=True)
    if args.switch_log:
        Path(args.switch_log).unlink(missing_ok=True)
    sim = Simulation(topo, faults, seed=args.seed, event_log=args.events, switch_log=args.switch_log)
    try:
        sim.run(duration)
    finally:
        sim.close()
    if not args.events:
        for line in sim.event_lines():
            print(line)
    else:
        print(f"ticks={sim.ticks} records={sim.delivered} events={len(sim.collector.events)}")
    return 0


def cmd_collect(args) -> int:
    import uvicorn

    from . import config
    from .collector import Collector
    from .poe import TcpSwitchClient
    from .service import create_app, webhook_notifier
    from .storage import Store

    topo = config.load(args.config)
    s = topo.collector
    collector = Collector(
        watchdog=topo.watchdog,
        rules=topo.rules,
        store=Store(s.data_dir, topo.tiers),
        switch_client=TcpSwitchClient(*s.switch, timeout=5.0, wait_cycle=False),
        switch_ports=topo.switch_map,
        event_log=s.event_log,
        notifier=webhook_notifier(s.webhook) if s.webhook else None,
    )
    from .netio import wall_ms

    now = wall_ms()
    for sau in topo.saus:
        collector.register(sau.sau_id, now)
    app = create_app(collector, s)
    uvicorn.run(app, host=s.http[0], port=s.http[1], log_level="warning")
    return 0


# -- thin HTTP clients ----------------------------------------------------------

def _server(args) -> str:
    if args.server:
        return args.server.rstrip("/")
    if os.environ.get(SERVER_ENV):
        return os.environ[SERVER_ENV].rstrip("/")
    try:
        from . import config

        host, port = config.load(args.config).collector.http
    except (ValueError, OSError):
        host, port = "127.0.0.1", 8047
    return f"http://{host}:{port}"


def _get(args, path: str, params=None):
    import httpx

    url = _server(args) + path
    try:
        r = httpx.get(url, params=params, timeout=10.0)
    except httpx.HTTPError as exc:
        raise DomainError(f"collector at {url} unreachable: {exc}") from None
    if r.status_code == 404:
        raise DomainError(r.json().get("detail", "not found"))
    r.raise_for_status()
    return r


def cmd_status(args) -> int:
    sys.stdout.write(_get(args, "/status.txt").text)
    return 0


def cmd_query(args) -> int:
    from urllib.parse import quote

    params = {"from": args.t_from, "to": args.t_to, "max_points": args.max_points}
    data = _get(args, f"/query/{quote(args.key, safe='')}", params).json()
    if args.csv:
        print("timestamp_ms,value")
    for p in data["points"]:
        v = repr(float(p["value"]))
        print(f"{p['timestamp_ms']},{v}" if args.csv else f"{p['timestamp_ms']} {v}")
    return 0


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="envmon", description="HPC environment monitoring toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("collect", help="run collector, watchdog and storage until signalled")
    c.add_argument("--config", default=None, help="config file (default: $ENVMON_CONFIG)")
    c.set_defaults(func=cmd_collect)

    s = sub.add_parser("simulate", help="run a simulated SAU fleet")
    s.add_argument("--topology", default=None, help="topology file (default: $ENVMON_CONFIG)")
    s.add_argument("--fault", action="append", metavar="SPEC")
    s.add_argument("--duration", type=float, default=None, help="simulated seconds")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--events", default=None, help="write collector event log here instead of stdout")
    s.add_argument("--switch-log", default=None)
    s.add_argument("--collector", default=None, metavar="HOST:PORT",
                   help="stream to a running collector on the wall clock")
    s.add_argument("--switch-listen", default="127.0.0.1:4548", metavar="HOST:PORT")
    s.set_defaults(func=cmd_simulate)

    cal_p = sub.add_parser("calib", help="sensor calibration").add_subparsers(dest="sensor", required=True)
    bme = cal_p.add_parser("bme280").add_subparsers(dest="action", required=True)
    fit = bme.add_parser("fit", help="refit device constants from a chamber sweep")
    fit.add_argument("sweep")
    fit.add_argument("--force", action="store_true", help="accept ramps faster than 0.2 C/min")
    fit.set_defaults(func=cmd_calib_fit)
    dev = bme.add_parser("deviation", help="factory-calibration error at the range endpoints")
    dev.add_argument("--factory", type=cal.DeviceConstants.parse, required=True, metavar="D1,D2,D3")
    dev.add_argument("--new", type=cal.DeviceConstants.parse, required=True, metavar="D1,D2,D3")
    dev.add_argument("--range", type=_range, default=(-40.0, 60.0), metavar="LO:HI")
    dev.set_defaults(func=cmd_calib_deviation)
    ds = cal_p.add_parser("ds18b20").add_subparsers(dest="action", required=True)
    off = ds.add_parser("offset", help="offset at a stable reference bath")
    off.add_argument("readings")
    off.add_argument("--ref", type=float, default=20.0)
    off.set_defaults(func=cmd_calib_offset)

    bus = sub.add_parser("bus", help="OneWire diagnostics").add_subparsers(dest="action", required=True)
    bh = bus.add_parser("health", help="recovery time and discovery verdict")
    bh.add_argument("--radius", type=float, required=True)
    bh.add_argument("--sensors", type=int, required=True)
    bh.add_argument("--splitters", type=int, default=0)
    bh.set_defaults(func=cmd_bus_health)

    for name, func in (("status", cmd_status), ("query", cmd_query)):
        q = sub.add_parser(name)
        q.add_argument("--server", default=None, help=f"collector URL (default: ${SERVER_ENV} or config)")
        q.add_argument("--config", default=None)
        q.set_defaults(func=func)
        if name == "query":
            q.add_argument("key", help="sau_id:port:sensor_id:metric")
            q.add_argument("--from", dest="t_from", type=int, default=0)
            q.add_argument("--to", dest="t_to", type=int, default=2**62)
            q.add_argument("--max-points", type=int, default=1000)
            q.add_argument("--csv", action="store_true")
    return p


def _glue_negative_values(argv: list[str]) -> list[str]:
    # "--range -40:60" would otherwise read -40:60 as an option
    out = []
    it = iter(argv)
    for a in it:
        if a in ("--range", "--factory", "--new", "--from", "--to", "--ref"):
            nxt = next(it, None)
            out.append(a if nxt is None else f"{a}={nxt}")
        else:
            out.append(a)
    return out


def main(argv: list[str] | None = None) -> int:
    argv = _glue_negative_values(list(sys.argv[1:] if argv is None else argv))
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (DomainError, ValueError, OSError, LookupError) as exc:
        print(f"envmon: error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 0


if __name__ == "__main__":
    sys.exit(main())
