import asyncio
import subprocess
import sys

import numpy as np
import pytest
from fastapi.testclient import TestClient

from envmon import cli
from envmon import calibration as cal
from envmon.collector import AlarmRule, Collector
from envmon.config import CollectorSettings
from envmon.netio import RealtimeFleet, TelemetryServer
from envmon.protocol import Command, TelemetryRecord
from envmon.service import create_app

from conftest import EXAMPLE_TOPOLOGY, topology

T0 = 1_700_000_000_000


@pytest.fixture
def collector():
    c = Collector(rules=[AlarmRule("temp_c", max=40, debounce_ticks=1)])
    c.ingest(TelemetryRecord("sau-01", 0, T0, 0, "v1", "heartbeat", 1, "bool"))
    for i in range(20):
        c.ingest(TelemetryRecord("sau-01", i + 1, T0 + i * 1000, 1, "28aa", "temp_c", 20.0 + i, "c"))
    return c


def sweep_csv(n=60):
    d = cal.DeviceConstants(28304, 26409, 299.61)
    poly = cal.poly_from_constants(d)
    t = np.linspace(-39.5, 59.5, n)
    raws = [round(cal.raw_for_temperature(poly, x)) for x in t]
    el = np.arange(n) * (100 / (n - 1)) / 0.19 * 60
    rows = "".join(f"{float(e)!r},{float(cal.compensate(poly, r))!r},{r}\n" for e, r in zip(el, raws))
    return "t_elapsed_s,t_ref_c,t_raw\n" + rows


# -- HTTP service ---------------------------------------------------------------------

def test_status_endpoints(collector):
    with TestClient(create_app(collector)) as client:
        snap = client.get("/status").json()
        assert snap["saus"][0]["state"] == "HEALTHY"
        assert snap["metrics"]["sau-01:1:28aa:temp_c"]["value"] == 39.0
        assert snap["alarms"] == []
        text = client.get("/status.txt").text
        assert text.startswith("sau sau-01 state=HEALTHY")
        assert client.get("/keys").json() == ["sau-01:1:28aa:temp_c"]


def test_query_endpoint(collector):
    with TestClient(create_app(collector)) as client:
        r = client.get("/query/sau-01:1:28aa:temp_c", params={"from": T0, "to": T0 + 4000})
        assert [p["value"] for p in r.json()["points"]] == [20.0, 21.0, 22.0, 23.0, 24.0]
        r = client.get("/query/sau-01:1:28aa:temp_c", params={"max_points": 4})
        assert len(r.json()["points"]) == 4
        assert client.get("/query/nope").status_code == 404
        assert client.get("/query/x", params={"max_points": 0}).status_code == 422


def test_events_endpoint(collector):
    collector.ingest(TelemetryRecord("sau-01", 99, T0 + 99_000, 1, "28aa", "temp_c", 50.0, "c"))
    with TestClient(create_app(collector)) as client:
        ev = client.get("/events", params={"since_ms": T0 + 1}).json()
        assert [e["kind"] for e in ev] == ["alarm"]
        assert client.get("/events", params={"sau_id": "other"}).json() == []


def test_calibration_endpoints(collector):
    with TestClient(create_app(collector)) as client:
        r = client.post("/calib/bme280/fit", json={"csv": sweep_csv()}).json()
        assert (r["d1"], r["d2"], r["d3"]) == pytest.approx((28304, 26409, 299.61), abs=1)
        bad = client.post("/calib/bme280/fit", json={"csv": "t_elapsed_s,t_ref_c,t_raw\n0,20,1\n60,25,2\n"})
        assert bad.status_code == 422
        d = {"factory": [28266, 26340, 50], "new": [28304, 26409, 299.61]}
        r = client.post("/calib/bme280/deviation", json=d).json()
        assert (r["dev_at_lo"], r["dev_at_hi"]) == pytest.approx((0.2495392929635228, -0.068052231965452623), abs=1e-9)
        h = client.get("/bus/health", params={"radius": 10, "sensors": 15, "splitters": 2}).json()
        assert h == {"recovery_time_us": 89.0, "discovery_reliable": True}
        assert client.get("/bus/health", params={"radius": -1, "sensors": 1}).status_code == 422


# -- CLI --------------------------------------------------------------------------------

def test_cli_bus_health(capsys):
    assert cli.main(["bus", "health", "--radius", "10", "--sensors", "15", "--splitters", "2"]) == 0
    assert capsys.readouterr().out == "89 us, OK\n"
    assert cli.main(["bus", "health", "--radius", "50", "--sensors", "15"]) == 0
    assert capsys.readouterr().out == "45 us, CRITICAL\n"


def test_cli_deviation(capsys):
    args = ["calib", "bme280", "deviation", "--factory", "28266,26340,50", "--new", "28304,26409,299.61",
            "--range", "-40:60"]
    assert cli.main(args) == 0
    assert capsys.readouterr().out == "0.2 .. -0.1\n"
    same = ["calib", "bme280", "deviation", "--factory", "1,2,3", "--new", "1,2,3"]
    assert cli.main(same) == 1  # fresh poly cannot reach the range
    assert "error" in capsys.readouterr().err


def test_cli_fit_and_offset(tmp_path, capsys):
    p = tmp_path / "sweep.csv"
    p.write_text(sweep_csv())
    assert cli.main(["calib", "bme280", "fit", str(p)]) == 0
    out = dict(line.split("=") for line in capsys.readouterr().out.split())
    assert float(out["d1"]) == pytest.approx(28304, abs=1)
    assert float(out["max_residual_k"]) < 1e-6
    r = tmp_path / "r.csv"
    r.write_text("temp_c\n20.25\n20.3125\n")
    assert cli.main(["calib", "ds18b20", "offset", str(r), "--ref", "20.0"]) == 0
    assert capsys.readouterr().out.startswith("offset=-0.2812 reference_temp=20 n_samples=2")
    r.write_text("19\n21\n")
    assert cli.main(["calib", "ds18b20", "offset", str(r)]) == 1


def test_cli_fast_ramp_needs_force(tmp_path, capsys):
    p = tmp_path / "fast.csv"
    p.write_text("t_elapsed_s,t_ref_c,t_raw\n0,20,400000\n60,21,401000\n120,22,402500\n")
    assert cli.main(["calib", "bme280", "fit", str(p)]) == 1
    assert "C/min" in capsys.readouterr().err
    assert cli.main(["calib", "bme280", "fit", str(p), "--force"]) == 0


def test_cli_simulate_deterministic(tmp_path, capsys):
    argv = ["simulate", "--topology", str(EXAMPLE_TOPOLOGY), "--duration", "150", "--seed", "3",
            "--fault", "wedge-agent:sau-02:20"]
    assert cli.main(argv) == 0
    first = capsys.readouterr().out
    assert cli.main(argv) == 0
    assert capsys.readouterr().out == first
    assert "sau-02 cycle_sent port=2" in first
    ev = tmp_path / "ev.log"
    assert cli.main(argv + ["--events", str(ev)]) == 0
    assert ev.read_text() == first


def test_cli_usage_and_domain_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["bus", "health", "--radius", "x", "--sensors", "1"])
    assert exc.value.code == 2
    assert cli.main(["simulate", "--topology", str(tmp_path / "missing.toml")]) == 1
    assert cli.main(["simulate", "--topology", str(EXAMPLE_TOPOLOGY), "--fault", "bogus"]) == 1
    assert cli.main(["status", "--server", "http://127.0.0.1:9"]) == 1
    assert "unreachable" in capsys.readouterr().err


def test_cli_entry_point_exit_code():
    r = subprocess.run([sys.executable, "-m", "envmon.cli", "nonsense"], capture_output=True, text=True)
    assert r.returncode == 2 and r.stdout == ""


def test_cli_status_and_query_against_live_service(collector, monkeypatch, capsys):
    import httpx

    client = TestClient(create_app(collector))

    def fake_get(url, params=None, timeout=None):
        return client.get(url.replace("http://collector", ""), params=params)

    monkeypatch.setattr(httpx, "get", fake_get)
    monkeypatch.setenv(cli.SERVER_ENV, "http://collector")
    assert cli.main(["status"]) == 0
    assert "metric sau-01:1:28aa:temp_c" in capsys.readouterr().out
    assert cli.main(["query", "sau-01:1:28aa:temp_c", "--from", str(T0), "--to", str(T0 + 1000), "--csv"]) == 0
    assert capsys.readouterr().out == f"timestamp_ms,value\n{T0},20.0\n{T0 + 1000},21.0\n"
    assert cli.main(["query", "missing:key"]) == 1


# -- real sockets ------------------------------------------------------------------------

def test_fleet_streams_over_tcp_and_receives_commands():
    topo = topology(2, n_ds=2, bme=False)
    collector = Collector()
    server = TelemetryServer(collector)

    async def main():
        port = await server.start("127.0.0.1", 0)
        fleet = RealtimeFleet(topo, ("127.0.0.1", port), ("127.0.0.1", 0), tick_s=0.05)
        task = asyncio.create_task(fleet.run(1.0))
        await asyncio.sleep(0.5)
        delivered = server.send_command(Command("reset", "sau-01"))
        await task
        await server.stop()
        return fleet, delivered

    fleet, delivered = asyncio.run(main())
    assert delivered
    assert collector.counters["heartbeats"] >= 10
    assert fleet.sent == collector.counters["heartbeats"] + collector.counters["records"]
    assert set(collector.health) == {"sau-01", "sau-02"}
    assert len(collector.store.keys()) == 4


def test_service_lifespan_runs_telemetry_listener(tmp_path):
    import socket

    settings = CollectorSettings(telemetry=("127.0.0.1", 0), data_dir=tmp_path, flush_interval_s=0.05)
    from envmon.storage import Store

    collector = Collector(store=Store(tmp_path))
    app = create_app(collector, settings)
    with TestClient(app):
        port = app.state.telemetry._server.sockets[0].getsockname()[1]
        with socket.create_connection(("127.0.0.1", port)) as s:
            s.sendall(b"v1 sau-09 0 1700000000000 1 x temp_c 21.5 c\n")
            s.sendall(b"v1 sau-09 1 1700000000000 0 v1 heartbeat 1 bool\n")
        for _ in range(100):
            if collector.counters["heartbeats"]:
                break
            import time

            time.sleep(0.02)
    assert collector.last_values["sau-09:1:x:temp_c"] == (T0, 21.5)
    assert list(tmp_path.glob("*.rra"))
