import sys
from pathlib import Path

import pytest

from envmon.calibration import DeviceConstants
from envmon.config import Topology
from envmon.sau import SauConfig, SensorConfig
from envmon.sensors import SensorKind

sys.path.insert(0, str(Path(__file__).parent))

ROOT = Path(__file__).resolve().parent.parent
EXAMPLE_TOPOLOGY = ROOT / "config" / "example-topology.toml"


def sau_config(sau_id="sau-01", switch_port=1, n_ds=4, bme=True, leak=False, **kw):
    sensors = [SensorConfig(SensorKind.DS18B20, port=1) for _ in range(n_ds)]
    if bme:
        sensors.append(SensorConfig(SensorKind.BME280, port=7, constants=DeviceConstants(28469, 26034, 753.63)))
    if leak:
        sensors.append(SensorConfig(SensorKind.LEAK, port=4, signal="analog"))
    return SauConfig(sau_id, sensors=sensors, switch_port=switch_port, **kw)


def topology(n_saus=1, **kw):
    return Topology(
        saus=[sau_config(f"sau-{i + 1:02d}", switch_port=i + 1, **kw) for i in range(n_saus)],
        switch_ports=max(24, n_saus),
    )


@pytest.fixture
def topo():
    return topology(2)


# criterion number -> verdict line, filled by test_acceptance
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
