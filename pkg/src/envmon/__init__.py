"""Environment monitoring for HPC rooms: sensor emulation, telemetry collection,
watchdog escalation, round-robin storage and sensor calibration."""

__version__ = "0.1.0"
