"""probekit: build, run, collect and inspect host telemetry experiments."""

__version__ = "0.1.0"
