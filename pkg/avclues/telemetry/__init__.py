from avclues.telemetry.registry import TelemetryRegistry

from avclues.telemetry.metrics import Counter, Gauge, Histogram, timer
from avclues.telemetry.exposition import expose, expose_redis

__all__ = [
    "TelemetryRegistry",
    "Counter",
    "Gauge",
    "Histogram",
    "timer",
    "expose",
    "expose_redis",
]
