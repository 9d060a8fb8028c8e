"""Prometheus text exposition of a telemetry store."""
from itertools import groupby
from typing import Dict, Iterable, List, Tuple

import attr

METRIC_TYPES = {"c": "counter", "g": "gauge", "h": "histogram"}
VALUE_SUFFIXES = {"b": "bucket", "c": "count", "s": "sum"}


@attr.s(frozen=True, order=True)
class StoreItem:
    key: str = attr.ib()
    value: str = attr.ib()


@attr.s
class MetricValue:
    suffix = attr.ib()
    labels = attr.ib()
    value = attr.ib()


@attr.s
class MetricSet:
    """All store entries of one metric."""

    name: str = attr.ib()
    description: str = attr.ib(default=None)
    type: str = attr.ib(default=None)
    values: List[MetricValue] = attr.ib(default=attr.Factory(list))

    def add_item(self, item: StoreItem) -> None:
        extension, labels = self._split_key(item.key)

        if extension == "d":
            self.description = item.value
        elif extension == "t":
            self.type = METRIC_TYPES.get(item.value)
        else:
            self.values.append(
                MetricValue(
                    suffix=VALUE_SUFFIXES.get(extension), labels=labels, value=item.value
                )
            )

    @staticmethod
    def _split_key(key: str) -> Tuple[str, str]:
        _, extension, labels = key.split(":", 2)
        return extension, labels

    def render(self) -> str:
        lines = [f"# HELP {self.name} {self.description}", f"# TYPE {self.name} {self.type}"]
        for value in self.values:
            name = f"{self.name}_{value.suffix}" if value.suffix else self.name
            if value.labels:
                name = f"{name}{{{value.labels}}}"
            lines.append(f"{name} {value.value}")
        return "\n".join(lines) + "\n"


def parse_store(items: Iterable[StoreItem]) -> List[MetricSet]:
    metrics = list()
    for name, group in groupby(sorted(items), key=lambda item: item.key.split(":")[0]):
        metric = MetricSet(name=name)
        for item in group:
            metric.add_item(item)
        metrics.append(metric)
    return metrics


def expose(store: Dict[str, str]) -> str:
    """
    Formats a store snapshot (see ``TelemetryRegistry.snapshot``) in the
    Prometheus text format, metrics sorted by name.
    """
    metrics = parse_store(StoreItem(key, value) for key, value in store.items())
    return "\n".join(metric.render() for metric in metrics)


def expose_redis(redis_client, namespace: str) -> str:
    results = redis_client.hgetall(namespace)
    return expose({key.decode(): value.decode() for key, value in results.items()})
