import contextlib
import time
from typing import Dict, List, Optional, Sequence

import attr


NO_LABELS_KEY = "__"
HISTOGRAM_LABEL = "le"
INFINITY_FOR_HISTOGRAM = "+Inf"
TYPE_EXTENSION_LETTER = "t"
DESCRIPTION_EXTENSION_LETTER = "d"


@attr.s
class UpdateAction:
    """
    One pending write to the telemetry store.

    :param key: Store key, ``{metric}:{extension}:{labels}``
    :param value: Value to write or add.
    :param set: Overwrite instead of increment.
    """

    key = attr.ib()
    value = attr.ib()
    set = attr.ib(default=False)


class Metric:
    """
    Base class for run metrics.

    :param name: Metric name
    :param description: Help text
    :param allowed_labels: Label names the metric accepts.
    """

    RESERVED_LABELS = [NO_LABELS_KEY, HISTOGRAM_LABEL]
    INTERNAL_LABELS: List[str] = []
    TYPE_KEY: Optional[str] = None

    def __init__(self, name: str, description: str, allowed_labels: Sequence[str] = None):
        self.name = name
        self.description = description
        self.allowed_labels = self._clean_allowed_labels(allowed_labels)
        self.registry = None
        self.registered_remotely = False

    def add_registry(self, registry) -> None:
        self.registry = registry

    def remove_registry(self) -> None:
        self.registry = None

    def propagate(self, update_actions: List[UpdateAction]) -> None:
        """
        Hands updates to the registry. Type and description travel with the first
        update only.

        :param update_actions: List of update actions
        """
        if not self.registry:
            raise RuntimeError(
                f"Metric {self.name} is not yet registered in a TelemetryRegistry"
            )

        to_propagate = list(update_actions)
        if not self.registered_remotely:
            to_propagate.append(
                UpdateAction(key=self.metric_type_key, value=self.TYPE_KEY, set=True)
            )
            to_propagate.append(
                UpdateAction(
                    key=self.metric_description_key, value=self.description, set=True
                )
            )
            self.registered_remotely = True

        self.registry.update_buffer(to_propagate)

    @property
    def metric_type_key(self) -> str:
        return self.make_key(extension=TYPE_EXTENSION_LETTER)

    @property
    def metric_description_key(self) -> str:
        return self.make_key(extension=DESCRIPTION_EXTENSION_LETTER)

    def _check_labels(self, labels: Dict[str, str]) -> Dict[str, str]:
        for label in labels:
            if label in self.RESERVED_LABELS and label not in self.INTERNAL_LABELS:
                raise ValueError(
                    f"Label name {label} is reserved for metric of class "
                    f"{self.__class__.__name__}"
                )
            if label not in self.allowed_labels and label not in self.INTERNAL_LABELS:
                raise ValueError(
                    f"Label name {label} is not an allowed label in metric {self.name}"
                )
        return labels

    def _clean_allowed_labels(self, labels=None) -> list:
        if not labels:
            return list()

        for label in labels:
            if label in self.RESERVED_LABELS:
                raise ValueError(
                    f"Label name {label} is reserved for metric of class "
                    f"{self.__class__.__name__}"
                )
        return sorted(set(labels))

    def encode_labels(self, labels: Dict[str, str] = None) -> str:
        """
        Encodes labels as ``name="value"`` pairs sorted by name, the Prometheus
        label syntax. No labels encode as NO_LABELS_KEY.
        """
        if not labels:
            return NO_LABELS_KEY

        labels = self._check_labels(labels)
        return ",".join(
            f'{label_name}="{label_value}"'
            for label_name, label_value in sorted(labels.items())
        )

    def make_key(self, extension: str = "", labels: str = "") -> str:
        if labels == NO_LABELS_KEY:
            labels = ""
        return f"{self.name}:{extension}:{labels}"


class Counter(Metric):
    """Monotonically increasing count, e.g. optimizer steps."""

    TYPE_KEY = "c"

    def __init__(self, name, description, allowed_labels=None):
        super().__init__(name, description, allowed_labels)
        self.counts = {NO_LABELS_KEY: 0}

    def inc(self, value=1, labels: Dict[str, str] = None) -> None:
        if value < 0:
            raise ValueError(
                f"A Counter cannot decrease, got negative increment {value}"
            )

        key = self.encode_labels(labels)
        self.counts[key] = self.counts.get(key, 0) + value
        self.propagate([UpdateAction(key=self.make_key(labels=key), value=value)])

    def reset(self) -> None:
        self.counts = {NO_LABELS_KEY: 0}


class Gauge(Metric):
    """Last observed value, e.g. the current learning rate or a loss component."""

    TYPE_KEY = "g"

    def __init__(self, name, description, allowed_labels=None):
        super().__init__(name, description, allowed_labels)
        self.values = dict()

    def set(self, value, labels: Dict[str, str] = None) -> None:
        key = self.encode_labels(labels)
        self.values[key] = value
        self.propagate(
            [UpdateAction(key=self.make_key(labels=key), value=value, set=True)]
        )

    def reset(self) -> None:
        """A gauge keeps its last value across transfers."""


class Histogram(Metric):
    """
    Cumulative bucket counts plus sum and count of observations, e.g. epoch
    durations. Buckets are exposed with the ``le`` label; ``+Inf`` is always
    present.
    """

    INTERNAL_LABELS = [HISTOGRAM_LABEL]
    TYPE_KEY = "h"

    def __init__(self, name, description, buckets: Sequence[float], allowed_labels=None):
        super().__init__(name, description, allowed_labels)
        if not buckets:
            raise ValueError(f"Histogram {name} needs at least one bucket")
        self.buckets = sorted(buckets)
        self.reset()

    def observe(self, value: float, labels: Dict[str, str] = None) -> None:
        labels = dict(labels or {})
        updates = list()

        for bucket in [*self.buckets, INFINITY_FOR_HISTOGRAM]:
            if bucket == INFINITY_FOR_HISTOGRAM or value <= bucket:
                key = self.encode_labels({**labels, HISTOGRAM_LABEL: bucket})
                self.counts[key] = self.counts.get(key, 0) + 1
                updates.append(UpdateAction(key=self.make_key("b", key), value=1))

        label_key = self.encode_labels(labels)
        self.sum[label_key] = self.sum.get(label_key, 0) + value
        self.total_count[label_key] = self.total_count.get(label_key, 0) + 1
        updates.append(UpdateAction(key=self.make_key("s", label_key), value=float(value)))
        updates.append(UpdateAction(key=self.make_key("c", label_key), value=1))

        self.propagate(updates)

    def reset(self) -> None:
        self.counts = dict()
        self.sum = dict()
        self.total_count = dict()


class timer(contextlib.ContextDecorator):
    """
    Times a block or function and observes the duration in seconds on a
    Histogram.

    :param metric: Histogram
    :param labels: Metric labels
    """

    def __init__(self, *, metric: Histogram, labels: Dict[str, str] = None):
        self.metric = metric
        self.labels = labels
        self.start_time = None

    def __enter__(self):
        self.start_time = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.metric.observe(time.perf_counter() - self.start_time, labels=self.labels)
        return False
