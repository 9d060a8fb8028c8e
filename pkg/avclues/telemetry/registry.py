import logging
from contextlib import contextmanager
from typing import Dict, List

from avclues.telemetry.metrics import Metric, UpdateAction

logger = logging.getLogger(__name__)


class TelemetryRegistry:
    """
    Holds the metrics of a run and buffers their updates. ``transfer`` moves the
    buffer into a Redis hash named after the namespace, or into an in-process
    store when no Redis client is given.

    :param redis_client: Optional Redis client.
    :param namespace: Redis hash name.
    :param eager: Transfer after every update.
    """

    def __init__(self, redis_client=None, namespace: str = "avclues", eager: bool = False):
        self.redis = redis_client
        self.namespace = namespace
        self.eager = eager
        self.metrics: Dict[str, Metric] = dict()
        self.buffer: Dict[str, UpdateAction] = dict()
        self.local_store: Dict[str, object] = dict()

    def register(self, metric: Metric) -> Metric:
        if metric.name in self.metrics:
            raise ValueError(f"Metric {metric.name} is already registered")
        self.metrics[metric.name] = metric
        metric.add_registry(self)
        return metric

    def unregister(self, metric: Metric) -> None:
        del self.metrics[metric.name]
        metric.remove_registry()

    def update_buffer(self, to_update: List[UpdateAction]) -> None:
        """
        Merges updates into the buffer. Increments to a buffered key add up; a
        set replaces whatever was buffered for its key.
        """
        for item in to_update:
            pending = self.buffer.get(item.key)
            if pending is None or item.set:
                self.buffer[item.key] = UpdateAction(item.key, item.value, item.set)
            else:
                pending.value += item.value

        if self.eager:
            self.transfer()

    def transfer(self) -> None:
        """Writes the buffer to the store and clears it."""
        if not self.buffer:
            return

        set_actions = [action for action in self.buffer.values() if action.set]
        incr_actions = [action for action in self.buffer.values() if not action.set]

        if self.redis is None:
            for action in set_actions:
                self.local_store[action.key] = action.value
            for action in incr_actions:
                self.local_store[action.key] = self.local_store.get(action.key, 0) + action.value
        else:
            with self.pipe() as pipe:
                if set_actions:
                    pipe.hset(
                        self.namespace,
                        mapping={action.key: action.value for action in set_actions},
                    )
                for action in incr_actions:
                    if isinstance(action.value, int):
                        pipe.hincrby(self.namespace, action.key, action.value)
                    else:
                        pipe.hincrbyfloat(self.namespace, action.key, action.value)

        logger.debug("Transferred %d telemetry updates", len(self.buffer))
        self.buffer = dict()

    def snapshot(self) -> Dict[str, str]:
        """Current store content as string keys and values."""
        if self.redis is None:
            return {key: str(value) for key, value in self.local_store.items()}
        return {
            key.decode(): value.decode()
            for key, value in self.redis.hgetall(self.namespace).items()
        }

    @contextmanager
    def pipe(self):
        pipe = self.redis.pipeline()
        yield pipe
        pipe.execute()
