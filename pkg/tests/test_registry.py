import pytest
from redislite import StrictRedis

from avclues.telemetry import Counter, Gauge, Histogram, TelemetryRegistry, expose, expose_redis
from avclues.telemetry.metrics import UpdateAction


class TestTelemetryRegistry:
    def test_register_counter(self, registry: TelemetryRegistry):
        counter = Counter(name="avclues_train_steps_total", description="Steps")
        registry.register(counter)

        assert registry.metrics[counter.name] == counter
        assert counter.registry == registry

    def test_register_twice_raises_value_error(self, registry: TelemetryRegistry):
        registry.register(Counter(name="steps", description="Steps"))

        with pytest.raises(ValueError):
            registry.register(Counter(name="steps", description="Steps"))

    def test_unregister(self, registry: TelemetryRegistry):
        gauge = Gauge(name="avclues_learning_rate", description="lr")
        registry.register(gauge)
        registry.unregister(gauge)

        with pytest.raises(KeyError):
            registry.metrics[gauge.name]
        assert gauge.registry is None

    def test_not_eager(self, registry: TelemetryRegistry, redis: StrictRedis):
        counter = registry.register(Counter(name="steps", description="Steps"))
        counter.inc()

        assert redis.hgetall("testing") == {}

        registry.transfer()

        assert redis.hgetall("testing") != {}
        assert registry.buffer == {}

    def test_eager(self, registry: TelemetryRegistry, redis: StrictRedis):
        registry.eager = True
        counter = registry.register(Counter(name="steps", description="Steps"))
        counter.inc()

        assert redis.hget("testing", "steps::") == b"1"

    def test_update_buffer_adds_increments(self, registry: TelemetryRegistry):
        registry.update_buffer([UpdateAction(key="k", value=1)])
        registry.update_buffer([UpdateAction(key="k", value=2)])

        assert registry.buffer["k"].value == 3

    def test_set_replaces_buffered_value(self, registry: TelemetryRegistry):
        registry.update_buffer([UpdateAction(key="k", value=1)])
        registry.update_buffer([UpdateAction(key="k", value=7, set=True)])

        assert registry.buffer["k"] == UpdateAction(key="k", value=7, set=True)

    def test_type_and_description_sent_once(self, registry: TelemetryRegistry, redis: StrictRedis):
        counter = registry.register(Counter(name="steps", description="Optimizer steps"))
        counter.inc()
        counter.inc()
        registry.transfer()

        assert redis.hget("testing", "steps:t:") == b"c"
        assert redis.hget("testing", "steps:d:") == b"Optimizer steps"
        assert redis.hget("testing", "steps::") == b"2"


class TestLocalStore:
    def test_transfer_without_redis(self, local_registry: TelemetryRegistry):
        gauge = local_registry.register(Gauge(name="avclues_learning_rate", description="lr"))
        gauge.set(1e-3)
        local_registry.transfer()

        assert local_registry.snapshot()["avclues_learning_rate::"] == "0.001"

    def test_local_and_redis_exposition_match(self, local_registry: TelemetryRegistry, registry: TelemetryRegistry, redis: StrictRedis):
        for target in (local_registry, registry):
            counter = target.register(
                Counter(name="avclues_train_steps_total", description="Steps", allowed_labels=["mode"])
            )
            counter.inc(4, labels={"mode": "default"})
            target.transfer()

        assert expose(local_registry.snapshot()) == expose_redis(redis, "testing")


class TestExposition:
    def test_counter(self, local_registry: TelemetryRegistry):
        counter = local_registry.register(
            Counter(name="avclues_train_steps_total", description="Steps", allowed_labels=["mode"])
        )
        counter.inc(4, labels={"mode": "default"})
        local_registry.transfer()

        text = expose(local_registry.snapshot())

        assert "# HELP avclues_train_steps_total Steps" in text
        assert "# TYPE avclues_train_steps_total counter" in text
        assert 'avclues_train_steps_total{mode="default"} 4' in text

    def test_histogram(self, local_registry: TelemetryRegistry):
        histogram = local_registry.register(
            Histogram(name="avclues_epoch_seconds", description="Epoch time", buckets=[1.0, 5.0])
        )
        histogram.observe(2.0)
        local_registry.transfer()

        text = expose(local_registry.snapshot())

        assert "# TYPE avclues_epoch_seconds histogram" in text
        assert 'avclues_epoch_seconds_bucket{le="5.0"} 1' in text
        assert 'avclues_epoch_seconds_bucket{le="+Inf"} 1' in text
        assert "avclues_epoch_seconds_count 1" in text
        assert "avclues_epoch_seconds_sum 2.0" in text
        assert 'le="1.0"' not in text

    def test_empty_store(self):
        assert expose({}) == ""
