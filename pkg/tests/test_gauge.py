import pytest

from avclues.telemetry import Gauge, TelemetryRegistry


class TestGauge:
    def test_set(self, gauge: Gauge):
        gauge.set(0.25)

        assert gauge.values["__"] == 0.25

    def test_set_with_labels(self, gauge: Gauge):
        gauge.set(1.5, labels={"mode": "default", "component": "answer"})

        assert gauge.values['component="answer",mode="default"'] == 1.5

    def test_set_overwrites(self, gauge: Gauge, registry: TelemetryRegistry, redis):
        gauge.set(2.0)
        gauge.set(0.5)
        registry.transfer()

        assert float(redis.hget("testing", "avclues_loss::")) == 0.5

    def test_type_key(self, gauge: Gauge):
        assert gauge.TYPE_KEY == "g"

    def test_reset_keeps_values(self, gauge: Gauge):
        gauge.set(3.0)
        gauge.reset()

        assert gauge.values["__"] == 3.0

    def test_set_without_registry_raises_runtime_error(self):
        gauge = Gauge(name="avclues_learning_rate", description="lr")

        with pytest.raises(RuntimeError):
            gauge.set(1e-3)
