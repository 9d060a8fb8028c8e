import pytest

from avclues.telemetry import Counter, TelemetryRegistry


class TestCounter:
    def test_inc_by_1(self, counter: Counter):
        counter.inc()

        assert counter.counts["__"] == 1

    def test_inc_by_steps(self, counter: Counter):
        counter.inc(12)

        assert counter.counts["__"] == 12

    def test_inc_with_labels(self, counter: Counter):
        counter.inc(3, labels={"mode": "default", "split": "train"})

        assert counter.counts['mode="default",split="train"'] == 3

    def test_labels_in_different_order_increase_same_count(self, counter: Counter):
        counter.inc(3, labels={"mode": "default", "split": "train"})
        counter.inc(3, labels={"split": "train", "mode": "default"})

        assert counter.counts['mode="default",split="train"'] == 6

    def test_inc_without_registry_raises_runtime_error(self):
        counter = Counter(name="avclues_train_steps_total", description="Steps")

        with pytest.raises(RuntimeError):
            counter.inc()

    def test_type_key(self, counter: Counter):
        assert counter.TYPE_KEY == "c"

    def test_reset(self, counter: Counter):
        counter.inc(3, labels={"mode": "default"})
        counter.reset()

        assert counter.counts == {"__": 0}

    def test_inc_by_negative_raises_value_error(self, counter: Counter):
        with pytest.raises(ValueError):
            counter.inc(-1)

    def test_unknown_label_raises_value_error(self, counter: Counter):
        with pytest.raises(ValueError):
            counter.inc(labels={"epoch": "3"})

    def test_reserved_label_raises_value_error(self, counter: Counter):
        with pytest.raises(ValueError):
            counter.inc(labels={"le": "1"})

    def test_creating_counter_with_reserved_label_raises_value_error(self):
        with pytest.raises(ValueError):
            Counter(name="test", description="test", allowed_labels=["le"])

    def test_increments_add_up_in_the_store(self, counter: Counter, registry: TelemetryRegistry, redis):
        counter.inc(2)
        registry.transfer()
        counter.inc(5)
        registry.transfer()

        assert redis.hget("testing", "avclues_train_steps_total::") == b"7"
