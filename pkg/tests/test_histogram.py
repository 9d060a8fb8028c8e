import time

import pytest

from avclues.telemetry import Histogram, timer


class TestHistogram:
    def test_observe_1(self, histogram: Histogram):
        histogram.observe(0.22)

        assert histogram.sum["__"] == 0.22
        assert 'le="0.2"' not in histogram.counts
        assert histogram.counts['le="0.4"'] == 1
        assert histogram.counts['le="0.8"'] == 1
        assert histogram.counts['le="1.6"'] == 1
        assert histogram.counts['le="+Inf"'] == 1
        assert histogram.total_count["__"] == 1

    def test_observe_2(self, histogram: Histogram):
        histogram.observe(0.22)
        histogram.observe(0.78)

        assert histogram.sum["__"] == pytest.approx(1.0)
        assert histogram.counts['le="0.4"'] == 1
        assert histogram.counts['le="0.8"'] == 2
        assert histogram.counts['le="+Inf"'] == 2
        assert histogram.total_count["__"] == 2

    def test_observe_with_labels(self, histogram: Histogram):
        histogram.observe(0.22, labels={"mode": "default"})
        histogram.observe(0.78, labels={"mode": "default"})

        assert histogram.sum['mode="default"'] == pytest.approx(1.0)
        assert histogram.counts['le="0.4",mode="default"'] == 1
        assert histogram.counts['le="0.8",mode="default"'] == 2
        assert histogram.counts['le="+Inf",mode="default"'] == 2

    def test_above_every_bucket_counts_only_inf(self, histogram: Histogram):
        histogram.observe(100.0)

        assert histogram.counts == {'le="+Inf"': 1}

    def test_reset(self, histogram: Histogram):
        histogram.observe(0.3)
        histogram.reset()

        assert histogram.counts == dict()
        assert histogram.sum == dict()

    def test_needs_buckets(self):
        with pytest.raises(ValueError):
            Histogram(name="x", description="x", buckets=[])


class TestTimer:
    def test_as_decorator(self, histogram: Histogram):
        @timer(metric=histogram)
        def time_it():
            time.sleep(0.0001)

        time_it()

        assert histogram.sum["__"] > 0
        assert histogram.counts['le="+Inf"'] == 1

    def test_as_context_manager_with_labels(self, histogram: Histogram):
        with timer(metric=histogram, labels={"mode": "default"}):
            time.sleep(0.0001)

        assert histogram.total_count['mode="default"'] == 1
