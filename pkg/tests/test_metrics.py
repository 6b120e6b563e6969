"""
Тесты агрегации: перцентили, стабильный период, пропускная способность, потери, сводка
"""

import random
import unittest
from pathlib import Path

from mqbench.core import (
    ConnectionEvent,
    ConnectionEventKind,
    EmptySampleSet,
    ExperimentSpec,
    LatencySample,
    NoEvents,
    ScenarioType,
    TransportKind,
    UnknownTopic,
)
from mqbench.metrics import (
    StableMode,
    StablePeriod,
    compute_loss,
    compute_throughput,
    detect_stable_period,
    latency_stats,
    memory_mb,
    nearest_rank,
    percentiles,
    summarize,
)
from mqbench.parser import read_connections
from mqbench.resmon import ResourceSample

from tests.helpers import NS

FIXTURES = Path(__file__).parent / "fixtures"
BASE = 1_700_000_000 * NS
MS = 1_000_000


def connect_event(client_id: str, ts_ns: int) -> ConnectionEvent:
    return ConnectionEvent(client_id, ConnectionEventKind.CONNECT, ts_ns)


def sample(topic: str, seq: int, recv_ts_ns: int, latency_ns: int = 1 * MS) -> LatencySample:
    return LatencySample(topic, seq, recv_ts_ns - latency_ns, recv_ts_ns, latency_ns, 64)


# =============================================================================
# ТЕСТЫ ПЕРЦЕНТИЛЕЙ
# =============================================================================

class TestPercentiles(unittest.TestCase):

    def test_nearest_rank_by_hand(self):
        values = [10, 20, 30, 40, 50, 60, 70, 80, 90, 100]
        self.assertEqual(percentiles(values, [50, 95]), [50, 100])

    def test_single_sample(self):
        self.assertEqual(percentiles([7], [0, 50, 99.9, 100]), [7, 7, 7, 7])

    def test_rank_is_exact_for_fractional_q(self):
        self.assertEqual(nearest_rank(99.9, 10000), 9990)
        self.assertEqual(nearest_rank(0, 10), 1)

    def test_matches_sort_oracle(self):
        rng = random.Random(42)
        values = [rng.randint(0, 10 ** 9) for _ in range(10000)]
        ordered = sorted(values)
        n = len(ordered)
        for q in (1, 50, 95, 99):
            expected = ordered[(q * n + 99) // 100 - 1]
            self.assertEqual(percentiles(values, [q]), [expected], q)

    def test_empty(self):
        with self.assertRaises(EmptySampleSet):
            percentiles([], [50])
        with self.assertRaises(EmptySampleSet):
            latency_stats([])

    def test_latency_stats(self):
        stats = latency_stats([1, 2, 3, 4])
        self.assertEqual((stats.min_ns, stats.max_ns), (1, 4))
        self.assertEqual(stats.mean_ns, 2.5)
        self.assertAlmostEqual(stats.stddev_ns, 1.118033988749895)
        self.assertEqual(stats.p50_ns, 2)


# =============================================================================
# ТЕСТЫ СТАБИЛЬНОГО ПЕРИОДА
# =============================================================================

class TestStablePeriod(unittest.TestCase):

    def test_all_connected(self):
        events = [connect_event(f"c{i}", BASE + (i + 1) * 120 * MS) for i in range(100)]
        period = detect_stable_period(events, 100, BASE, BASE + 132 * NS)
        self.assertEqual(period.start_ns, BASE + 12 * NS)
        self.assertEqual(period.end_ns, BASE + 132 * NS)
        self.assertEqual(period.detection_mode, StableMode.ALL_CONNECTED)
        self.assertIsNone(period.warning)

    def test_saturation_plateau_fixture(self):
        events = read_connections(FIXTURES / "plateau_connections.csv")
        self.assertEqual(len(events), 950)
        period = detect_stable_period(events, 1000, BASE, BASE + 132 * NS, plateau_window_s=10)
        self.assertEqual(period.start_ns, BASE + 30 * NS)
        self.assertEqual(period.end_ns, BASE + 132 * NS)
        self.assertEqual(period.detection_mode, StableMode.SATURATION_PLATEAU)
        self.assertEqual(period.connected_at_start, 950)

    def test_fallback_to_final_window(self):
        events = [connect_event(f"c{t % 5}", BASE + t * NS) for t in range(132)]
        events += [ConnectionEvent(f"c{t % 5}", ConnectionEventKind.DISCONNECT, BASE + t * NS + 1)
                   for t in range(132)]
        period = detect_stable_period(events, 10, BASE, BASE + 132 * NS, plateau_window_s=10)
        self.assertEqual(period.start_ns, BASE + 122 * NS)
        self.assertIsNotNone(period.warning)

    def test_disconnects_lower_the_count(self):
        events = [
            connect_event("a", BASE + 1 * NS),
            ConnectionEvent("a", ConnectionEventKind.DISCONNECT, BASE + 2 * NS),
            connect_event("b", BASE + 3 * NS),
            ConnectionEvent("a", ConnectionEventKind.RECONNECT, BASE + 4 * NS),
        ]
        period = detect_stable_period(events, 2, BASE, BASE + 60 * NS)
        self.assertEqual(period.start_ns, BASE + 4 * NS)

    def test_events_after_run_end_ignored(self):
        with self.assertRaises(NoEvents):
            detect_stable_period([connect_event("a", BASE + 10 * NS)], 1, BASE, BASE + 5 * NS)


# =============================================================================
# ТЕСТЫ ПРОПУСКНОЙ СПОСОБНОСТИ И ПОТЕРЬ
# =============================================================================

class TestThroughputAndLoss(unittest.TestCase):

    def test_uniform_samples(self):
        period = StablePeriod(BASE, BASE + 180 * NS, StableMode.ALL_CONNECTED, 20)
        samples = [sample("t", i, BASE + i * 10 * MS) for i in range(18000)]
        self.assertAlmostEqual(compute_throughput(samples, period), 100.0)

    def test_samples_before_period(self):
        period = StablePeriod(BASE + 100 * NS, BASE + 200 * NS, StableMode.ALL_CONNECTED, 2)
        samples = [sample("t", i, BASE + i * NS) for i in range(50)]
        self.assertEqual(compute_throughput(samples, period), 0.0)
        self.assertEqual(compute_throughput([], period), 0.0)

    def test_loss_fraction(self):
        samples = [sample("t", i, BASE + i) for i in range(16830)]
        result = compute_loss({"t": 18000}, samples)
        self.assertAlmostEqual(result.loss_fraction, 0.065)
        self.assertEqual(result.unique_received, 16830)

    def test_lossless(self):
        samples = [sample("t", i, BASE + i) for i in range(100)]
        result = compute_loss({"t": 100}, samples)
        self.assertEqual((result.loss_fraction, result.duplicate_count), (0.0, 0))

    def test_duplicates_do_not_hide_loss(self):
        samples = [sample("t", i, BASE + i) for i in range(10)] + [sample("t", 5, BASE + 99)]
        result = compute_loss({"t": 10}, samples)
        self.assertEqual(result.duplicate_count, 1)
        self.assertEqual(result.loss_fraction, 0.0)

    def test_unknown_topic(self):
        with self.assertRaises(UnknownTopic):
            compute_loss({"a": 1}, [sample("b", 0, BASE)])

    def test_fanout_multiplicity(self):
        samples = [sample("f", i, BASE + i) for i in range(10) for _ in range(3)]
        result = compute_loss({"f": 10}, samples, multiplicity={"f": 5})
        self.assertEqual(result.expected, 50)
        self.assertAlmostEqual(result.loss_fraction, 0.4)
        self.assertEqual(result.duplicate_count, 0)

    def test_nothing_published(self):
        self.assertEqual(compute_loss({"t": 0}, []).loss_fraction, 0.0)


# =============================================================================
# ТЕСТЫ СВОДКИ
# =============================================================================

class TestSummarize(unittest.TestCase):

    def setUp(self):
        self.spec = ExperimentSpec(
            scenario=ScenarioType.THROUGHPUT_PAIRS, transport_kind=TransportKind.LOOPBACK,
            endpoint="loopback://0", pairs=2, rate_per_publisher=10.0, payload_bytes=64,
            duration_s=10.0, warmup_s=2.0, allocated_vcpus=4.0,
        )
        self.events = [connect_event(f"c{i}", BASE + (i + 1) * 100 * MS) for i in range(4)]
        self.samples = [
            sample(topic, k, BASE + k * 100 * MS + (k % 10 + 1) * MS, (k % 10 + 1) * MS)
            for topic in ("bench/0", "bench/1") for k in range(120)
        ]
        self.resources = [
            ResourceSample(BASE + i * NS, i * NS // 2, 64 * 2 ** 20) for i in range(13)
        ]

    def test_synthetic_run_matches_oracle(self):
        report = summarize(self.spec, self.samples, self.events,
                           {"bench/0": 120, "bench/1": 120}, self.resources,
                           BASE, BASE + 12 * NS)
        self.assertEqual(report.stable_start_ns, BASE + 400 * MS)
        self.assertEqual(report.stable_mode, "all_connected")
        self.assertAlmostEqual(report.throughput_msg_s, 232 / 11.6)
        self.assertEqual(report.latency.p50_ns, 5 * MS)
        self.assertEqual(report.latency.p95_ns, 10 * MS)
        self.assertEqual(report.latency.p99_ns, 10 * MS)
        self.assertEqual(report.latency.min_ns, 1 * MS)
        self.assertAlmostEqual(report.latency.mean_ns, 5.5 * MS)
        self.assertEqual(report.loss_fraction, 0.0)
        self.assertEqual(report.published_count, 240)
        self.assertEqual(report.received_count, 240)
        self.assertAlmostEqual(report.cpu_cores.mean, 0.5)
        self.assertAlmostEqual(report.cpu_percent, 12.5)
        self.assertAlmostEqual(report.mem_mb.mean, 64.0)
        self.assertEqual(report.offered_load_msg_s, 20.0)
        self.assertFalse(report.degenerate)

    def test_no_connections_is_degenerate(self):
        report = summarize(self.spec, [], [], {"bench/0": 0, "bench/1": 0}, [],
                           BASE, BASE + 12 * NS)
        self.assertTrue(report.degenerate)
        self.assertEqual(report.stable_mode, "none")
        self.assertIsNone(report.latency)
        self.assertEqual(report.throughput_msg_s, 0.0)

    def test_negative_latency_counted_as_skew(self):
        skewed = self.samples + [sample("bench/0", 500, BASE + 5 * NS, -2 * MS)]
        report = summarize(self.spec, skewed, self.events,
                           {"bench/0": 501, "bench/1": 120}, self.resources,
                           BASE, BASE + 12 * NS)
        self.assertEqual(report.skew_count, 1)
        self.assertEqual(report.latency.min_ns, 1 * MS)

    def test_resource_gaps_and_restart(self):
        resources = [
            ResourceSample(BASE, 0, 10 * 2 ** 20),
            ResourceSample(BASE + NS, NS, 10 * 2 ** 20),
            ResourceSample.gap_marker(BASE + 2 * NS),
            ResourceSample(BASE + 3 * NS, 100, 30 * 2 ** 20),
            ResourceSample(BASE + 4 * NS, 50, 30 * 2 ** 20),
        ]
        report = summarize(self.spec, self.samples, self.events,
                           {"bench/0": 120, "bench/1": 120}, resources, BASE, BASE + 12 * NS)
        self.assertAlmostEqual(report.cpu_cores.max, 1.0)
        self.assertAlmostEqual(report.cpu_cores.mean, 0.5)
        self.assertAlmostEqual(memory_mb(resources).mean, 20.0)
        self.assertTrue(any("CPU" in w for w in report.warnings))

    def _broker_died_at(self, died_s: int):
        """Сэмплы и опросы ресурсов обрываются на died_s секунде прогона"""
        samples = [s for s in self.samples if s.recv_ts_ns < BASE + died_s * NS]
        resources = [ResourceSample(BASE + i * NS, i * NS // 2, 64 * 2 ** 20) for i in range(died_s)]
        resources += [ResourceSample.gap_marker(BASE + i * NS) for i in range(died_s, 13)]
        return samples, resources

    def test_broker_lost_mid_run_is_degenerate(self):
        samples, resources = self._broker_died_at(5)
        report = summarize(self.spec, samples, self.events,
                           {"bench/0": 120, "bench/1": 120}, resources, BASE, BASE + 12 * NS)
        self.assertTrue(report.degenerate)
        self.assertTrue(any("Опросы ресурсов неудачны с 5.0 с" in w for w in report.warnings))
        self.assertIsNotNone(report.latency)

    def test_short_gap_tail_is_not_degenerate(self):
        resources = self.resources[:11] + [ResourceSample.gap_marker(BASE + i * NS) for i in (11, 12)]
        report = summarize(self.spec, self.samples, self.events,
                           {"bench/0": 120, "bench/1": 120}, resources, BASE, BASE + 12 * NS)
        self.assertFalse(report.degenerate)

    def test_container_lost_before_run_end(self):
        published = {"bench/0": 120, "bench/1": 120}
        lost = summarize(self.spec, self.samples, self.events, published, self.resources,
                         BASE, BASE + 12 * NS, container_lost_ns=BASE + 8 * NS)
        self.assertTrue(lost.degenerate)
        self.assertTrue(any("пропал на 8.0 с" in w for w in lost.warnings))

        after_end = summarize(self.spec, self.samples, self.events, published, self.resources,
                              BASE, BASE + 12 * NS, container_lost_ns=BASE + 13 * NS)
        self.assertFalse(after_end.degenerate)

    def test_all_clients_disconnected_before_end(self):
        events = self.events + [
            ConnectionEvent(f"c{i}", ConnectionEventKind.DISCONNECT, BASE + 6 * NS) for i in range(4)
        ]
        report = summarize(self.spec, self.samples, events,
                           {"bench/0": 120, "bench/1": 120}, self.resources,
                           BASE, BASE + 12 * NS)
        self.assertTrue(report.degenerate)
        self.assertIn("К концу прогона все клиенты отключены", report.warnings)

    def test_failed_resource_series_warns(self):
        report = summarize(self.spec, self.samples, self.events,
                           {"bench/0": 120, "bench/1": 120}, [], BASE, BASE + 12 * NS,
                           resources_failed=True)
        self.assertIn("Все опросы ресурсов завершились ошибкой", report.warnings)
        self.assertFalse(report.degenerate)
        self.assertEqual(report.cpu_cores.mean, 0.0)


if __name__ == "__main__":
    unittest.main()
