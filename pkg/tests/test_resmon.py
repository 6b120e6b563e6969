"""
Тесты мониторинга ресурсов
"""

import asyncio
import importlib.util
import json
import unittest
from pathlib import Path
from unittest.mock import MagicMock

from mqbench.core import ContainerNotFound, NonMonotonicTime
from mqbench.metrics import cores_series
from mqbench.resmon import (
    DockerStatsClient,
    ProcessStatsClient,
    ResourceSample,
    cpu_cores_used,
    monitor,
    parse_stats,
)

from tests.helpers import NS, RampStats, ScriptedStats, VirtualClock

FIXTURES = Path(__file__).parent / "fixtures"
HAS_DOCKER = importlib.util.find_spec("docker") is not None
HAS_PSUTIL = importlib.util.find_spec("psutil") is not None


def load_fixture(name: str) -> dict:
    return json.loads((FIXTURES / name).read_text(encoding="utf-8"))


class TestParseStats(unittest.TestCase):
    """Разбор ответа stats API"""

    def test_cgroup_v2_fields(self):
        result = parse_stats(load_fixture("docker_stats.json"), 123)
        self.assertEqual(result.ts_ns, 123)
        self.assertEqual(result.cpu_total_ns, 48213573000)
        self.assertEqual(result.mem_rss_bytes, 187543552)
        self.assertEqual(result.mem_raw_bytes, 231780352)
        self.assertFalse(result.gap)

    def test_cgroup_v1_fields(self):
        result = parse_stats(load_fixture("docker_stats_v1.json"), 0)
        self.assertEqual(result.cpu_total_ns, 1500000000)
        self.assertEqual(result.mem_rss_bytes, 73400320)

    def test_usage_minus_inactive_file(self):
        payload = {
            "cpu_stats": {"cpu_usage": {"total_usage": 5}},
            "memory_stats": {"usage": 1000, "stats": {"inactive_file": 300}},
        }
        self.assertEqual(parse_stats(payload, 0).mem_rss_bytes, 700)

    def test_stopped_container(self):
        with self.assertRaises(ContainerNotFound):
            parse_stats(load_fixture("docker_stats_stopped.json"), 0)


class TestCpuCores(unittest.TestCase):

    def test_half_core(self):
        prev = ResourceSample(0, 0, 0)
        self.assertEqual(cpu_cores_used(prev, ResourceSample(NS, NS // 2, 0)).cores, 0.5)

    def test_idle(self):
        self.assertEqual(cpu_cores_used(ResourceSample(0, 7, 0), ResourceSample(NS, 7, 0)).cores, 0.0)

    def test_saturated_four_cores(self):
        reading = cpu_cores_used(ResourceSample(0, 0, 0), ResourceSample(NS, 4 * NS, 0))
        self.assertEqual(reading.cores, 4.0)
        self.assertFalse(reading.restarted)

    def test_counter_reset(self):
        reading = cpu_cores_used(ResourceSample(0, 10 * NS, 0), ResourceSample(NS, NS, 0))
        self.assertEqual(reading, (0.0, True))

    def test_non_monotonic(self):
        with self.assertRaises(NonMonotonicTime):
            cpu_cores_used(ResourceSample(NS, 0, 0), ResourceSample(NS, 1, 0))

    def test_over_allocation_flagged(self):
        samples = [ResourceSample(0, 0, 0), ResourceSample(NS, 3 * NS, 0)]
        self.assertEqual(cores_series(samples, allocated_vcpus=2.0).over_allocation, 1)


class TestMonitor(unittest.TestCase):

    def _run(self, stats_factory, duration_s=120, interval_s=1.0):
        async def scenario():
            stop = asyncio.Event()
            clock = VirtualClock(stop_at_ns=int(duration_s * NS), stop_event=stop)
            return await monitor(stats_factory(clock), interval_s, stop, clock)

        return asyncio.run(scenario())

    def test_sample_count(self):
        series = self._run(lambda clock: RampStats(clock))
        self.assertLessEqual(abs(len(series) - 120), 2)
        self.assertEqual(series.gap_count, 0)

    def test_linear_ramp_mean(self):
        series = self._run(lambda clock: RampStats(clock, cores=1.5))
        cores = cores_series(series.samples)
        self.assertTrue(all(abs(v - 1.5) < 1e-9 for v in cores.values))

    def test_killed_container_leaves_gaps(self):
        series = self._run(lambda clock: RampStats(clock, fail_after=30))
        self.assertFalse(series.failed)
        self.assertEqual(len([s for s in series if not s.gap]), 30)
        self.assertTrue(all(s.gap for s in series.samples[30:]))

    def test_killed_container_marks_loss_time(self):
        series = self._run(lambda clock: RampStats(clock, fail_after=30))
        self.assertEqual(series.container_lost_ns, series.samples[30].ts_ns)

    def test_recovered_polls_clear_loss(self):
        samples = [ResourceSample(NS, 0, 0), ResourceSample(2 * NS, NS, 0)]

        class FlakyStats(ScriptedStats):
            def __init__(self):
                super().__init__(samples)
                self.calls = 0

            async def poll(self):
                self.calls += 1
                if self.calls == 1:
                    raise ContainerNotFound("restarting")
                return await super().poll()

        series = self._run(lambda clock: FlakyStats(), duration_s=2.5)
        self.assertEqual(series.gap_count, 1)
        self.assertIsNone(series.container_lost_ns)

    def test_all_polls_failed(self):
        series = self._run(lambda clock: RampStats(clock, fail_after=0), duration_s=5)
        self.assertTrue(series.failed)
        self.assertEqual(len(series), 0)

    def test_invalid_interval(self):
        with self.assertRaises(ValueError):
            self._run(lambda clock: RampStats(clock), interval_s=0)


@unittest.skipUnless(HAS_DOCKER, "docker SDK не установлен")
class TestDockerStatsClient(unittest.TestCase):

    def test_fixed_response(self):
        client = MagicMock()
        client.containers.get.return_value.stats.return_value = load_fixture("docker_stats.json")
        sample = asyncio.run(DockerStatsClient("abc", client=client, clock=VirtualClock()).poll())
        self.assertEqual(sample.mem_rss_bytes, 187543552)
        client.containers.get.assert_called_once_with("abc")
        client.containers.get.return_value.stats.assert_called_once_with(stream=False, one_shot=True)

    def test_missing_container(self):
        import docker
        client = MagicMock()
        client.containers.get.side_effect = docker.errors.NotFound("gone")
        with self.assertRaises(ContainerNotFound):
            asyncio.run(DockerStatsClient("abc", client=client).poll())


@unittest.skipUnless(HAS_PSUTIL, "psutil не установлен")
class TestProcessStatsClient(unittest.TestCase):

    def test_live_process(self):
        sample = asyncio.run(ProcessStatsClient().poll())
        self.assertGreater(sample.mem_rss_bytes, 0)
        self.assertGreaterEqual(sample.cpu_total_ns, 0)


if __name__ == "__main__":
    unittest.main()
