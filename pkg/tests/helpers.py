"""
Общие заглушки для тестов: виртуальные часы и источники статистики
"""

import asyncio
from typing import List, Optional

from mqbench.core import ContainerNotFound, IClock
from mqbench.resmon import IStatsClient, ResourceSample

NS = 1_000_000_000


class VirtualClock(IClock):
    """
    Часы, которые переводятся в sleep_until мгновенно.

    stop_at_ns и stop_event: при достижении stop_at_ns событие устанавливается,
    как это делает оркестратор по окончании окна. lateness_ns добавляется к
    каждому пробуждению (опоздание планировщика).
    """

    def __init__(self, start_ns: int = 0, wall_offset_ns: int = 1_700_000_000 * NS,
                 stop_at_ns: Optional[int] = None, stop_event: Optional[asyncio.Event] = None,
                 lateness_ns: int = 0):
        self.now = start_ns
        self.wall_offset_ns = wall_offset_ns
        self.stop_at_ns = stop_at_ns
        self.stop_event = stop_event
        self.lateness_ns = lateness_ns
        self.sleeps = 0

    def monotonic_ns(self) -> int:
        return self.now

    def time_ns(self) -> int:
        return self.now + self.wall_offset_ns

    def advance(self, delta_ns: int) -> None:
        self.now += delta_ns
        self._check_stop()

    def _check_stop(self) -> None:
        if self.stop_event is not None and self.stop_at_ns is not None \
                and self.now >= self.stop_at_ns:
            self.stop_event.set()

    async def sleep_until(self, deadline_ns: int, stop: Optional[asyncio.Event] = None) -> None:
        self.sleeps += 1
        if stop is not None and stop.is_set():
            return
        target = max(self.now, deadline_ns + self.lateness_ns)
        if self.stop_at_ns is not None and self.stop_event is not None:
            target = min(target, max(self.now, self.stop_at_ns))
        self.now = target
        self._check_stop()
        await asyncio.sleep(0)


class RampStats(IStatsClient):
    """CPU растёт линейно: cores_per_s ядер; память постоянна"""

    def __init__(self, clock: VirtualClock, cores: float = 0.5, mem_bytes: int = 64 * 2 ** 20,
                 fail_after: Optional[int] = None):
        self.clock = clock
        self.cores = cores
        self.mem_bytes = mem_bytes
        self.fail_after = fail_after
        self.polls = 0

    async def poll(self) -> ResourceSample:
        self.polls += 1
        if self.fail_after is not None and self.polls > self.fail_after:
            raise ContainerNotFound("killed")
        ts = self.clock.time_ns()
        return ResourceSample(ts_ns=ts, cpu_total_ns=int(self.clock.monotonic_ns() * self.cores),
                              mem_rss_bytes=self.mem_bytes)


class ScriptedStats(IStatsClient):
    """Отдаёт заранее заданные сэмплы по очереди"""

    def __init__(self, samples: List[ResourceSample]):
        self.samples = list(samples)

    async def poll(self) -> ResourceSample:
        if not self.samples:
            raise ContainerNotFound("exhausted")
        return self.samples.pop(0)
