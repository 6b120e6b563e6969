"""
Мониторинг ресурсов брокера: CPU и память через статистику контейнерного движка
(или psutil для брокера в этом же процессе).
"""

from __future__ import annotations

import asyncio
import logging
import os
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Iterator, List, NamedTuple, Optional

from mqbench.core import (
    CONFIG,
    SYSTEM_CLOCK,
    BenchError,
    ContainerNotFound,
    EndpointUnreachable,
    IClock,
    NonMonotonicTime,
)

logger = logging.getLogger(__name__)

NS_PER_S = 1_000_000_000


# =============================================================================
# МОДЕЛИ
# =============================================================================

@dataclass(frozen=True)
class ResourceSample:
    """
    Один опрос статистики.

    mem_rss_bytes: оценка RSS (см. parse_stats); mem_raw_bytes: usage
    движка без вычетов. gap=True отмечает неудачный опрос.
    """
    ts_ns: int
    cpu_total_ns: int
    mem_rss_bytes: int
    gap: bool = False
    mem_raw_bytes: int = 0

    @classmethod
    def gap_marker(cls, ts_ns: int) -> "ResourceSample":
        return cls(ts_ns=ts_ns, cpu_total_ns=0, mem_rss_bytes=0, gap=True)


class CoresReading(NamedTuple):
    cores: float
    restarted: bool


@dataclass
class ResourceSeries:
    """
    Серия опросов.

    failed=True, если ни один опрос не удался. container_lost_ns: момент,
    с которого движок сообщает, что контейнера нет, и до конца серии он не
    появился.
    """
    samples: List[ResourceSample] = field(default_factory=list)
    failed: bool = False
    container_lost_ns: Optional[int] = None

    def __iter__(self) -> Iterator[ResourceSample]:
        return iter(self.samples)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def gap_count(self) -> int:
        return sum(1 for s in self.samples if s.gap)


# =============================================================================
# РАСЧЁТЫ
# =============================================================================

def parse_stats(payload: dict, ts_ns: int) -> ResourceSample:
    """
    Разобрать ответ stats API (совместимый с Docker Engine).

    Память: cgroup v1 stats.rss, иначе cgroup v2 stats.anon, иначе
    usage − inactive_file.

    Raises:
        ContainerNotFound: в ответе нет счётчиков (контейнер остановлен)
    """
    cpu_stats = payload.get("cpu_stats") or {}
    usage = (cpu_stats.get("cpu_usage") or {}).get("total_usage")
    memory = payload.get("memory_stats") or {}
    if usage is None or not memory:
        raise ContainerNotFound("В ответе stats нет счётчиков: контейнер не запущен")

    raw = int(memory.get("usage", 0))
    detail = memory.get("stats") or {}
    if "rss" in detail:
        rss = int(detail["rss"])
    elif "anon" in detail:
        rss = int(detail["anon"])
    else:
        inactive = detail.get("inactive_file", detail.get("total_inactive_file", 0))
        rss = max(raw - int(inactive), 0)

    return ResourceSample(ts_ns=ts_ns, cpu_total_ns=int(usage), mem_rss_bytes=rss, mem_raw_bytes=raw)


def cpu_cores_used(prev: ResourceSample, curr: ResourceSample) -> CoresReading:
    """
    Доля ядер между двумя сэмплами: Δcpu / Δt.
    Отрицательная Δcpu (перезапуск контейнера) даёт 0 с флагом.

    Raises:
        NonMonotonicTime: curr не позже prev
    """
    dt = curr.ts_ns - prev.ts_ns
    if dt <= 0:
        raise NonMonotonicTime(f"ts_ns не возрастает: {prev.ts_ns} -> {curr.ts_ns}")
    dcpu = curr.cpu_total_ns - prev.cpu_total_ns
    if dcpu < 0:
        return CoresReading(0.0, True)
    return CoresReading(dcpu / dt, False)


# =============================================================================
# ИСТОЧНИКИ СТАТИСТИКИ
# =============================================================================

class IStatsClient(ABC):
    """Источник статистики одного брокера"""

    @abstractmethod
    async def poll(self) -> ResourceSample:
        pass

    async def close(self) -> None:
        pass


class DockerStatsClient(IStatsClient):
    """Статистика контейнера через docker SDK (один вызов stats на опрос)"""

    def __init__(self, container_id: str, base_url: Optional[str] = None,
                 client: Any = None, clock: IClock = SYSTEM_CLOCK):
        self.container_id = container_id
        self.base_url = base_url
        self.clock = clock
        self._client = client
        self._owns_client = client is None
        self._container = None

    def _init_docker(self):
        """Инициализация docker клиента"""
        try:
            import docker
        except ImportError as e:
            raise EndpointUnreachable("Не установлен пакет docker") from e
        try:
            if self.base_url:
                return docker.DockerClient(base_url=self.base_url)
            return docker.from_env()
        except docker.errors.DockerException as e:
            raise EndpointUnreachable(f"Контейнерный движок недоступен: {e}") from e

    def _fetch(self) -> dict:
        import docker
        if self._client is None:
            self._client = self._init_docker()
        try:
            if self._container is None:
                self._container = self._client.containers.get(self.container_id)
            return self._container.stats(stream=False, one_shot=True)
        except docker.errors.NotFound as e:
            self._container = None
            raise ContainerNotFound(f"Контейнер {self.container_id} не найден") from e
        except docker.errors.APIError as e:
            if e.status_code in (404, 409):
                raise ContainerNotFound(f"Контейнер {self.container_id}: {e.explanation}") from e
            raise EndpointUnreachable(str(e)) from e
        except docker.errors.DockerException as e:
            raise EndpointUnreachable(str(e)) from e
        except OSError as e:
            raise EndpointUnreachable(str(e)) from e

    async def poll(self) -> ResourceSample:
        payload = await asyncio.to_thread(self._fetch)
        return parse_stats(payload, self.clock.time_ns())

    async def close(self) -> None:
        if self._owns_client and self._client is not None:
            await asyncio.to_thread(self._client.close)
            self._client = None


class ProcessStatsClient(IStatsClient):
    """CPU и RSS процесса через psutil (брокер в этом же процессе)"""

    def __init__(self, pid: Optional[int] = None, clock: IClock = SYSTEM_CLOCK):
        import psutil
        self._psutil = psutil
        self.pid = pid or os.getpid()
        self.clock = clock
        try:
            self._process = psutil.Process(self.pid)
        except psutil.NoSuchProcess as e:
            raise ContainerNotFound(f"Процесс {self.pid} не найден") from e

    async def poll(self) -> ResourceSample:
        psutil = self._psutil
        try:
            with self._process.oneshot():
                times = self._process.cpu_times()
                memory = self._process.memory_info()
        except psutil.NoSuchProcess as e:
            raise ContainerNotFound(f"Процесс {self.pid} завершился") from e
        cpu_ns = int((times.user + times.system) * NS_PER_S)
        return ResourceSample(
            ts_ns=self.clock.time_ns(),
            cpu_total_ns=cpu_ns,
            mem_rss_bytes=int(memory.rss),
            mem_raw_bytes=int(memory.vms),
        )


async def poll_stats(stats_endpoint: Optional[str], container_id: str) -> ResourceSample:
    """Один опрос статистики контейнера"""
    client = DockerStatsClient(container_id, base_url=stats_endpoint)
    try:
        return await client.poll()
    finally:
        await client.close()


# =============================================================================
# МОНИТОР
# =============================================================================

async def monitor(client: IStatsClient, interval_s: float, stop: asyncio.Event,
                  clock: IClock = SYSTEM_CLOCK) -> ResourceSeries:
    """
    Опрашивать client по фиксированному расписанию start + k·interval до stop.

    Неудачный опрос записывается маркером пропуска. Если опрос длиннее
    интервала, пропущенные слоты не догоняются.
    """
    if not interval_s > 0:
        raise ValueError("interval_s > 0")
    interval_ns = int(interval_s * NS_PER_S)
    series = ResourceSeries()
    successes = 0
    failing = False
    lost_ns: Optional[int] = None
    start = clock.monotonic_ns()
    k = 0

    while not stop.is_set():
        await clock.sleep_until(start + k * interval_ns, stop)
        if stop.is_set():
            break
        try:
            series.samples.append(await client.poll())
            successes += 1
            lost_ns = None
            if failing:
                logger.info("Опрос ресурсов восстановлен")
                failing = False
        except BenchError as e:
            series.samples.append(ResourceSample.gap_marker(clock.time_ns()))
            if isinstance(e, ContainerNotFound) and lost_ns is None:
                lost_ns = clock.time_ns()
            if not failing:
                logger.warning("Опрос ресурсов не удался: %s", e)
                failing = True
        except Exception:
            series.samples.append(ResourceSample.gap_marker(clock.time_ns()))
            logger.exception("Ошибка опроса ресурсов")
        elapsed = clock.monotonic_ns() - start
        k = max(k + 1, elapsed // interval_ns + 1)

    series.container_lost_ns = lost_ns
    if series.samples and successes == 0:
        series = ResourceSeries(samples=[], failed=True, container_lost_ns=lost_ns)
    return series


async def monitor_container(stats_endpoint: Optional[str], container_id: str,
                            stop: asyncio.Event,
                            interval_s: float = CONFIG["resource_interval_s"]) -> ResourceSeries:
    client = DockerStatsClient(container_id, base_url=stats_endpoint)
    try:
        return await monitor(client, interval_s, stop)
    finally:
        await client.close()
