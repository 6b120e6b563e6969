"""
Агрегация результатов прогона: перцентили задержки, стабильный период,
пропускная способность, потери, сводка ресурсов.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from mqbench.core import (
    CONFIG,
    ConnectionEvent,
    EmptySampleSet,
    ExperimentSpec,
    LatencySample,
    LatencyStats,
    NoEvents,
    ResourceStats,
    SummaryReport,
    UnknownTopic,
)
from mqbench.resmon import ResourceSample, cpu_cores_used

logger = logging.getLogger(__name__)

NS_PER_S = 1_000_000_000
BYTES_PER_MB = 2 ** 20


# =============================================================================
# ПЕРЦЕНТИЛИ
# =============================================================================

def nearest_rank(q: float, n: int) -> int:
    """Ранг (с 1) по методу ближайшего ранга: ⌈q/100 · n⌉ в пределах [1, n]"""
    rank = math.ceil(Fraction(str(q)) * n / 100)
    return min(max(rank, 1), n)


def percentiles(samples: Sequence[int], qs: Iterable[float]) -> List[int]:
    """
    Перцентили по ближайшему рангу, без интерполяции

    Raises:
        EmptySampleSet: пустая выборка
    """
    values = np.sort(np.asarray(samples, dtype=np.int64))
    if values.size == 0:
        raise EmptySampleSet("Нет значений для перцентилей")
    return [int(values[nearest_rank(q, values.size) - 1]) for q in qs]


def latency_stats(samples: Sequence[int]) -> LatencyStats:
    """min, mean, stddev (по генеральной совокупности), p50/p95/p99, max"""
    values = np.sort(np.asarray(samples, dtype=np.int64))
    if values.size == 0:
        raise EmptySampleSet("Нет значений задержки")
    n = values.size
    p50, p95, p99 = (int(values[nearest_rank(q, n) - 1]) for q in (50, 95, 99))
    return LatencyStats(
        min_ns=int(values[0]),
        mean_ns=float(values.mean()),
        stddev_ns=float(values.std(ddof=0)),
        p50_ns=p50,
        p95_ns=p95,
        p99_ns=p99,
        max_ns=int(values[-1]),
    )


# =============================================================================
# СТАБИЛЬНЫЙ ПЕРИОД
# =============================================================================

class StableMode(Enum):
    ALL_CONNECTED = "all_connected"
    SATURATION_PLATEAU = "saturation_plateau"


@dataclass(frozen=True)
class StablePeriod:
    start_ns: int
    end_ns: int
    detection_mode: StableMode
    connected_at_start: int
    warning: Optional[str] = None

    @property
    def duration_s(self) -> float:
        return (self.end_ns - self.start_ns) / NS_PER_S

    def contains(self, ts_ns: int) -> bool:
        return self.start_ns <= ts_ns <= self.end_ns


def detect_stable_period(events: Sequence[ConnectionEvent], target: int,
                         run_start_ns: int, run_end_ns: int,
                         plateau_window_s: float = CONFIG["plateau_window_s"]) -> StablePeriod:
    """
    Найти период после фазы подключения.

    Если число подключённых клиентов достигает target в момент t*, период
    [t*, run_end]. Иначе плато: первое подключение, после которого новых
    подключений нет plateau_window_s (или до конца прогона). Без плато берётся
    последнее окно прогона с предупреждением.

    Raises:
        NoEvents: нет событий до конца прогона
    """
    ordered = sorted((e for e in events if e.ts_ns < run_end_ns), key=lambda e: e.ts_ns)
    if not ordered:
        raise NoEvents("Нет событий подключения")
    if target < 1:
        raise ValueError("target ≥ 1")
    first_ts = ordered[0].ts_ns

    connected: set = set()
    counts: List[int] = []
    for event in ordered:
        if event.is_connect:
            connected.add(event.client_id)
        else:
            connected.discard(event.client_id)
        counts.append(len(connected))
        if len(connected) >= target:
            return StablePeriod(event.ts_ns, run_end_ns, StableMode.ALL_CONNECTED, len(connected))

    window_ns = int(plateau_window_s * NS_PER_S)
    connects = [(i, e.ts_ns) for i, e in enumerate(ordered) if e.is_connect]
    for j, (index, ts) in enumerate(connects):
        next_ts = connects[j + 1][1] if j + 1 < len(connects) else run_end_ns
        if next_ts - ts >= window_ns:
            return StablePeriod(ts, run_end_ns, StableMode.SATURATION_PLATEAU, counts[index])

    start = max(run_end_ns - window_ns, first_ts)
    warning = (
        f"Плато подключений не найдено: подключено {counts[-1]} из {target}, "
        f"берутся последние {plateau_window_s:g} с прогона"
    )
    logger.warning(warning)
    at_start = 0
    for event, count in zip(ordered, counts):
        if event.ts_ns > start:
            break
        at_start = count
    return StablePeriod(start, run_end_ns, StableMode.SATURATION_PLATEAU, at_start, warning)


# =============================================================================
# ПРОПУСКНАЯ СПОСОБНОСТЬ И ПОТЕРИ
# =============================================================================

def _recv_times(samples: Sequence[LatencySample]) -> np.ndarray:
    return np.fromiter((s.recv_ts_ns for s in samples), dtype=np.int64, count=len(samples))


def compute_throughput(samples: Sequence[LatencySample], period: StablePeriod) -> float:
    """Сообщений в секунду, полученных внутри стабильного периода"""
    if period.end_ns <= period.start_ns or not samples:
        return 0.0
    recv = _recv_times(samples)
    inside = int(np.count_nonzero((recv >= period.start_ns) & (recv <= period.end_ns)))
    return inside / period.duration_s


@dataclass(frozen=True)
class LossResult:
    loss_fraction: float
    duplicate_count: int
    unique_received: int
    expected: int


def compute_loss(published: Mapping[str, int], samples: Sequence[LatencySample],
                 multiplicity: Optional[Mapping[str, int]] = None) -> LossResult:
    """
    Потери с дедупликацией по (topic, seq).

    multiplicity задаёт, сколько копий каждого seq ожидается на топике
    (fanout: число подписчиков); копии сверх этого считаются дубликатами.

    Raises:
        UnknownTopic: у топика сэмпла нет счётчика публикаций
    """
    multiplicity = multiplicity or {}
    copies = Counter((s.topic, s.seq) for s in samples)
    unique = 0
    duplicates = 0
    for (topic, _seq), count in copies.items():
        if topic not in published:
            raise UnknownTopic(f"Нет счётчика публикаций для {topic}")
        expected_copies = multiplicity.get(topic, 1)
        unique += min(count, expected_copies)
        duplicates += max(count - expected_copies, 0)

    expected = sum(count * multiplicity.get(topic, 1) for topic, count in published.items())
    if expected <= 0:
        loss = 0.0
    else:
        loss = min(max((expected - unique) / expected, 0.0), 1.0)
    return LossResult(loss_fraction=loss, duplicate_count=duplicates,
                      unique_received=unique, expected=expected)


# =============================================================================
# РЕСУРСЫ
# =============================================================================

@dataclass
class CoresSeries:
    values: List[float] = field(default_factory=list)
    restarts: int = 0
    over_allocation: int = 0

    @property
    def flagged(self) -> bool:
        return bool(self.restarts or self.over_allocation)


def cores_series(samples: Sequence[ResourceSample],
                 allocated_vcpus: Optional[float] = None) -> CoresSeries:
    """Ядра CPU между соседними сэмплами; пропуски и перезапуски помечаются, не сглаживаются"""
    series = CoresSeries()
    prev: Optional[ResourceSample] = None
    for sample in samples:
        if sample.gap:
            prev = None
            continue
        if prev is not None and sample.ts_ns > prev.ts_ns:
            cores, restarted = cpu_cores_used(prev, sample)
            if restarted:
                series.restarts += 1
            if allocated_vcpus is not None and cores > allocated_vcpus:
                series.over_allocation += 1
            series.values.append(cores)
        prev = sample
    return series


def _stats(values: Sequence[float]) -> ResourceStats:
    if not len(values):
        return ResourceStats()
    arr = np.asarray(values, dtype=np.float64)
    return ResourceStats(mean=float(arr.mean()), max=float(arr.max()))


def memory_mb(samples: Sequence[ResourceSample]) -> ResourceStats:
    return _stats([s.mem_rss_bytes / BYTES_PER_MB for s in samples if not s.gap])


# =============================================================================
# СВОДКА
# =============================================================================

def trailing_gap_start(resources: Sequence[ResourceSample]) -> Optional[int]:
    """
    Момент, с которого все опросы до конца серии неудачны, если перед этим
    был хоть один удачный и неудачных подряд не меньше broker_lost_gap_polls
    """
    tail = 0
    for sample in reversed(resources):
        if not sample.gap:
            break
        tail += 1
    if tail < CONFIG["broker_lost_gap_polls"] or tail == len(resources):
        return None
    return resources[len(resources) - tail].ts_ns


def connected_at(events: Sequence[ConnectionEvent], ts_ns: int) -> int:
    """Сколько клиентов подключено в момент ts_ns"""
    connected: set = set()
    for event in sorted((e for e in events if e.ts_ns <= ts_ns), key=lambda e: e.ts_ns):
        if event.is_connect:
            connected.add(event.client_id)
        else:
            connected.discard(event.client_id)
    return len(connected)


def _seconds_into_run(ts_ns: int, run_start_ns: int) -> float:
    return max(ts_ns - run_start_ns, 0) / NS_PER_S


def summarize(spec: ExperimentSpec, samples: Sequence[LatencySample],
              events: Sequence[ConnectionEvent], published: Mapping[str, int],
              resources: Sequence[ResourceSample], run_start_ns: int, run_end_ns: int,
              malformed_count: int = 0,
              multiplicity: Optional[Mapping[str, int]] = None,
              metadata: Optional[Dict] = None,
              plateau_window_s: float = CONFIG["plateau_window_s"],
              resources_failed: bool = False,
              container_lost_ns: Optional[int] = None) -> SummaryReport:
    """
    Собрать SummaryReport одного прогона.

    Задержка считается по сэмплам внутри стабильного периода и после разогрева;
    отрицательные задержки исключаются из статистики и считаются в skew_count.
    Пустая выборка даёт отчёт с degenerate=True, а не исключение.

    Прогон также degenerate, если брокер пропал до конца прогона: движок
    сообщил об отсутствии контейнера (container_lost_ns), опросы ресурсов
    неудачны до конца серии или к концу прогона не подключён ни один клиент.
    """
    warnings: List[str] = []
    degenerate = False

    try:
        period = detect_stable_period(events, spec.client_count(), run_start_ns,
                                      run_end_ns, plateau_window_s)
        if period.warning:
            warnings.append(period.warning)
        stable_mode = period.detection_mode.value
    except NoEvents:
        period = StablePeriod(run_start_ns, run_end_ns, StableMode.SATURATION_PLATEAU, 0)
        stable_mode = "none"
        degenerate = True
        warnings.append("Нет событий подключения: ни один клиент не подключился")

    throughput = compute_throughput(samples, period)
    loss = compute_loss(published, samples, multiplicity)

    warmup_end = run_start_ns + int(spec.warmup_s * NS_PER_S)
    window_start = max(period.start_ns, warmup_end)
    in_window = [s.latency_ns for s in samples if window_start <= s.recv_ts_ns <= period.end_ns]
    skew_count = sum(1 for v in in_window if v < 0)
    if skew_count:
        warnings.append(f"{skew_count} сэмплов с отрицательной задержкой (расхождение часов)")

    try:
        latency = latency_stats([v for v in in_window if v >= 0])
    except EmptySampleSet:
        latency = None
        degenerate = True
        warnings.append("Нет сэмплов задержки в стабильном периоде после разогрева")

    cores = cores_series(resources, spec.allocated_vcpus)
    if cores.restarts:
        warnings.append(f"Счётчик CPU сбрасывался {cores.restarts} раз (перезапуск контейнера)")
    if cores.over_allocation:
        warnings.append(f"{cores.over_allocation} интервалов с CPU выше выделенных vCPU")
    cpu = _stats(cores.values)
    cpu_percent = None
    if spec.allocated_vcpus:
        cpu_percent = cpu.mean / spec.allocated_vcpus * 100.0
    if resources_failed or (resources and all(s.gap for s in resources)):
        warnings.append("Все опросы ресурсов завершились ошибкой")

    if container_lost_ns is not None and container_lost_ns < run_end_ns:
        degenerate = True
        warnings.append(
            f"Контейнер брокера пропал на {_seconds_into_run(container_lost_ns, run_start_ns):.1f} с прогона"
        )
    else:
        gaps_from = trailing_gap_start(resources)
        if gaps_from is not None and gaps_from < run_end_ns:
            degenerate = True
            warnings.append(
                f"Опросы ресурсов неудачны с {_seconds_into_run(gaps_from, run_start_ns):.1f} с "
                f"до конца прогона: брокер, вероятно, упал"
            )
    if events and stable_mode != "none" and connected_at(events, run_end_ns) == 0:
        degenerate = True
        warnings.append("К концу прогона все клиенты отключены")

    published_total = sum(published.values())
    if published_total == 0:
        degenerate = True

    for warning in warnings:
        logger.debug("summary: %s", warning)

    return SummaryReport(
        spec=spec,
        stable_start_ns=period.start_ns,
        stable_end_ns=period.end_ns,
        stable_mode=stable_mode,
        published_count=published_total,
        received_count=loss.unique_received,
        duplicate_count=loss.duplicate_count,
        malformed_count=malformed_count,
        skew_count=skew_count,
        throughput_msg_s=throughput,
        offered_load_msg_s=spec.offered_load(),
        latency=latency,
        loss_fraction=loss.loss_fraction,
        cpu_cores=cpu,
        cpu_percent=cpu_percent,
        mem_mb=memory_mb(resources),
        degenerate=degenerate,
        warnings=tuple(warnings),
        metadata=dict(metadata or {}),
    )
