"""
Open-loop генерация нагрузки: token bucket, движки издателя и подписчика.
"""

from __future__ import annotations

import asyncio
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Set, Tuple

from mqbench.core import (
    CONFIG,
    SYSTEM_CLOCK,
    AbortedByTransport,
    ExperimentSpec,
    IClock,
    LatencySample,
    MalformedHeader,
    MessageHeader,
    PublishTimeout,
    build_payload,
    decode_header,
)
from mqbench.transport import BaseSession

logger = logging.getLogger(__name__)

NS_PER_S = 1_000_000_000
_EPSILON = 1e-9


# =============================================================================
# TOKEN BUCKET
# =============================================================================

@dataclass
class TokenBucket:
    """
    Ограничитель темпа на монотонных часах.

    capacity=1 даёт равномерный шаг без всплесков. Опоздание пробуждения
    (до carry_limit токена сверх ёмкости) переносится через last_refill_ns,
    поэтому расписание не уплывает на длинном прогоне.
    """
    rate: float
    capacity: float = 1.0
    tokens: Optional[float] = None
    last_refill_ns: int = 0
    carry_limit: float = 0.5

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError("rate > 0")
        if not self.capacity >= 1:
            raise ValueError("capacity ≥ 1")
        if self.tokens is None:
            self.tokens = float(self.capacity)

    @classmethod
    def started_at(cls, rate: float, now_ns: int, capacity: float = 1.0) -> "TokenBucket":
        """Полный bucket, заведённый в момент now_ns"""
        return cls(rate=rate, capacity=capacity, last_refill_ns=now_ns)

    @property
    def period_ns(self) -> float:
        return NS_PER_S / self.rate

    def try_acquire(self, now_ns: int) -> Tuple[bool, int]:
        """
        Взять токен, если он есть

        Returns:
            (granted, next_eligible_ns); при granted next_eligible_ns == now_ns
        """
        if now_ns < self.last_refill_ns:
            raise ValueError("now_ns раньше последнего пополнения")
        tokens = self.tokens + (now_ns - self.last_refill_ns) * self.rate / NS_PER_S
        if tokens > self.capacity:
            carry = min(tokens - self.capacity, self.carry_limit)
            self.tokens = float(self.capacity)
            self.last_refill_ns = now_ns - int(carry * self.period_ns)
        else:
            self.tokens = tokens
            self.last_refill_ns = now_ns

        if self.tokens >= 1.0 - _EPSILON:
            self.tokens = max(self.tokens - 1.0, 0.0)
            return True, now_ns

        # self.tokens отнесены к моменту last_refill_ns
        deficit = 1.0 - self.tokens
        return False, self.last_refill_ns + math.ceil(deficit * self.period_ns)


def bucket_try_acquire(bucket: TokenBucket, now_ns: int) -> Tuple[bool, int]:
    return bucket.try_acquire(now_ns)


def stagger_offsets(count: int, rate: float) -> List[int]:
    """Смещения старта издателей, равномерно распределённые по одному периоду"""
    if count <= 0:
        return []
    period = NS_PER_S / rate
    return [int(i * period / count) for i in range(count)]


# =============================================================================
# ИЗДАТЕЛЬ
# =============================================================================

@dataclass
class PublisherStats:
    client_id: str = ""
    topic: str = ""
    published_count: int = 0
    publish_errors: int = 0
    publish_timeouts: int = 0
    backpressure_drops: int = 0
    max_inflight: int = 0
    first_send_ns: int = 0
    last_send_ns: int = 0

    def record(self, send_ts_ns: int) -> None:
        """Учесть отправку; подтверждения приходят не по порядку отправки"""
        if self.published_count == 0 or send_ts_ns < self.first_send_ns:
            self.first_send_ns = send_ts_ns
        self.last_send_ns = max(self.last_send_ns, send_ts_ns)
        self.published_count += 1

    def to_dict(self) -> dict:
        return asdict(self)


async def _settle(pending: Set[asyncio.Task]) -> None:
    if pending:
        await asyncio.gather(*list(pending), return_exceptions=True)


async def run_publisher(spec: ExperimentSpec, session: BaseSession, topic: str,
                        stop: asyncio.Event, clock: IClock = SYSTEM_CLOCK,
                        start_offset_ns: int = 0,
                        max_inflight: int = CONFIG["max_inflight_publishes"]) -> PublisherStats:
    """
    Публиковать с фиксированным темпом до сигнала stop.

    Каждая публикация уходит отдельной задачей: ожидание подтверждения
    не задерживает следующую отправку. Если неподтверждённых публикаций
    max_inflight, очередная отправка пропускается и считается в
    backpressure_drops; seq на неё не расходуется.

    Ошибки публикации считаются и не повторяются. Успешная публикация и
    таймаут подтверждения (сообщение могло дойти) учитываются в published_count.

    Raises:
        AbortedByTransport: сессия закрыта безвозвратно
    """
    if max_inflight < 1:
        raise ValueError("max_inflight ≥ 1")
    stats = PublisherStats(client_id=session.client_id, topic=topic)
    if start_offset_ns > 0:
        await clock.sleep_until(clock.monotonic_ns() + start_offset_ns, stop)

    bucket = TokenBucket.started_at(spec.rate_per_publisher, clock.monotonic_ns())
    pending: Set[asyncio.Task] = set()
    seq = 0
    failing = False
    saturated = False

    async def send(send_ts: int, payload: bytes) -> None:
        nonlocal failing
        try:
            await session.publish(topic, payload, spec.qos)
        except PublishTimeout:
            stats.publish_timeouts += 1
            stats.publish_errors += 1
            stats.record(send_ts)
            return
        except Exception as e:
            stats.publish_errors += 1
            if not failing:
                logger.warning("%s: ошибка публикации на %s: %s", session.client_id, topic, e)
                failing = True
            return
        if failing:
            logger.info("%s: публикация восстановлена", session.client_id)
            failing = False
        stats.record(send_ts)

    try:
        while not stop.is_set():
            granted, next_ns = bucket.try_acquire(clock.monotonic_ns())
            if not granted:
                await clock.sleep_until(next_ns, stop)
                continue

            if session.closed:
                await _settle(pending)
                raise AbortedByTransport(f"Сессия {session.client_id} закрыта", stats)

            if len(pending) >= max_inflight:
                stats.backpressure_drops += 1
                if not saturated:
                    logger.warning("%s: %d публикаций без подтверждения, отправки пропускаются",
                                   session.client_id, len(pending))
                    saturated = True
                continue
            saturated = False

            send_ts = clock.time_ns()
            payload = build_payload(MessageHeader(seq=seq, send_ts_ns=send_ts), spec.payload_bytes)
            task = asyncio.ensure_future(send(send_ts, payload))
            pending.add(task)
            task.add_done_callback(pending.discard)
            stats.max_inflight = max(stats.max_inflight, len(pending))
            seq += 1

        await _settle(pending)
    finally:
        for task in pending:
            task.cancel()

    if stats.backpressure_drops:
        logger.warning("%s: пропущено %d отправок из-за неподтверждённых публикаций",
                       session.client_id, stats.backpressure_drops)
    return stats


# =============================================================================
# ПОДПИСЧИК
# =============================================================================

@dataclass
class SampleBuffer:
    """Буфер одного подписчика; объединяется с остальными после прогона"""
    samples: List[LatencySample] = field(default_factory=list)
    malformed: int = 0
    closed: bool = False

    def record(self, topic: str, payload: bytes, recv_ts_ns: int) -> None:
        if self.closed:
            return
        try:
            header = decode_header(payload)
        except MalformedHeader:
            self.malformed += 1
            return
        self.samples.append(LatencySample.from_header(topic, header, recv_ts_ns, len(payload)))

    def close(self) -> None:
        self.closed = True

    @property
    def received_count(self) -> int:
        return len(self.samples)


async def run_subscriber(spec: ExperimentSpec, session: BaseSession, topic: str,
                         buffer: SampleBuffer, stop: asyncio.Event,
                         ready: Optional[asyncio.Event] = None) -> int:
    """
    Подписаться и записывать LatencySample до сигнала stop

    ready устанавливается сразу после оформления подписки.
    """
    await session.subscribe(topic, spec.qos, buffer.record)
    if ready is not None:
        ready.set()
    await stop.wait()
    buffer.close()
    if buffer.malformed:
        logger.warning("%s: %d сообщений без заголовка", session.client_id, buffer.malformed)
    return buffer.received_count
