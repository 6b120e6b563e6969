"""
Ядро mqbench: доменные типы, кодек заголовка сообщения, валидация эксперимента.
Чистая логика без сетевых зависимостей.
"""

from __future__ import annotations

import asyncio
import struct
import time
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum, IntEnum
from typing import Any, Dict, List, Optional, Tuple


# =============================================================================
# КОНФИГУРАЦИЯ
# =============================================================================

CONFIG = {
    "app_name": "mqbench",
    "version": "0.1.0",
    "header_magic": b"MQBN",
    "header_version": 1,
    "filler_byte": 0xAB,
    "plateau_window_s": 10.0,
    "resource_interval_s": 1.0,
    "readiness_timeout_s": 30.0,
    "stop_grace_s": 10,
    "reconnect_timeout_s": 5.0,
    "drain_s": 2.0,
    "saturation_threshold": 0.95,
    "default_nofile": 300000,
    "connect_timeout_ms": 5000,
    "publish_timeout_ms": 5000,
    "connect_concurrency": 256,
    "subscribe_ready_timeout_s": 30.0,
    "max_inflight_publishes": 10000,
    "broker_lost_gap_polls": 3,
}

HEADER_SIZE = 24
DEFAULT_VERSION_FLAGS = CONFIG["header_version"] << 24

# magic(4) | version_flags(u32) | seq(u64) | send_ts_ns(u64), big-endian
_HEADER_STRUCT = struct.Struct(">4sIQQ")


# =============================================================================
# ИСКЛЮЧЕНИЯ
# =============================================================================

class BenchError(Exception):
    """Базовая ошибка mqbench"""


class MalformedHeader(BenchError):
    """Сообщение на топике не несёт заголовок mqbench"""


class PayloadTooSmall(BenchError):
    """Запрошенный размер payload меньше заголовка"""


class SpecInvalid(BenchError):
    """Спецификация эксперимента нарушает инварианты"""

    def __init__(self, violations: List[str]):
        super().__init__("; ".join(violations))
        self.violations = list(violations)


class ConfigError(BenchError):
    """Некорректный файл конфигурации"""


class TransportError(BenchError):
    """Базовая ошибка транспорта"""


class ConnectFailed(TransportError):
    pass


class UnsupportedScheme(TransportError):
    pass


class NotConnected(TransportError):
    pass


class UnsupportedQoS(TransportError):
    pass


class PublishTimeout(TransportError):
    pass


class BindFailed(TransportError):
    pass


class AbortedByTransport(BenchError):
    """Сессия издателя закрыта безвозвратно; stats содержит накопленное"""

    def __init__(self, message: str, stats: Any = None):
        super().__init__(message)
        self.stats = stats


class EmptySampleSet(BenchError):
    pass


class NoEvents(BenchError):
    pass


class UnknownTopic(BenchError):
    pass


class ContainerNotFound(BenchError):
    pass


class EndpointUnreachable(BenchError):
    pass


class NonMonotonicTime(BenchError):
    pass


class ProxyNotFound(BenchError):
    pass


class AdminUnreachable(BenchError):
    pass


class ImageUnavailable(BenchError):
    pass


class StartFailed(BenchError):
    pass


class ReadinessTimeout(BenchError):
    pass


# =============================================================================
# ПЕРЕЧИСЛЕНИЯ
# =============================================================================

class ScenarioType(Enum):
    """Сценарии эксперимента"""
    LATENCY_PAYLOAD = "latency_payload"
    THROUGHPUT_PAIRS = "throughput_pairs"
    FANOUT = "fanout"
    QOS_RELIABILITY = "qos_reliability"


class TransportKind(Enum):
    """Поддерживаемые транспорты"""
    MQTT = "mqtt"
    NATS = "nats"
    AMQP = "amqp"
    RESP = "resp"
    ZENOH = "zenoh"
    LOOPBACK = "loopback"


class QosLevel(IntEnum):
    AT_MOST_ONCE = 0
    AT_LEAST_ONCE = 1
    EXACTLY_ONCE = 2


class ConnectionEventKind(Enum):
    CONNECT = "connect"
    DISCONNECT = "disconnect"
    RECONNECT = "reconnect"


# Максимальный QoS, который транспорт принимает без понижения.
MAX_QOS: Dict[TransportKind, int] = {
    TransportKind.MQTT: 2,
    TransportKind.NATS: 0,
    TransportKind.AMQP: 0,
    TransportKind.RESP: 0,
    TransportKind.ZENOH: 0,
    TransportKind.LOOPBACK: 0,
}


def max_qos(kind: TransportKind) -> int:
    return MAX_QOS[kind]


# =============================================================================
# ЧАСЫ
# =============================================================================

class IClock(ABC):
    """Источник времени: монотонные часы для расписаний, wall clock для заголовков"""

    @abstractmethod
    def monotonic_ns(self) -> int:
        pass

    @abstractmethod
    def time_ns(self) -> int:
        pass

    @abstractmethod
    async def sleep_until(self, deadline_ns: int, stop: Optional[asyncio.Event] = None) -> None:
        """Спать до монотонного deadline_ns или до установки stop"""
        pass


class SystemClock(IClock):
    """Системные часы"""

    def monotonic_ns(self) -> int:
        return time.monotonic_ns()

    def time_ns(self) -> int:
        return time.time_ns()

    async def sleep_until(self, deadline_ns: int, stop: Optional[asyncio.Event] = None) -> None:
        delay = (deadline_ns - time.monotonic_ns()) / 1e9
        if delay <= 0:
            # Отдаём управление даже при просроченном дедлайне.
            await asyncio.sleep(0)
            return
        if stop is None:
            await asyncio.sleep(delay)
            return
        if stop.is_set():
            return
        try:
            await asyncio.wait_for(stop.wait(), timeout=delay)
        except asyncio.TimeoutError:
            pass


SYSTEM_CLOCK = SystemClock()


# Типы полей ExperimentSpec для разбора конфигурации
_SPEC_INT_FIELDS = frozenset({"pairs", "fanout_subscribers", "payload_bytes", "qos", "rng_seed"})
_SPEC_FLOAT_FIELDS = frozenset({"rate_per_publisher", "duration_s", "warmup_s",
                                "mttf_s", "mttr_s", "allocated_vcpus"})
_SPEC_BOOL_FIELDS = frozenset({"clean_session", "stagger_start"})
_SPEC_STR_FIELDS = frozenset({"endpoint", "topic_prefix", "mqtt_version", "subscriber_endpoint"})
_SPEC_OPTIONAL_FIELDS = frozenset({"mttf_s", "mttr_s", "allocated_vcpus", "subscriber_endpoint"})


def _spec_value(name: str, value: Any) -> Any:
    """
    Проверить тип значения поля ExperimentSpec

    Raises:
        ConfigError: значение не того типа
    """
    if value is None and name in _SPEC_OPTIONAL_FIELDS:
        return None
    if name in _SPEC_BOOL_FIELDS:
        if isinstance(value, bool):
            return value
        expected = "true/false"
    elif name in _SPEC_INT_FIELDS:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        expected = "целое число"
    elif name in _SPEC_FLOAT_FIELDS:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        expected = "число"
    elif name in _SPEC_STR_FIELDS:
        if isinstance(value, str):
            return value
        expected = "строка"
    else:
        return value
    raise ConfigError(f"Поле {name}: ожидается {expected}, получено {value!r}")


# =============================================================================
# МОДЕЛИ ДАННЫХ
# =============================================================================

@dataclass(frozen=True)
class ExperimentSpec:
    """Полное описание одного прогона бенчмарка"""
    scenario: ScenarioType
    transport_kind: TransportKind
    endpoint: str
    pairs: int = 10
    fanout_subscribers: int = 0
    rate_per_publisher: float = 10.0
    payload_bytes: int = 1024
    duration_s: float = 120.0
    warmup_s: float = 60.0
    qos: int = 0
    mttf_s: Optional[float] = None
    mttr_s: Optional[float] = None
    topic_prefix: str = "bench"
    rng_seed: int = 0
    clean_session: bool = True
    mqtt_version: str = "3.1.1"
    stagger_start: bool = True
    allocated_vcpus: Optional[float] = None
    subscriber_endpoint: Optional[str] = None

    @property
    def is_fanout(self) -> bool:
        return self.scenario is ScenarioType.FANOUT

    @property
    def has_faults(self) -> bool:
        return self.mttf_s is not None and self.mttr_s is not None

    def publisher_count(self) -> int:
        return 1 if self.is_fanout else self.pairs

    def subscriber_count(self) -> int:
        return self.fanout_subscribers if self.is_fanout else self.pairs

    def client_count(self) -> int:
        return self.publisher_count() + self.subscriber_count()

    def offered_load(self) -> float:
        """Ожидаемая доставка, msg/s: pairs × rate, для fanout N × rate"""
        return self.subscriber_count() * self.rate_per_publisher

    def measured_window_s(self) -> float:
        return self.warmup_s + self.duration_s

    def topic_for(self, index: int) -> str:
        if self.is_fanout:
            return f"{self.topic_prefix}/fanout"
        return f"{self.topic_prefix}/{index}"

    def subscriber_address(self) -> str:
        return self.subscriber_endpoint or self.endpoint

    def with_value(self, name: str, value: Any) -> "ExperimentSpec":
        return replace(self, **{name: value})

    def to_dict(self) -> dict:
        data = asdict(self)
        data["scenario"] = self.scenario.value
        data["transport_kind"] = self.transport_kind.value
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Неизвестные поля эксперимента: {sorted(unknown)}")
        values = {name: _spec_value(name, value) for name, value in data.items()}
        try:
            values["scenario"] = ScenarioType(values["scenario"])
            values["transport_kind"] = TransportKind(values["transport_kind"])
        except KeyError as e:
            raise ConfigError(f"Не указано обязательное поле: {e.args[0]}") from e
        except ValueError as e:
            raise ConfigError(str(e)) from e
        return cls(**values)

    @classmethod
    def preset(cls, name: str, **overrides: Any) -> "ExperimentSpec":
        """Спецификация из набора опубликованных параметров"""
        if name not in PRESETS:
            raise ConfigError(f"Неизвестный пресет: {name}")
        values = dict(PRESETS[name])
        values.update(overrides)
        return cls.from_dict(values)


@dataclass(frozen=True)
class MessageHeader:
    """24-байтный заголовок: magic, версия/флаги, seq, время отправки"""
    seq: int
    send_ts_ns: int
    version_flags: int = DEFAULT_VERSION_FLAGS
    magic: bytes = CONFIG["header_magic"]

    @property
    def version(self) -> int:
        return (self.version_flags >> 24) & 0xFF

    def encode(self) -> bytes:
        return _HEADER_STRUCT.pack(self.magic, self.version_flags, self.seq, self.send_ts_ns)


@dataclass(frozen=True, slots=True)
class LatencySample:
    """Одно доставленное сообщение"""
    topic: str
    seq: int
    send_ts_ns: int
    recv_ts_ns: int
    latency_ns: int
    payload_bytes: int

    @classmethod
    def from_header(cls, topic: str, header: MessageHeader,
                    recv_ts_ns: int, payload_bytes: int) -> "LatencySample":
        return cls(
            topic=topic,
            seq=header.seq,
            send_ts_ns=header.send_ts_ns,
            recv_ts_ns=recv_ts_ns,
            latency_ns=recv_ts_ns - header.send_ts_ns,
            payload_bytes=payload_bytes,
        )

    @property
    def skewed(self) -> bool:
        """Отрицательная задержка означает расхождение часов"""
        return self.latency_ns < 0

    def is_consistent(self) -> bool:
        return self.latency_ns == self.recv_ts_ns - self.send_ts_ns


@dataclass(frozen=True)
class ConnectionEvent:
    client_id: str
    kind: ConnectionEventKind
    ts_ns: int

    @property
    def is_connect(self) -> bool:
        return self.kind is not ConnectionEventKind.DISCONNECT

    def to_dict(self) -> dict:
        return {"client_id": self.client_id, "kind": self.kind.value, "ts_ns": self.ts_ns}

    @classmethod
    def from_dict(cls, data: dict) -> "ConnectionEvent":
        return cls(
            client_id=str(data["client_id"]),
            kind=ConnectionEventKind(data["kind"]),
            ts_ns=int(data["ts_ns"]),
        )


@dataclass(frozen=True)
class LatencyStats:
    min_ns: int
    mean_ns: float
    stddev_ns: float
    p50_ns: int
    p95_ns: int
    p99_ns: int
    max_ns: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "LatencyStats":
        return cls(**data)


@dataclass(frozen=True)
class ResourceStats:
    mean: float = 0.0
    max: float = 0.0

    def to_dict(self) -> dict:
        return {"mean": self.mean, "max": self.max}

    @classmethod
    def from_dict(cls, data: dict) -> "ResourceStats":
        return cls(mean=float(data.get("mean", 0.0)), max=float(data.get("max", 0.0)))


@dataclass(frozen=True)
class SummaryReport:
    """Агрегированный результат прогона"""
    spec: ExperimentSpec
    stable_start_ns: int
    stable_end_ns: int
    published_count: int
    received_count: int
    duplicate_count: int
    throughput_msg_s: float
    latency: Optional[LatencyStats]
    loss_fraction: float
    cpu_cores: ResourceStats = field(default_factory=ResourceStats)
    mem_mb: ResourceStats = field(default_factory=ResourceStats)
    stable_mode: str = "all_connected"
    offered_load_msg_s: float = 0.0
    malformed_count: int = 0
    skew_count: int = 0
    cpu_percent: Optional[float] = None
    degenerate: bool = False
    warnings: Tuple[str, ...] = ()
    metadata: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "stable_start_ns": self.stable_start_ns,
            "stable_end_ns": self.stable_end_ns,
            "stable_mode": self.stable_mode,
            "published_count": self.published_count,
            "received_count": self.received_count,
            "duplicate_count": self.duplicate_count,
            "malformed_count": self.malformed_count,
            "skew_count": self.skew_count,
            "throughput_msg_s": self.throughput_msg_s,
            "offered_load_msg_s": self.offered_load_msg_s,
            "latency": self.latency.to_dict() if self.latency else None,
            "loss_fraction": self.loss_fraction,
            "cpu_cores": self.cpu_cores.to_dict(),
            "cpu_percent": self.cpu_percent,
            "mem_mb": self.mem_mb.to_dict(),
            "degenerate": self.degenerate,
            "warnings": list(self.warnings),
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SummaryReport":
        return cls(
            spec=ExperimentSpec.from_dict(data["spec"]),
            stable_start_ns=int(data["stable_start_ns"]),
            stable_end_ns=int(data["stable_end_ns"]),
            stable_mode=data.get("stable_mode", "all_connected"),
            published_count=int(data["published_count"]),
            received_count=int(data["received_count"]),
            duplicate_count=int(data["duplicate_count"]),
            malformed_count=int(data.get("malformed_count", 0)),
            skew_count=int(data.get("skew_count", 0)),
            throughput_msg_s=float(data["throughput_msg_s"]),
            offered_load_msg_s=float(data.get("offered_load_msg_s", 0.0)),
            latency=LatencyStats.from_dict(data["latency"]) if data.get("latency") else None,
            loss_fraction=float(data["loss_fraction"]),
            cpu_cores=ResourceStats.from_dict(data.get("cpu_cores", {})),
            cpu_percent=data.get("cpu_percent"),
            mem_mb=ResourceStats.from_dict(data.get("mem_mb", {})),
            degenerate=bool(data.get("degenerate", False)),
            warnings=tuple(data.get("warnings", ())),
            metadata=dict(data.get("metadata", {})),
        )


@dataclass
class SpecValidationResult:
    """Результат валидации: все нарушения, а не только первое"""
    violations: List[str] = field(default_factory=list)

    @property
    def is_valid(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.is_valid


# =============================================================================
# ПРЕСЕТЫ ЭКСПЕРИМЕНТОВ
# =============================================================================

PRESETS: Dict[str, Dict[str, Any]] = {
    # Задержка от размера payload
    "latency_payload": {
        "scenario": "latency_payload", "transport_kind": "mqtt",
        "endpoint": "tcp://127.0.0.1:1883", "pairs": 10, "rate_per_publisher": 10.0,
        "payload_bytes": 1024, "duration_s": 120.0, "warmup_s": 60.0, "qos": 0,
    },
    # Пропускная способность и ресурсы от числа пар
    "throughput_pairs": {
        "scenario": "throughput_pairs", "transport_kind": "mqtt",
        "endpoint": "tcp://127.0.0.1:1883", "pairs": 500, "rate_per_publisher": 10.0,
        "payload_bytes": 1024, "duration_s": 120.0, "warmup_s": 60.0, "qos": 0,
    },
    # Один издатель на N подписчиков
    "fanout": {
        "scenario": "fanout", "transport_kind": "mqtt",
        "endpoint": "tcp://127.0.0.1:1883", "pairs": 1, "fanout_subscribers": 100,
        "rate_per_publisher": 100.0, "payload_bytes": 1024, "duration_s": 120.0,
        "warmup_s": 60.0, "qos": 0,
    },
    # Надёжность QoS при сетевых сбоях
    "qos_reliability": {
        "scenario": "qos_reliability", "transport_kind": "mqtt",
        "endpoint": "tcp://127.0.0.1:1883", "pairs": 10, "rate_per_publisher": 10.0,
        "payload_bytes": 1024, "duration_s": 180.0, "warmup_s": 0.0, "qos": 1,
        "mttf_s": 30.0, "mttr_s": 5.0, "clean_session": False,
    },
}

PAYLOAD_SWEEP = [1024, 16 * 1024, 1024 * 1024]
PAIRS_SWEEP = [500] + list(range(1000, 10001, 1000))
FANOUT_SWEEP = [5, 50, 100, 500, 1000]
QOS_SWEEP = [0, 1, 2]


# =============================================================================
# КОДЕК ЗАГОЛОВКА
# =============================================================================

def encode_header(seq: int, send_ts_ns: int, version_flags: int = DEFAULT_VERSION_FLAGS) -> bytes:
    """Закодировать заголовок в ровно 24 байта (big-endian)"""
    return MessageHeader(seq=seq, send_ts_ns=send_ts_ns, version_flags=version_flags).encode()


def decode_header(data: bytes) -> MessageHeader:
    """
    Разобрать первые 24 байта сообщения

    Raises:
        MalformedHeader: короткое сообщение или чужой magic
    """
    if len(data) < HEADER_SIZE:
        raise MalformedHeader(f"Сообщение короче заголовка: {len(data)} байт")
    magic, version_flags, seq, send_ts_ns = _HEADER_STRUCT.unpack_from(data, 0)
    if magic != CONFIG["header_magic"]:
        raise MalformedHeader(f"Неизвестный magic: {magic!r}")
    return MessageHeader(seq=seq, send_ts_ns=send_ts_ns, version_flags=version_flags, magic=magic)


def filler(size: int) -> bytes:
    return bytes([CONFIG["filler_byte"]]) * size


def build_payload(header: MessageHeader, total_bytes: int) -> bytes:
    """Заголовок плюс детерминированное заполнение до total_bytes"""
    if total_bytes < HEADER_SIZE:
        raise PayloadTooSmall(f"payload {total_bytes} < {HEADER_SIZE} байт заголовка")
    return header.encode() + filler(total_bytes - HEADER_SIZE)


# =============================================================================
# ВАЛИДАЦИЯ
# =============================================================================

def validate_spec(spec: ExperimentSpec) -> SpecValidationResult:
    """Проверить все инварианты ExperimentSpec и поддержку QoS транспортом"""
    result = SpecValidationResult()
    add = result.violations.append

    if spec.is_fanout:
        if spec.fanout_subscribers < 1:
            add("fanout_subscribers ≥ 1")
    elif spec.pairs < 1:
        add("pairs ≥ 1")

    if spec.payload_bytes < HEADER_SIZE:
        add(f"payload_bytes ≥ {HEADER_SIZE}")
    if not spec.duration_s > 0:
        add("duration_s > 0")
    if not spec.warmup_s >= 0:
        add("warmup_s ≥ 0")
    if not spec.rate_per_publisher > 0:
        add("rate_per_publisher > 0")

    if (spec.mttf_s is None) != (spec.mttr_s is None):
        add("mttf_s and mttr_s must be both present or both absent")
    else:
        if spec.mttf_s is not None and not spec.mttf_s > 0:
            add("mttf_s > 0")
        if spec.mttr_s is not None and not spec.mttr_s > 0:
            add("mttr_s > 0")

    if spec.qos not in (0, 1, 2):
        add("qos ∈ {0, 1, 2}")
    elif spec.qos > max_qos(spec.transport_kind):
        add(
            f"UnsupportedQoS: {spec.transport_kind.value} supports qos ≤ "
            f"{max_qos(spec.transport_kind)}, requested {spec.qos}"
        )

    if not spec.topic_prefix:
        add("topic_prefix must be non-empty")
    if not 0 <= spec.rng_seed < 2 ** 64:
        add("rng_seed must be a 64-bit unsigned integer")
    if spec.mqtt_version not in ("3.1.1", "5.0"):
        add("mqtt_version ∈ {3.1.1, 5.0}")
    if spec.allocated_vcpus is not None and not spec.allocated_vcpus > 0:
        add("allocated_vcpus > 0")

    return result
