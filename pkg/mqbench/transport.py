"""
Единый интерфейс сессии поверх разных pub/sub протоколов и in-process loopback транспорт.
Конкретные адаптеры протоколов живут в services.py.
"""

from __future__ import annotations

import asyncio
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple, Type
from urllib.parse import SplitResult, urlsplit

from mqbench.core import (
    CONFIG,
    SYSTEM_CLOCK,
    ConnectFailed,
    ConnectionEvent,
    ConnectionEventKind,
    IClock,
    NotConnected,
    TransportError,
    TransportKind,
    UnsupportedQoS,
    UnsupportedScheme,
    max_qos,
)

logger = logging.getLogger(__name__)

# sink(topic, payload, recv_ts_ns)
MessageSink = Callable[[str, bytes, int], None]
EventSink = Callable[[ConnectionEvent], None]


# =============================================================================
# ОПЦИИ И ПОДПИСКИ
# =============================================================================

@dataclass
class TransportOptions:
    """Параметры подключения одного клиента"""
    client_id: str
    clean_session: bool = True
    connect_timeout_ms: int = CONFIG["connect_timeout_ms"]
    credentials: Optional[Tuple[str, str]] = None
    mqtt_version: str = "3.1.1"
    publish_timeout_ms: int = CONFIG["publish_timeout_ms"]

    def __post_init__(self):
        if not self.client_id:
            raise ValueError("client_id не может быть пустым")

    @property
    def connect_timeout_s(self) -> float:
        return self.connect_timeout_ms / 1000.0

    @property
    def publish_timeout_s(self) -> float:
        return self.publish_timeout_ms / 1000.0


@dataclass(eq=False)
class Subscription:
    """Активная подписка сессии"""
    topic: str
    qos: int
    sink: MessageSink
    active: bool = True
    last_recv_ns: int = 0
    delivered: int = 0


# Схемы URI, допустимые для каждого транспорта
SCHEMES: Dict[TransportKind, Tuple[str, ...]] = {
    TransportKind.MQTT: ("tcp", "mqtt"),
    TransportKind.NATS: ("tcp", "nats"),
    TransportKind.RESP: ("tcp", "redis"),
    TransportKind.AMQP: ("amqp",),
    TransportKind.ZENOH: ("zenoh",),
    TransportKind.LOOPBACK: ("loopback",),
}


def parse_endpoint(kind: TransportKind, endpoint: str) -> SplitResult:
    """Разобрать URI и проверить, что схема подходит транспорту"""
    parts = urlsplit(endpoint)
    if parts.scheme not in SCHEMES[kind]:
        raise UnsupportedScheme(
            f"{kind.value} не поддерживает схему '{parts.scheme}://' (ожидается {SCHEMES[kind]})"
        )
    if kind is not TransportKind.LOOPBACK and not parts.hostname:
        raise UnsupportedScheme(f"В адресе {endpoint!r} нет хоста")
    return parts


def topic_matches(topic_filter: str, topic: str) -> bool:
    """Сопоставить топик с фильтром по правилам MQTT ('+' один уровень, '#' остаток)"""
    if topic_filter == topic:
        return True
    filter_levels = topic_filter.split("/")
    topic_levels = topic.split("/")
    if topic.startswith("$") and filter_levels[0] in ("+", "#"):
        return False
    for i, level in enumerate(filter_levels):
        if level == "#":
            return i == len(filter_levels) - 1
        if i >= len(topic_levels):
            return False
        if level != "+" and level != topic_levels[i]:
            return False
    return len(filter_levels) == len(topic_levels)


# =============================================================================
# БАЗОВАЯ СЕССИЯ
# =============================================================================

class BaseSession(ABC):
    """
    Базовая сессия с общими проверками.

    Адаптер реализует _open/_close/_publish/_subscribe; проверки QoS и
    состояния, учёт подписок, события подключения и переподключение
    находятся здесь.
    """

    kind: TransportKind = TransportKind.LOOPBACK

    def __init__(self, endpoint: SplitResult, options: TransportOptions,
                 on_event: Optional[EventSink] = None, clock: IClock = SYSTEM_CLOCK):
        self.endpoint = endpoint
        self.options = options
        self.clock = clock
        self._on_event = on_event
        self._subscriptions: List[Subscription] = []
        self._connected = False
        self._closed = False

    @property
    def client_id(self) -> str:
        return self.options.client_id

    @property
    def is_connected(self) -> bool:
        return self._connected

    @property
    def closed(self) -> bool:
        """Сессия закрыта явно и больше не будет переподключаться"""
        return self._closed

    @property
    def subscriptions(self) -> List[Subscription]:
        return [s for s in self._subscriptions if s.active]

    # ---- жизненный цикл ----

    async def open(self) -> None:
        await self._open_with_timeout()
        self._connected = True
        self._emit(ConnectionEventKind.CONNECT)

    async def reconnect(self) -> None:
        """Переподключиться с тем же client_id и заново оформить подписки"""
        if self._closed:
            raise NotConnected(f"Сессия {self.client_id} закрыта")
        if self._connected:
            await self._safe_close()
            self._connected = False
        await self._open_with_timeout()
        self._connected = True
        for sub in self.subscriptions:
            await self._subscribe(sub)
        self._emit(ConnectionEventKind.RECONNECT)

    async def disconnect(self) -> None:
        """Закрыть сессию; повторный вызов ничего не делает"""
        if self._closed:
            return
        self._closed = True
        was_connected = self._connected
        self._connected = False
        await self._safe_close()
        if was_connected:
            self._emit(ConnectionEventKind.DISCONNECT)

    # ---- операции ----

    async def publish(self, topic: str, payload: bytes, qos: int = 0) -> None:
        self._check_qos(qos)
        self._check_connected()
        await self._publish(topic, payload, qos)

    async def subscribe(self, topic: str, qos: int, sink: MessageSink) -> Subscription:
        self._check_qos(qos)
        self._check_connected()
        sub = Subscription(topic=topic, qos=qos, sink=sink)
        await self._subscribe(sub)
        self._subscriptions.append(sub)
        return sub

    async def unsubscribe(self, sub: Subscription) -> None:
        if not sub.active:
            return
        sub.active = False
        if self._connected:
            await self._unsubscribe(sub)

    # ---- методы адаптера ----

    @abstractmethod
    async def _open(self) -> None:
        pass

    @abstractmethod
    async def _close(self) -> None:
        pass

    @abstractmethod
    async def _publish(self, topic: str, payload: bytes, qos: int) -> None:
        pass

    @abstractmethod
    async def _subscribe(self, sub: Subscription) -> None:
        pass

    async def _unsubscribe(self, sub: Subscription) -> None:
        pass

    # ---- общее ----

    def _check_qos(self, qos: int) -> None:
        limit = max_qos(self.kind)
        if qos < 0 or qos > limit:
            raise UnsupportedQoS(f"{self.kind.value} поддерживает qos ≤ {limit}, запрошен {qos}")

    def _check_connected(self) -> None:
        if not self._connected:
            raise NotConnected(f"Сессия {self.client_id} не подключена")

    async def _open_with_timeout(self) -> None:
        try:
            await asyncio.wait_for(self._open(), timeout=self.options.connect_timeout_s)
        except asyncio.TimeoutError as e:
            raise ConnectFailed(
                f"{self.client_id}: таймаут подключения к {self.endpoint.geturl()}"
            ) from e
        except TransportError:
            raise
        except (OSError, ConnectionError) as e:
            raise ConnectFailed(f"{self.client_id}: {e}") from e

    async def _safe_close(self) -> None:
        try:
            await self._close()
        except Exception:
            logger.debug("Ошибка при закрытии сессии %s", self.client_id, exc_info=True)

    def _emit(self, kind: ConnectionEventKind) -> None:
        if self._on_event is None:
            return
        event = ConnectionEvent(client_id=self.client_id, kind=kind, ts_ns=self.clock.time_ns())
        try:
            self._on_event(event)
        except Exception:
            logger.exception("Ошибка обработчика событий подключения")

    def _connection_lost(self, reason: object = None) -> None:
        """Вызывается адаптером при потере соединения со стороны сети"""
        if not self._connected:
            return
        self._connected = False
        logger.info("Соединение %s потеряно: %s", self.client_id, reason)
        self._emit(ConnectionEventKind.DISCONNECT)

    def _deliver(self, topic: str, payload: bytes, recv_ts_ns: Optional[int] = None) -> None:
        """Передать сообщение в подходящие подписки"""
        ts = self.clock.time_ns() if recv_ts_ns is None else recv_ts_ns
        for sub in self._subscriptions:
            if not sub.active or not topic_matches(sub.topic, topic):
                continue
            # Время получения не убывает в пределах подписки.
            sub_ts = max(ts, sub.last_recv_ns)
            sub.last_recv_ns = sub_ts
            sub.delivered += 1
            try:
                sub.sink(topic, payload, sub_ts)
            except Exception:
                logger.exception("Ошибка обработчика сообщений на %s", topic)


# =============================================================================
# РЕЕСТР ТРАНСПОРТОВ
# =============================================================================

_REGISTRY: Dict[TransportKind, Type[BaseSession]] = {}


def register_transport(kind: TransportKind):
    """Декоратор: зарегистрировать класс сессии для транспорта"""
    def decorator(cls: Type[BaseSession]) -> Type[BaseSession]:
        cls.kind = kind
        _REGISTRY[kind] = cls
        return cls
    return decorator


def session_class(kind: TransportKind) -> Type[BaseSession]:
    if kind not in _REGISTRY:
        # Адаптеры регистрируются при импорте services
        from mqbench import services  # noqa: F401
    try:
        return _REGISTRY[kind]
    except KeyError:
        raise UnsupportedScheme(f"Транспорт {kind.value} не зарегистрирован") from None


async def connect(kind: TransportKind, endpoint: str, options: TransportOptions,
                  on_event: Optional[EventSink] = None,
                  clock: IClock = SYSTEM_CLOCK) -> BaseSession:
    """
    Открыть сессию указанного транспорта

    Raises:
        UnsupportedScheme: схема URI не подходит транспорту
        ConnectFailed: брокер недоступен или не ответил вовремя
    """
    parts = parse_endpoint(kind, endpoint)
    session = session_class(kind)(parts, options, on_event=on_event, clock=clock)
    await session.open()
    return session


# =============================================================================
# LOOPBACK
# =============================================================================

class LoopbackHub:
    """In-process «брокер»: синхронная доставка в порядке публикации"""

    def __init__(self, name: str):
        self.name = name
        self._sessions: List["LoopbackSession"] = []
        self.published = 0

    def attach(self, session: "LoopbackSession") -> None:
        if session not in self._sessions:
            self._sessions.append(session)

    def detach(self, session: "LoopbackSession") -> None:
        if session in self._sessions:
            self._sessions.remove(session)

    def dispatch(self, topic: str, payload: bytes) -> None:
        self.published += 1
        for session in list(self._sessions):
            session._deliver(topic, payload)

    @property
    def session_count(self) -> int:
        return len(self._sessions)


_HUBS: Dict[str, LoopbackHub] = {}


def loopback_hub(name: str) -> LoopbackHub:
    hub = _HUBS.get(name)
    if hub is None:
        hub = _HUBS[name] = LoopbackHub(name)
    return hub


def reset_loopback(name: Optional[str] = None) -> None:
    """Сбросить состояние loopback хабов (все или один)"""
    if name is None:
        _HUBS.clear()
    else:
        _HUBS.pop(name, None)


@register_transport(TransportKind.LOOPBACK)
class LoopbackSession(BaseSession):
    """Сессия без сети: всегда подключается, не теряет сообщений"""

    def __init__(self, endpoint: SplitResult, options: TransportOptions,
                 on_event: Optional[EventSink] = None, clock: IClock = SYSTEM_CLOCK):
        super().__init__(endpoint, options, on_event=on_event, clock=clock)
        self.hub = loopback_hub(endpoint.netloc or endpoint.path or "0")

    async def _open(self) -> None:
        pass

    async def _close(self) -> None:
        self.hub.detach(self)

    async def _publish(self, topic: str, payload: bytes, qos: int) -> None:
        self.hub.dispatch(topic, payload)

    async def _subscribe(self, sub: Subscription) -> None:
        self.hub.attach(self)
