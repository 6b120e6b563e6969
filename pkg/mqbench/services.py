"""
Адаптеры протоколов: MQTT (paho), NATS, AMQP 0-9-1, RESP pub/sub, Zenoh.
Клиентские библиотеки импортируются лениво: отсутствие пакета отключает только свой адаптер.
"""

from __future__ import annotations

import asyncio
import json
import logging
import threading
from typing import Any, Dict, Optional

from mqbench.core import (
    ConnectFailed,
    PublishTimeout,
    NotConnected,
    TransportError,
    TransportKind,
)
from mqbench.transport import BaseSession, Subscription, register_transport

logger = logging.getLogger(__name__)


def _require(module_name: str, package: str):
    """Импортировать клиентскую библиотеку или сообщить, какой пакет поставить"""
    import importlib
    try:
        return importlib.import_module(module_name)
    except ImportError as e:
        raise ConnectFailed(f"Не установлен пакет {package}: pip install {package}") from e


# =============================================================================
# MQTT (paho-mqtt поверх asyncio)
# =============================================================================

class _PahoAsyncioBridge:
    """
    Гоняет сетевой цикл paho в event loop: сокет регистрируется через
    add_reader/add_writer, поэтому поток на клиента не нужен.

    Колбэки сокета могут прийти из потока, где выполняется connect;
    регистрация тогда переносится в event loop через call_soon_threadsafe.
    """

    def __init__(self, loop: asyncio.AbstractEventLoop, client: Any, mqtt: Any):
        self.loop = loop
        self.client = client
        self.mqtt = mqtt
        self._loop_thread = threading.get_ident()
        self._misc: Optional[asyncio.Task] = None
        client.on_socket_open = self._on_socket_open
        client.on_socket_close = self._on_socket_close
        client.on_socket_register_write = self._on_register_write
        client.on_socket_unregister_write = self._on_unregister_write

    def _in_loop(self, callback, *args) -> None:
        if threading.get_ident() == self._loop_thread:
            callback(*args)
        else:
            self.loop.call_soon_threadsafe(callback, *args)

    def _open(self, sock) -> None:
        self.loop.add_reader(sock, self.client.loop_read)
        self._misc = self.loop.create_task(self._misc_loop())

    def _close(self, sock) -> None:
        self.loop.remove_reader(sock)
        self.loop.remove_writer(sock)
        if self._misc is not None:
            self._misc.cancel()
            self._misc = None

    def _on_socket_open(self, client, userdata, sock):
        self._in_loop(self._open, sock)

    def _on_socket_close(self, client, userdata, sock):
        self._in_loop(self._close, sock)

    def _on_register_write(self, client, userdata, sock):
        self._in_loop(self.loop.add_writer, sock, client.loop_write)

    def _on_unregister_write(self, client, userdata, sock):
        self._in_loop(self.loop.remove_writer, sock)

    async def _misc_loop(self):
        # keepalive и повторные отправки paho
        while self.client.loop_misc() == self.mqtt.MQTT_ERR_SUCCESS:
            try:
                await asyncio.sleep(1)
            except asyncio.CancelledError:
                break


@register_transport(TransportKind.MQTT)
class MqttSession(BaseSession):
    """MQTT 3.1.1 / 5.0 через paho-mqtt"""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._client = None
        self._mqtt = None
        self._loop: Optional[asyncio.AbstractEventLoop] = None
        self._connack: Optional[asyncio.Future] = None
        self._closed_future: Optional[asyncio.Future] = None
        self._pending: Dict[int, asyncio.Future] = {}
        self._closing = False

    def _init_paho(self):
        """Инициализация paho"""
        self._mqtt = _require("paho.mqtt.client", "paho-mqtt")
        mqtt = self._mqtt
        v5 = self.options.mqtt_version == "5.0"
        kwargs: Dict[str, Any] = {
            "callback_api_version": mqtt.CallbackAPIVersion.VERSION2,
            "client_id": self.client_id,
            "protocol": mqtt.MQTTv5 if v5 else mqtt.MQTTv311,
        }
        if not v5:
            kwargs["clean_session"] = self.options.clean_session
        client = mqtt.Client(**kwargs)
        # Очередь неподтверждённых сообщений не ограничиваем: open-loop
        client.max_inflight_messages_set(65535)
        client.max_queued_messages_set(0)
        client.connect_timeout = self.options.connect_timeout_s
        if self.options.credentials:
            client.username_pw_set(*self.options.credentials)
        client.on_connect = self._on_connect
        client.on_disconnect = self._on_disconnect
        client.on_message = self._on_message
        client.on_publish = self._on_publish
        client.on_subscribe = self._on_subscribe
        _PahoAsyncioBridge(self._loop, client, mqtt)
        return client

    async def _open(self) -> None:
        self._loop = asyncio.get_running_loop()
        self._closing = False
        self._client = self._init_paho()
        self._connack = self._loop.create_future()
        self._closed_future = self._loop.create_future()

        connect_kwargs: Dict[str, Any] = {
            "host": self.endpoint.hostname,
            "port": self.endpoint.port or 1883,
            "keepalive": 60,
        }
        if self.options.mqtt_version == "5.0":
            from paho.mqtt.packettypes import PacketTypes
            from paho.mqtt.properties import Properties
            connect_kwargs["clean_start"] = self.options.clean_session
            if not self.options.clean_session:
                props = Properties(PacketTypes.CONNECT)
                props.SessionExpiryInterval = 0xFFFFFFFF
                connect_kwargs["properties"] = props

        # DNS и TCP handshake paho выполняет блокирующе: уводим их из event loop
        self._client.connect_async(**connect_kwargs)
        try:
            rc = await asyncio.to_thread(self._client.reconnect)
        except (OSError, ValueError) as e:
            raise ConnectFailed(f"{self.client_id}: {e}") from e
        if rc != self._mqtt.MQTT_ERR_SUCCESS:
            raise ConnectFailed(f"{self.client_id}: paho connect rc={rc}")
        await self._connack

    async def _close(self) -> None:
        if self._client is None:
            return
        self._closing = True
        client = self._client
        self._client = None
        client.disconnect()
        try:
            await asyncio.wait_for(asyncio.shield(self._closed_future), timeout=1.0)
        except asyncio.TimeoutError:
            logger.debug("%s: нет подтверждения отключения", self.client_id)
        self._fail_pending(NotConnected(f"Сессия {self.client_id} закрыта"))

    async def _publish(self, topic: str, payload: bytes, qos: int) -> None:
        info = self._client.publish(topic, payload, qos=qos)
        if info.rc == self._mqtt.MQTT_ERR_NO_CONN:
            raise NotConnected(f"Сессия {self.client_id} не подключена")
        if info.rc != self._mqtt.MQTT_ERR_SUCCESS:
            raise TransportError(f"{self.client_id}: publish rc={info.rc}")
        if qos == 0:
            return
        fut = self._loop.create_future()
        self._pending[info.mid] = fut
        try:
            await asyncio.wait_for(fut, timeout=self.options.publish_timeout_s)
        except asyncio.TimeoutError as e:
            raise PublishTimeout(f"{self.client_id}: нет подтверждения mid={info.mid}") from e
        finally:
            self._pending.pop(info.mid, None)

    async def _subscribe(self, sub: Subscription) -> None:
        rc, mid = self._client.subscribe(sub.topic, qos=sub.qos)
        if rc != self._mqtt.MQTT_ERR_SUCCESS:
            raise NotConnected(f"{self.client_id}: subscribe rc={rc}")
        fut = self._loop.create_future()
        self._pending[mid] = fut
        try:
            reason_codes = await asyncio.wait_for(fut, timeout=self.options.connect_timeout_s)
        except asyncio.TimeoutError as e:
            raise TransportError(f"{self.client_id}: нет SUBACK на {sub.topic}") from e
        finally:
            self._pending.pop(mid, None)
        for code in reason_codes or ():
            if getattr(code, "is_failure", False):
                raise TransportError(f"{self.client_id}: брокер отклонил подписку {sub.topic}: {code}")

    async def _unsubscribe(self, sub: Subscription) -> None:
        if self._client is not None:
            self._client.unsubscribe(sub.topic)

    # ---- колбэки paho (выполняются в потоке event loop) ----

    def _on_connect(self, client, userdata, flags, reason_code, properties):
        if self._connack is None or self._connack.done():
            return
        if reason_code.is_failure:
            self._connack.set_exception(ConnectFailed(f"{self.client_id}: CONNACK {reason_code}"))
        else:
            self._connack.set_result(getattr(flags, "session_present", False))

    def _on_disconnect(self, client, userdata, disconnect_flags, reason_code, properties):
        if self._connack is not None and not self._connack.done():
            self._connack.set_exception(ConnectFailed(f"{self.client_id}: соединение закрыто до CONNACK"))
        if self._closed_future is not None and not self._closed_future.done():
            self._closed_future.set_result(None)
        if not self._closing:
            self._fail_pending(NotConnected(f"Соединение {self.client_id} потеряно"))
            self._connection_lost(reason_code)

    def _on_message(self, client, userdata, message):
        recv_ts = self.clock.time_ns()
        self._deliver(message.topic, message.payload, recv_ts)

    def _on_publish(self, client, userdata, mid, reason_code, properties):
        # PUBACK читается в том же потоке после publish(), future уже зарегистрирован
        fut = self._pending.get(mid)
        if fut is not None and not fut.done():
            fut.set_result(None)

    def _on_subscribe(self, client, userdata, mid, reason_code_list, properties):
        fut = self._pending.get(mid)
        if fut is not None and not fut.done():
            fut.set_result(reason_code_list)

    def _fail_pending(self, error: Exception) -> None:
        for fut in self._pending.values():
            if not fut.done():
                fut.set_exception(error)
        self._pending.clear()


# =============================================================================
# NATS
# =============================================================================

def mqtt_to_nats_subject(topic: str) -> str:
    """bench/+/x/# -> bench.*.x.>"""
    return ".".join(
        "*" if level == "+" else ">" if level == "#" else level
        for level in topic.split("/")
    )


def nats_subject_to_topic(subject: str) -> str:
    return subject.replace(".", "/")


@register_transport(TransportKind.NATS)
class NatsSession(BaseSession):
    """NATS через nats-py"""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._nc = None
        self._subs: Dict[int, Any] = {}

    async def _open(self) -> None:
        nats = _require("nats", "nats-py")
        url = f"nats://{self.endpoint.hostname}:{self.endpoint.port or 4222}"
        kwargs: Dict[str, Any] = {
            "servers": [url],
            "name": self.client_id,
            "connect_timeout": self.options.connect_timeout_s,
            "allow_reconnect": False,
            "max_reconnect_attempts": 0,
            "disconnected_cb": self._on_disconnected,
            "error_cb": self._on_error,
        }
        if self.options.credentials:
            kwargs["user"], kwargs["password"] = self.options.credentials
        try:
            self._nc = await nats.connect(**kwargs)
        except Exception as e:
            raise ConnectFailed(f"{self.client_id}: {e}") from e

    async def _close(self) -> None:
        nc, self._nc = self._nc, None
        self._subs.clear()
        if nc is not None and not nc.is_closed:
            await nc.close()

    async def _publish(self, topic: str, payload: bytes, qos: int) -> None:
        await self._nc.publish(mqtt_to_nats_subject(topic), payload)

    async def _subscribe(self, sub: Subscription) -> None:
        async def handler(msg):
            recv_ts = self.clock.time_ns()
            self._deliver(nats_subject_to_topic(msg.subject), msg.data, recv_ts)

        self._subs[id(sub)] = await self._nc.subscribe(mqtt_to_nats_subject(sub.topic), cb=handler)
        # Сервер должен зарегистрировать подписку до старта издателя
        await self._nc.flush(timeout=self.options.connect_timeout_s)

    async def _unsubscribe(self, sub: Subscription) -> None:
        nats_sub = self._subs.pop(id(sub), None)
        if nats_sub is not None:
            await nats_sub.unsubscribe()

    async def _on_disconnected(self):
        self._connection_lost("nats disconnected")

    async def _on_error(self, error):
        logger.warning("NATS %s: %s", self.client_id, error)


# =============================================================================
# AMQP 0-9-1
# =============================================================================

AMQP_EXCHANGE = "mqbench"


@register_transport(TransportKind.AMQP)
class AmqpSession(BaseSession):
    """AMQP 0-9-1 через aio-pika: direct exchange, эксклюзивная очередь на подписчика"""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._connection = None
        self._channel = None
        self._exchange = None
        self._queues: Dict[int, Any] = {}
        self._aio_pika = None

    async def _open(self) -> None:
        self._aio_pika = _require("aio_pika", "aio-pika")
        try:
            self._connection = await self._aio_pika.connect(
                self.endpoint.geturl(),
                timeout=self.options.connect_timeout_s,
                client_properties={"connection_name": self.client_id},
            )
        except Exception as e:
            raise ConnectFailed(f"{self.client_id}: {e}") from e
        self._connection.close_callbacks.add(self._on_connection_closed)
        self._channel = await self._connection.channel(publisher_confirms=False)
        self._exchange = await self._channel.declare_exchange(
            AMQP_EXCHANGE, self._aio_pika.ExchangeType.DIRECT
        )

    async def _close(self) -> None:
        connection, self._connection = self._connection, None
        self._queues.clear()
        if connection is not None and not connection.is_closed:
            await connection.close()

    async def _publish(self, topic: str, payload: bytes, qos: int) -> None:
        await self._exchange.publish(self._aio_pika.Message(body=payload), routing_key=topic)

    async def _subscribe(self, sub: Subscription) -> None:
        if "+" in sub.topic or "#" in sub.topic:
            raise TransportError("direct exchange не поддерживает шаблоны топиков")
        queue = await self._channel.declare_queue(exclusive=True, auto_delete=True)
        await queue.bind(self._exchange, routing_key=sub.topic)

        async def on_message(message):
            recv_ts = self.clock.time_ns()
            self._deliver(message.routing_key, message.body, recv_ts)

        await queue.consume(on_message, no_ack=True)
        self._queues[id(sub)] = queue

    async def _unsubscribe(self, sub: Subscription) -> None:
        queue = self._queues.pop(id(sub), None)
        if queue is not None:
            await queue.delete(if_unused=False, if_empty=False)

    def _on_connection_closed(self, sender, exc=None):
        self._connection_lost(exc)


# =============================================================================
# RESP (Redis pub/sub)
# =============================================================================

def mqtt_to_resp_pattern(topic: str) -> str:
    return "/".join("*" if level in ("+", "#") else level for level in topic.split("/"))


@register_transport(TransportKind.RESP)
class RespSession(BaseSession):
    """Redis PUBLISH/SUBSCRIBE через redis.asyncio, без персистентности"""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._redis = None
        self._pubsub = None
        self._reader: Optional[asyncio.Task] = None

    async def _open(self) -> None:
        redis_asyncio = _require("redis.asyncio", "redis")
        kwargs: Dict[str, Any] = {
            "host": self.endpoint.hostname,
            "port": self.endpoint.port or 6379,
            "socket_connect_timeout": self.options.connect_timeout_s,
            "client_name": self.client_id,
        }
        if self.options.credentials:
            kwargs["username"], kwargs["password"] = self.options.credentials
        self._redis = redis_asyncio.Redis(**kwargs)
        try:
            await self._redis.ping()
        except Exception as e:
            await self._redis.aclose()
            self._redis = None
            raise ConnectFailed(f"{self.client_id}: {e}") from e

    async def _close(self) -> None:
        if self._reader is not None:
            self._reader.cancel()
            self._reader = None
        if self._pubsub is not None:
            await self._pubsub.aclose()
            self._pubsub = None
        if self._redis is not None:
            await self._redis.aclose()
            self._redis = None

    async def _publish(self, topic: str, payload: bytes, qos: int) -> None:
        await self._redis.publish(topic, payload)

    async def _subscribe(self, sub: Subscription) -> None:
        if self._pubsub is None:
            self._pubsub = self._redis.pubsub(ignore_subscribe_messages=True)
        if "+" in sub.topic or "#" in sub.topic:
            await self._pubsub.psubscribe(**{mqtt_to_resp_pattern(sub.topic): self._on_message})
        else:
            await self._pubsub.subscribe(**{sub.topic: self._on_message})
        if self._reader is None:
            self._reader = asyncio.create_task(self._read_loop())

    def _on_message(self, message: dict) -> None:
        recv_ts = self.clock.time_ns()
        channel = message["channel"]
        if isinstance(channel, bytes):
            channel = channel.decode("utf-8", "replace")
        self._deliver(channel, message["data"], recv_ts)

    async def _read_loop(self) -> None:
        try:
            await self._pubsub.run(poll_timeout=1.0)
        except asyncio.CancelledError:
            raise
        except Exception as e:
            self._connection_lost(e)


# =============================================================================
# ZENOH
# =============================================================================

def mqtt_to_zenoh_key(topic: str) -> str:
    return "/".join(
        "*" if level == "+" else "**" if level == "#" else level
        for level in topic.split("/")
    )


@register_transport(TransportKind.ZENOH)
class ZenohSession(BaseSession):
    """Zenoh в режиме client к роутеру"""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._session = None
        self._subscribers: Dict[int, Any] = {}
        self._loop: Optional[asyncio.AbstractEventLoop] = None

    async def _open(self) -> None:
        zenoh = _require("zenoh", "eclipse-zenoh")
        self._loop = asyncio.get_running_loop()
        conf = zenoh.Config()
        conf.insert_json5("mode", json.dumps("client"))
        conf.insert_json5(
            "connect/endpoints",
            json.dumps([f"tcp/{self.endpoint.hostname}:{self.endpoint.port or 7447}"]),
        )
        try:
            self._session = await asyncio.to_thread(zenoh.open, conf)
        except Exception as e:
            raise ConnectFailed(f"{self.client_id}: {e}") from e

    async def _close(self) -> None:
        session, self._session = self._session, None
        for subscriber in self._subscribers.values():
            try:
                subscriber.undeclare()
            except Exception:
                logger.debug("undeclare не удался", exc_info=True)
        self._subscribers.clear()
        if session is not None:
            await asyncio.to_thread(session.close)

    async def _publish(self, topic: str, payload: bytes, qos: int) -> None:
        self._session.put(topic, payload)

    async def _subscribe(self, sub: Subscription) -> None:
        loop = self._loop

        def handler(sample):
            # Колбэк приходит из потока zenoh, время фиксируем сразу
            recv_ts = self.clock.time_ns()
            payload = sample.payload
            data = payload.to_bytes() if hasattr(payload, "to_bytes") else bytes(payload)
            loop.call_soon_threadsafe(self._deliver, str(sample.key_expr), data, recv_ts)

        self._subscribers[id(sub)] = self._session.declare_subscriber(
            mqtt_to_zenoh_key(sub.topic), handler
        )

    async def _unsubscribe(self, sub: Subscription) -> None:
        subscriber = self._subscribers.pop(id(sub), None)
        if subscriber is not None:
            subscriber.undeclare()
