"""
Минимальный MQTT 3.1.1 брокер на asyncio для герметичных тестов.

Поддерживается: CONNECT/CONNACK, SUBSCRIBE/SUBACK, UNSUBSCRIBE, PUBLISH
QoS 0/1/2 (PUBACK, PUBREC/PUBREL/PUBCOMP), PINGREQ, DISCONNECT,
шаблоны '+' и '#', постоянные сессии (clean_session=0) с буферизацией
сообщений QoS > 0, пока клиент не в сети.
Нет: retained, will, авторизации, TLS, MQTT 5.
"""

from __future__ import annotations

import asyncio
import logging
import struct
import uuid
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, Optional, Set, Tuple

from mqbench.core import BindFailed
from mqbench.transport import topic_matches

logger = logging.getLogger(__name__)


# =============================================================================
# ПАКЕТЫ
# =============================================================================

CONNECT = 1
CONNACK = 2
PUBLISH = 3
PUBACK = 4
PUBREC = 5
PUBREL = 6
PUBCOMP = 7
SUBSCRIBE = 8
SUBACK = 9
UNSUBSCRIBE = 10
UNSUBACK = 11
PINGREQ = 12
PINGRESP = 13
DISCONNECT = 14

CONNACK_ACCEPTED = 0
CONNACK_BAD_PROTOCOL = 1
CONNACK_IDENTIFIER_REJECTED = 2


class ProtocolViolation(Exception):
    pass


def encode_remaining_length(length: int) -> bytes:
    out = bytearray()
    while True:
        byte = length % 128
        length //= 128
        if length:
            byte |= 0x80
        out.append(byte)
        if not length:
            return bytes(out)


async def read_packet(reader: asyncio.StreamReader) -> Tuple[int, int, bytes]:
    """Прочитать один пакет: (тип, флаги, тело)"""
    first = (await reader.readexactly(1))[0]
    multiplier = 1
    length = 0
    for _ in range(4):
        byte = (await reader.readexactly(1))[0]
        length += (byte & 0x7F) * multiplier
        if not byte & 0x80:
            break
        multiplier *= 128
    else:
        raise ProtocolViolation("remaining length длиннее 4 байт")
    body = await reader.readexactly(length) if length else b""
    return first >> 4, first & 0x0F, body


def packet(packet_type: int, flags: int, body: bytes = b"") -> bytes:
    return bytes([(packet_type << 4) | flags]) + encode_remaining_length(len(body)) + body


def encode_string(value: str) -> bytes:
    data = value.encode("utf-8")
    return struct.pack(">H", len(data)) + data


class _Cursor:
    """Последовательное чтение полей из тела пакета"""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def u8(self) -> int:
        if self.pos + 1 > len(self.data):
            raise ProtocolViolation("пакет обрезан")
        value = self.data[self.pos]
        self.pos += 1
        return value

    def u16(self) -> int:
        if self.pos + 2 > len(self.data):
            raise ProtocolViolation("пакет обрезан")
        (value,) = struct.unpack_from(">H", self.data, self.pos)
        self.pos += 2
        return value

    def binary(self) -> bytes:
        size = self.u16()
        if self.pos + size > len(self.data):
            raise ProtocolViolation("пакет обрезан")
        value = self.data[self.pos:self.pos + size]
        self.pos += size
        return value

    def string(self) -> str:
        return self.binary().decode("utf-8")

    def rest(self) -> bytes:
        value = self.data[self.pos:]
        self.pos = len(self.data)
        return value

    @property
    def exhausted(self) -> bool:
        return self.pos >= len(self.data)


def publish_packet(topic: str, payload: bytes, qos: int, pid: Optional[int], dup: bool = False) -> bytes:
    body = encode_string(topic)
    if qos > 0:
        body += struct.pack(">H", pid)
    flags = (qos << 1) | (0x08 if dup else 0)
    return packet(PUBLISH, flags, body + payload)


def ack_packet(packet_type: int, pid: int) -> bytes:
    # PUBREL требует флаги 0b0010
    flags = 0x02 if packet_type == PUBREL else 0
    return packet(packet_type, flags, struct.pack(">H", pid))


# =============================================================================
# СОСТОЯНИЕ
# =============================================================================

@dataclass
class _Outbound:
    topic: str
    payload: bytes
    qos: int
    released: bool = False  # для QoS 2: PUBREC получен, ждём PUBCOMP


@dataclass
class ClientSession:
    """Состояние клиента, переживающее разрыв при clean_session=0"""
    client_id: str
    clean: bool
    subscriptions: Dict[str, int] = field(default_factory=dict)
    queued: Deque[Tuple[str, bytes, int]] = field(default_factory=deque)
    inflight: Dict[int, _Outbound] = field(default_factory=dict)
    incoming_qos2: Set[int] = field(default_factory=set)
    connection: Optional["_Connection"] = None
    _next_pid: int = 0

    def alloc_pid(self) -> Optional[int]:
        """Свободный packet id или None, если заняты все 65535"""
        if len(self.inflight) >= 65535:
            return None
        for _ in range(65535):
            self._next_pid = self._next_pid % 65535 + 1
            if self._next_pid not in self.inflight:
                return self._next_pid
        return None


class _Connection:
    """Одно TCP соединение: очередь исходящих пакетов и задача записи"""

    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        self.reader = reader
        self.writer = writer
        self.outbound: asyncio.Queue = asyncio.Queue()
        self.session: Optional[ClientSession] = None
        self.closed = False
        self._writer_task = asyncio.create_task(self._write_loop())

    def send(self, data: bytes) -> None:
        if not self.closed:
            self.outbound.put_nowait(data)

    async def _write_loop(self) -> None:
        try:
            while True:
                data = await self.outbound.get()
                if data is None:
                    break
                self.writer.write(data)
                # Склеиваем уже накопленное перед drain
                while not self.outbound.empty():
                    data = self.outbound.get_nowait()
                    if data is None:
                        await self.writer.drain()
                        return
                    self.writer.write(data)
                await self.writer.drain()
        except (ConnectionError, OSError):
            pass
        except asyncio.CancelledError:
            pass

    async def close(self, flush: bool = True) -> None:
        if self.closed:
            return
        self.closed = True
        if flush:
            self.outbound.put_nowait(None)
            try:
                await asyncio.wait_for(self._writer_task, timeout=1.0)
            except asyncio.TimeoutError:
                self._writer_task.cancel()
        else:
            self._writer_task.cancel()
        self.writer.close()
        try:
            await self.writer.wait_closed()
        except (ConnectionError, OSError):
            pass


# =============================================================================
# БРОКЕР
# =============================================================================

class MiniBroker:
    """
    Встроенный MQTT брокер.

    Пример:
        async with MiniBroker() as broker:
            endpoint = broker.endpoint   # tcp://127.0.0.1:<port>
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self.host = host
        self.port = port
        self._server: Optional[asyncio.base_events.Server] = None
        self._sessions: Dict[str, ClientSession] = {}
        self._connections: Set[_Connection] = set()
        self.stats = {"received": 0, "delivered": 0, "queued": 0, "dropped": 0}

    # ---- жизненный цикл ----

    async def start(self) -> "MiniBroker":
        try:
            self._server = await asyncio.start_server(self._handle, self.host, self.port)
        except OSError as e:
            raise BindFailed(f"Не удалось занять {self.host}:{self.port}: {e}") from e
        sock = self._server.sockets[0]
        self.host, self.port = sock.getsockname()[:2]
        logger.info("Мини-брокер слушает %s:%s", self.host, self.port)
        return self

    async def stop(self) -> None:
        if self._server is None:
            return
        self._server.close()
        for conn in list(self._connections):
            await conn.close(flush=False)
        await self._server.wait_closed()
        self._server = None
        self._sessions.clear()
        self._connections.clear()
        logger.info("Мини-брокер остановлен")

    async def serve_forever(self) -> None:
        if self._server is None:
            await self.start()
        await self._server.serve_forever()

    async def __aenter__(self) -> "MiniBroker":
        return await self.start()

    async def __aexit__(self, *exc) -> None:
        await self.stop()

    @property
    def address(self) -> Tuple[str, int]:
        return self.host, self.port

    @property
    def endpoint(self) -> str:
        return f"tcp://{self.host}:{self.port}"

    @property
    def running(self) -> bool:
        return self._server is not None

    @property
    def connection_count(self) -> int:
        return len(self._connections)

    def session(self, client_id: str) -> Optional[ClientSession]:
        return self._sessions.get(client_id)

    # ---- соединение ----

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        conn = _Connection(reader, writer)
        self._connections.add(conn)
        graceful = False
        try:
            keepalive = await self._handshake(conn)
            if keepalive is None:
                # отказной CONNACK должен уйти до закрытия
                graceful = True
                return
            timeout = keepalive * 1.5 if keepalive else None
            while True:
                if timeout:
                    ptype, flags, body = await asyncio.wait_for(read_packet(reader), timeout)
                else:
                    ptype, flags, body = await read_packet(reader)
                if ptype == DISCONNECT:
                    graceful = True
                    break
                self._dispatch(conn, ptype, flags, body)
        except (asyncio.IncompleteReadError, ConnectionError, asyncio.TimeoutError):
            pass
        except ProtocolViolation as e:
            logger.warning("Нарушение протокола: %s", e)
        except Exception:
            logger.exception("Ошибка обработки соединения")
        finally:
            self._detach(conn, graceful)
            self._connections.discard(conn)
            await conn.close(flush=graceful)

    async def _handshake(self, conn: _Connection) -> Optional[int]:
        ptype, _, body = await read_packet(conn.reader)
        if ptype != CONNECT:
            raise ProtocolViolation("первым пакетом ожидался CONNECT")
        cur = _Cursor(body)
        protocol = cur.string()
        level = cur.u8()
        flags = cur.u8()
        keepalive = cur.u16()
        if protocol not in ("MQTT", "MQIsdp") or level not in (3, 4):
            conn.send(packet(CONNACK, 0, bytes([0, CONNACK_BAD_PROTOCOL])))
            return None
        clean = bool(flags & 0x02)
        client_id = cur.string()
        if flags & 0x04:
            cur.string()   # will topic
            cur.binary()   # will message
        if flags & 0x80:
            cur.string()
        if flags & 0x40:
            cur.binary()

        if not client_id:
            if not clean:
                conn.send(packet(CONNACK, 0, bytes([0, CONNACK_IDENTIFIER_REJECTED])))
                return None
            client_id = f"auto-{uuid.uuid4().hex[:12]}"

        existing = self._sessions.get(client_id)
        if existing is not None and existing.connection is not None:
            # Новое подключение с тем же id вытесняет старое
            old = existing.connection
            existing.connection = None
            old.session = None
            await old.close(flush=False)

        if clean or existing is None or existing.clean:
            session = ClientSession(client_id=client_id, clean=clean)
            self._sessions[client_id] = session
            session_present = False
        else:
            session = existing
            session_present = True

        session.connection = conn
        conn.session = session
        conn.send(packet(CONNACK, 0, bytes([1 if session_present else 0, CONNACK_ACCEPTED])))
        if session_present:
            self._resume(session)
        logger.debug("CONNECT %s clean=%s present=%s", client_id, clean, session_present)
        return keepalive

    def _resume(self, session: ClientSession) -> None:
        """Повторить неподтверждённые и отдать накопленные сообщения"""
        conn = session.connection
        for pid, msg in session.inflight.items():
            if msg.released:
                conn.send(ack_packet(PUBREL, pid))
            else:
                conn.send(publish_packet(msg.topic, msg.payload, msg.qos, pid, dup=True))
        self._drain_queued(session)

    def _detach(self, conn: _Connection, graceful: bool) -> None:
        session = conn.session
        if session is None:
            return
        conn.session = None
        if session.connection is conn:
            session.connection = None
        if session.clean and self._sessions.get(session.client_id) is session:
            del self._sessions[session.client_id]
        logger.debug("DISCONNECT %s graceful=%s", session.client_id, graceful)

    # ---- пакеты ----

    def _dispatch(self, conn: _Connection, ptype: int, flags: int, body: bytes) -> None:
        session = conn.session
        if ptype == PUBLISH:
            self._on_publish(conn, session, flags, body)
        elif ptype == PUBACK or ptype == PUBCOMP:
            session.inflight.pop(_Cursor(body).u16(), None)
            if session.queued:
                self._drain_queued(session)
        elif ptype == PUBREC:
            pid = _Cursor(body).u16()
            msg = session.inflight.get(pid)
            if msg is not None:
                msg.released = True
            conn.send(ack_packet(PUBREL, pid))
        elif ptype == PUBREL:
            pid = _Cursor(body).u16()
            session.incoming_qos2.discard(pid)
            conn.send(ack_packet(PUBCOMP, pid))
        elif ptype == SUBSCRIBE:
            self._on_subscribe(conn, session, body)
        elif ptype == UNSUBSCRIBE:
            cur = _Cursor(body)
            pid = cur.u16()
            while not cur.exhausted:
                session.subscriptions.pop(cur.string(), None)
            conn.send(ack_packet(UNSUBACK, pid))
        elif ptype == PINGREQ:
            conn.send(packet(PINGRESP, 0))
        else:
            raise ProtocolViolation(f"неожиданный пакет типа {ptype}")

    def _on_publish(self, conn: _Connection, session: ClientSession, flags: int, body: bytes) -> None:
        qos = (flags >> 1) & 0x03
        if qos > 2:
            raise ProtocolViolation("qos 3")
        cur = _Cursor(body)
        topic = cur.string()
        pid = cur.u16() if qos > 0 else None
        payload = cur.rest()
        self.stats["received"] += 1

        if qos == 2:
            # Доставка при первом получении, повторы до PUBREL отбрасываются
            if pid not in session.incoming_qos2:
                session.incoming_qos2.add(pid)
                self._route(topic, payload, qos)
            conn.send(ack_packet(PUBREC, pid))
            return
        self._route(topic, payload, qos)
        if qos == 1:
            conn.send(ack_packet(PUBACK, pid))

    def _on_subscribe(self, conn: _Connection, session: ClientSession, body: bytes) -> None:
        cur = _Cursor(body)
        pid = cur.u16()
        granted = bytearray()
        while not cur.exhausted:
            topic_filter = cur.string()
            requested = cur.u8() & 0x03
            qos = min(requested, 2)
            session.subscriptions[topic_filter] = qos
            granted.append(qos)
        if not granted:
            raise ProtocolViolation("SUBSCRIBE без фильтров")
        conn.send(packet(SUBACK, 0, struct.pack(">H", pid) + bytes(granted)))

    # ---- маршрутизация ----

    def _route(self, topic: str, payload: bytes, qos: int) -> None:
        for session in list(self._sessions.values()):
            matched = [q for f, q in session.subscriptions.items() if topic_matches(f, topic)]
            if not matched:
                continue
            effective = min(qos, max(matched))
            if session.connection is not None:
                self._send_publish(session, topic, payload, effective)
            elif not session.clean and effective > 0:
                session.queued.append((topic, payload, effective))
                self.stats["queued"] += 1
            else:
                self.stats["dropped"] += 1

    def _send_publish(self, session: ClientSession, topic: str, payload: bytes, qos: int) -> None:
        pid = None
        if qos > 0:
            # Очередь непуста: новое сообщение встаёт за ней, порядок сохраняется
            pid = None if session.queued else session.alloc_pid()
            if pid is None:
                session.queued.append((topic, payload, qos))
                self.stats["queued"] += 1
                return
            session.inflight[pid] = _Outbound(topic, payload, qos)
        session.connection.send(publish_packet(topic, payload, qos, pid))
        self.stats["delivered"] += 1

    def _drain_queued(self, session: ClientSession) -> None:
        """Отправить накопленное, пока есть свободные packet id"""
        while session.queued and session.connection is not None:
            pid = session.alloc_pid()
            if pid is None:
                return
            topic, payload, qos = session.queued.popleft()
            session.inflight[pid] = _Outbound(topic, payload, qos)
            session.connection.send(publish_packet(topic, payload, qos, pid))
            self.stats["delivered"] += 1


async def mini_broker_serve(listen_addr: Tuple[str, int] = ("127.0.0.1", 0)) -> MiniBroker:
    """Запустить мини-брокер; при порте 0 выбирается свободный"""
    host, port = listen_addr
    return await MiniBroker(host, port).start()
