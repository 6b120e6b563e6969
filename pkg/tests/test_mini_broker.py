"""
Тесты встроенного MQTT брокера: сырые пакеты и клиент paho
"""

import asyncio
import importlib.util
import struct
import unittest

from mqbench.core import TransportKind
from mqbench.mini_broker import (
    CONNACK,
    CONNECT,
    DISCONNECT,
    PUBACK,
    PUBCOMP,
    PUBLISH,
    PUBREC,
    PUBREL,
    SUBACK,
    SUBSCRIBE,
    ClientSession,
    MiniBroker,
    _Cursor,
    _Outbound,
    ack_packet,
    encode_remaining_length,
    encode_string,
    packet,
    publish_packet,
    read_packet,
)
from mqbench.transport import TransportOptions, connect

HAS_PAHO = importlib.util.find_spec("paho") is not None
TIMEOUT = 2.0


def connect_packet(client_id: str, clean: bool = True, level: int = 4, keepalive: int = 0) -> bytes:
    flags = 0x02 if clean else 0
    body = encode_string("MQTT") + bytes([level, flags]) + struct.pack(">H", keepalive)
    return packet(CONNECT, 0, body + encode_string(client_id))


def subscribe_packet(pid: int, topic_filter: str, qos: int) -> bytes:
    return packet(SUBSCRIBE, 0x02, struct.pack(">H", pid) + encode_string(topic_filter) + bytes([qos]))


class RawClient:
    """Клиент на уровне пакетов"""

    def __init__(self, reader, writer):
        self.reader = reader
        self.writer = writer

    @classmethod
    async def open(cls, broker: MiniBroker, client_id: str, clean: bool = True, level: int = 4):
        reader, writer = await asyncio.open_connection(broker.host, broker.port)
        client = cls(reader, writer)
        await client.send(connect_packet(client_id, clean, level))
        return client

    async def send(self, data: bytes) -> None:
        self.writer.write(data)
        await self.writer.drain()

    async def recv(self):
        return await asyncio.wait_for(read_packet(self.reader), TIMEOUT)

    async def wait_closed_by_peer(self) -> bytes:
        return await asyncio.wait_for(self.reader.read(), TIMEOUT)

    async def close(self) -> None:
        self.writer.close()
        try:
            await self.writer.wait_closed()
        except (ConnectionError, OSError):
            pass


def parse_publish(flags: int, body: bytes):
    qos = (flags >> 1) & 0x03
    cur = _Cursor(body)
    topic = cur.string()
    pid = cur.u16() if qos else None
    return topic, qos, pid, cur.rest()


class TestPacketCodec(unittest.TestCase):

    def test_remaining_length(self):
        self.assertEqual(encode_remaining_length(0), b"\x00")
        self.assertEqual(encode_remaining_length(127), b"\x7f")
        self.assertEqual(encode_remaining_length(128), b"\x80\x01")
        self.assertEqual(encode_remaining_length(16383), b"\xff\x7f")

    def test_pubrel_flags(self):
        self.assertEqual(ack_packet(PUBREL, 1)[0], (PUBREL << 4) | 0x02)
        self.assertEqual(ack_packet(PUBACK, 1)[0], PUBACK << 4)

    def test_publish_dup_flag(self):
        self.assertEqual(publish_packet("t", b"", 1, 1, dup=True)[0] & 0x08, 0x08)


class TestMiniBrokerRaw(unittest.TestCase):

    def test_connack_accepted(self):
        async def scenario():
            async with MiniBroker() as broker:
                client = await RawClient.open(broker, "c1")
                reply = await client.recv()
                await client.close()
                return reply

        self.assertEqual(asyncio.run(scenario()), (CONNACK, 0, b"\x00\x00"))

    def test_bad_protocol_level(self):
        async def scenario():
            async with MiniBroker() as broker:
                client = await RawClient.open(broker, "c1", level=5)
                reply = await client.recv()
                rest = await client.wait_closed_by_peer()
                return reply, rest

        reply, rest = asyncio.run(scenario())
        self.assertEqual(reply, (CONNACK, 0, b"\x00\x01"))
        self.assertEqual(rest, b"")

    def test_empty_id_without_clean_session(self):
        async def scenario():
            async with MiniBroker() as broker:
                client = await RawClient.open(broker, "", clean=False)
                return await client.recv()

        self.assertEqual(asyncio.run(scenario()), (CONNACK, 0, b"\x00\x02"))

    def test_qos1_publish_acked_and_routed(self):
        async def scenario():
            async with MiniBroker() as broker:
                sub = await RawClient.open(broker, "sub")
                await sub.recv()
                await sub.send(subscribe_packet(1, "bench/#", 1))
                suback = await sub.recv()

                pub = await RawClient.open(broker, "pub")
                await pub.recv()
                await pub.send(publish_packet("bench/0", b"payload", 1, 7))
                puback = await pub.recv()
                delivered = await sub.recv()
                await sub.close()
                await pub.close()
                return suback, puback, delivered

        suback, puback, delivered = asyncio.run(scenario())
        self.assertEqual(suback, (SUBACK, 0, b"\x00\x01\x01"))
        self.assertEqual(puback, (PUBACK, 0, b"\x00\x07"))
        ptype, flags, body = delivered
        self.assertEqual(ptype, PUBLISH)
        topic, qos, pid, payload = parse_publish(flags, body)
        self.assertEqual((topic, qos, payload), ("bench/0", 1, b"payload"))
        self.assertIsNotNone(pid)

    def test_qos_downgraded_to_subscription(self):
        async def scenario():
            async with MiniBroker() as broker:
                sub = await RawClient.open(broker, "sub")
                await sub.recv()
                await sub.send(subscribe_packet(1, "t", 0))
                await sub.recv()
                pub = await RawClient.open(broker, "pub")
                await pub.recv()
                await pub.send(publish_packet("t", b"x", 1, 1))
                await pub.recv()
                _, flags, body = await sub.recv()
                await sub.close()
                await pub.close()
                return parse_publish(flags, body)

        self.assertEqual(asyncio.run(scenario()), ("t", 0, None, b"x"))

    def test_qos2_duplicate_delivered_once(self):
        async def scenario():
            async with MiniBroker() as broker:
                sub = await RawClient.open(broker, "sub")
                await sub.recv()
                await sub.send(subscribe_packet(1, "t", 0))
                await sub.recv()
                pub = await RawClient.open(broker, "pub")
                await pub.recv()
                await pub.send(publish_packet("t", b"once", 2, 9))
                rec1 = await pub.recv()
                await pub.send(publish_packet("t", b"once", 2, 9, dup=True))
                rec2 = await pub.recv()
                await pub.send(ack_packet(PUBREL, 9))
                comp = await pub.recv()
                first = await sub.recv()
                with self.assertRaises(asyncio.TimeoutError):
                    await asyncio.wait_for(read_packet(sub.reader), 0.3)
                await sub.close()
                await pub.close()
                return rec1, rec2, comp, first, broker.stats

        rec1, rec2, comp, first, stats = asyncio.run(scenario())
        self.assertEqual(rec1, (PUBREC, 0, b"\x00\x09"))
        self.assertEqual(rec2, rec1)
        self.assertEqual(comp, (PUBCOMP, 0, b"\x00\x09"))
        self.assertEqual(first[0], PUBLISH)
        self.assertEqual(stats["delivered"], 1)

    def test_persistent_session_redelivers_queued(self):
        """Подписчик clean_session=0 уходит, 5 сообщений QoS 1 ждут его возвращения"""
        async def scenario():
            async with MiniBroker() as broker:
                sub = await RawClient.open(broker, "sub", clean=False)
                await sub.recv()
                await sub.send(subscribe_packet(1, "bench/0", 1))
                await sub.recv()
                await sub.send(packet(DISCONNECT, 0))
                await sub.wait_closed_by_peer()
                await sub.close()

                pub = await RawClient.open(broker, "pub")
                await pub.recv()
                for pid in range(1, 6):
                    await pub.send(publish_packet("bench/0", bytes([pid]), 1, pid))
                    await pub.recv()
                queued = broker.stats["queued"]

                sub = await RawClient.open(broker, "sub", clean=False)
                connack = await sub.recv()
                redelivered = []
                for _ in range(5):
                    _, flags, body = await sub.recv()
                    redelivered.append(parse_publish(flags, body)[3])
                await sub.close()
                await pub.close()
                return queued, connack, redelivered

        queued, connack, redelivered = asyncio.run(scenario())
        self.assertEqual(queued, 5)
        self.assertEqual(connack, (CONNACK, 0, b"\x01\x00"))
        self.assertEqual(redelivered, [bytes([i]) for i in range(1, 6)])

    def test_clean_session_discards_state(self):
        async def scenario():
            async with MiniBroker() as broker:
                sub = await RawClient.open(broker, "sub")
                await sub.recv()
                await sub.send(subscribe_packet(1, "t", 1))
                await sub.recv()
                await sub.send(packet(DISCONNECT, 0))
                await sub.wait_closed_by_peer()
                await sub.close()
                return broker.session("sub")

        self.assertIsNone(asyncio.run(scenario()))

    def test_stop_and_restart_port(self):
        async def scenario():
            broker = await MiniBroker().start()
            self.assertTrue(broker.running)
            await broker.stop()
            await broker.stop()
            return broker.running

        self.assertFalse(asyncio.run(scenario()))


class RecordingConnection:
    """Соединение без сокета: пакеты складываются в sent"""

    def __init__(self):
        self.sent = []
        self.session = None

    def send(self, data: bytes) -> None:
        self.sent.append(data)


class TestPacketIdExhaustion(unittest.TestCase):
    """Подписчик без свободных packet id не мешает издателю"""

    def setUp(self):
        self.broker = MiniBroker()
        self.conn = RecordingConnection()
        self.session = ClientSession("slow", clean=True, subscriptions={"bench/#": 1},
                                     connection=self.conn)
        self.session.inflight = {pid: _Outbound("bench/0", b"old", 1) for pid in range(1, 65536)}
        self.conn.session = self.session
        self.broker._sessions["slow"] = self.session

    def test_alloc_pid_reports_exhaustion(self):
        self.assertIsNone(self.session.alloc_pid())

    def test_messages_wait_for_free_ids_in_order(self):
        self.broker._route("bench/0", b"a", 1)
        self.broker._route("bench/0", b"b", 1)
        self.assertEqual(self.conn.sent, [])
        self.assertEqual(len(self.session.queued), 2)

        self.broker._dispatch(self.conn, PUBACK, 0, struct.pack(">H", 7))
        self.assertEqual(self.conn.sent, [publish_packet("bench/0", b"a", 1, 7)])

        self.broker._dispatch(self.conn, PUBACK, 0, struct.pack(">H", 9))
        self.assertEqual(self.conn.sent[1], publish_packet("bench/0", b"b", 1, 9))
        self.assertFalse(self.session.queued)
        self.assertEqual(self.broker.stats["delivered"], 2)


@unittest.skipUnless(HAS_PAHO, "paho-mqtt не установлен")
class TestMiniBrokerWithPaho(unittest.TestCase):

    def test_live_session_qos1(self):
        async def scenario():
            async with MiniBroker() as broker:
                received = []
                sub = await connect(TransportKind.MQTT, broker.endpoint, TransportOptions("sub"))
                await sub.subscribe("bench/0", 1, lambda t, p, ts: received.append(p))
                pub = await connect(TransportKind.MQTT, broker.endpoint, TransportOptions("pub"))
                await pub.publish("bench/0", b"hello", 1)
                for _ in range(100):
                    if received:
                        break
                    await asyncio.sleep(0.01)
                await pub.disconnect()
                await sub.disconnect()
                return received

        self.assertEqual(asyncio.run(scenario()), [b"hello"])

    def test_wildcard_fanout(self):
        async def scenario():
            async with MiniBroker() as broker:
                received = []
                subs = []
                for i in range(3):
                    sub = await connect(TransportKind.MQTT, broker.endpoint,
                                        TransportOptions(f"sub-{i}"))
                    await sub.subscribe("bench/#", 0, lambda t, p, ts: received.append(t))
                    subs.append(sub)
                pub = await connect(TransportKind.MQTT, broker.endpoint, TransportOptions("pub"))
                await pub.publish("bench/x", b"m", 0)
                for _ in range(100):
                    if len(received) >= 3:
                        break
                    await asyncio.sleep(0.01)
                for session in subs + [pub]:
                    await session.disconnect()
                return received

        self.assertEqual(asyncio.run(scenario()), ["bench/x"] * 3)


if __name__ == "__main__":
    unittest.main()
