"""
Внесение сетевых сбоев: экспоненциальное расписание отказов, управление
TCP прокси (Toxiproxy API или локальный прокси) и переподключение подписчиков.
"""

from __future__ import annotations

import asyncio
import logging
import socket
import struct
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass
from typing import Any, Awaitable, Callable, Dict, List, Optional, Set, Tuple

import numpy as np

from mqbench.core import (
    CONFIG,
    SYSTEM_CLOCK,
    AdminUnreachable,
    BenchError,
    BindFailed,
    IClock,
    ProxyNotFound,
)

logger = logging.getLogger(__name__)

NS_PER_S = 1_000_000_000
RESET_TOXIC = "mqbench_reset"


# =============================================================================
# РАСПИСАНИЕ
# =============================================================================

@dataclass(frozen=True)
class FailureEvent:
    """Смещения от начала прогона, секунды"""
    fail_at_s: float
    recover_at_s: float

    @property
    def downtime_s(self) -> float:
        return self.recover_at_s - self.fail_at_s


def schedule_failures(mttf_s: float, mttr_s: float, duration_s: float,
                      rng_seed: int) -> List[FailureEvent]:
    """
    Расписание отказов: промежутки от восстановления до следующего отказа
    ~ Exp(среднее mttf_s), восстановление ровно через mttr_s. Отказы после
    duration_s отбрасываются; при одинаковом seed результат одинаков.
    """
    if not mttf_s > 0 or mttr_s < 0 or not duration_s > 0:
        raise ValueError("mttf_s > 0, mttr_s ≥ 0, duration_s > 0")
    rng = np.random.default_rng(rng_seed)
    events: List[FailureEvent] = []
    up_since = 0.0
    while True:
        fail_at = up_since + float(rng.exponential(mttf_s))
        if fail_at >= duration_s:
            return events
        recover_at = fail_at + mttr_s
        events.append(FailureEvent(fail_at, recover_at))
        up_since = recover_at


def downtime_fraction(schedule: List[FailureEvent], duration_s: float) -> float:
    """Доля времени прогона, когда прокси был в отказе"""
    down = sum(max(min(e.recover_at_s, duration_s) - e.fail_at_s, 0.0) for e in schedule)
    return down / duration_s


# =============================================================================
# TOXIPROXY
# =============================================================================

class ToxiproxyClient:
    """Клиент административного HTTP API Toxiproxy на aiohttp"""

    def __init__(self, admin_url: str, session: Any = None, timeout_s: float = 5.0):
        self.admin_url = admin_url.rstrip("/")
        self.timeout_s = timeout_s
        self._session = session
        self._owns_session = session is None

    async def __aenter__(self) -> "ToxiproxyClient":
        return self

    async def __aexit__(self, *exc) -> None:
        await self.close()

    async def close(self) -> None:
        if self._owns_session and self._session is not None:
            await self._session.close()
            self._session = None

    def _http(self):
        if self._session is None:
            import aiohttp
            self._session = aiohttp.ClientSession(
                timeout=aiohttp.ClientTimeout(total=self.timeout_s)
            )
        return self._session

    async def _request(self, method: str, path: str, payload: Optional[dict] = None,
                       allow: Tuple[int, ...] = ()) -> Tuple[int, Any]:
        import aiohttp
        url = f"{self.admin_url}{path}"
        try:
            async with self._http().request(method, url, json=payload) as response:
                status = response.status
                body = await response.json(content_type=None) if status != 204 else None
        except (aiohttp.ClientError, asyncio.TimeoutError, OSError) as e:
            raise AdminUnreachable(f"{method} {url}: {e}") from e
        if status in allow or status < 300:
            return status, body
        if status == 404:
            raise ProxyNotFound(f"{method} {path}: не найдено")
        raise AdminUnreachable(f"{method} {url}: HTTP {status} {body}")

    async def get_proxy(self, name: str) -> dict:
        _, body = await self._request("GET", f"/proxies/{name}")
        return body

    async def create_proxy(self, name: str, listen: str, upstream: str, enabled: bool = True) -> dict:
        """Создать прокси; существующий с тем же именем перенастраивается"""
        payload = {"name": name, "listen": listen, "upstream": upstream, "enabled": enabled}
        status, body = await self._request("POST", "/proxies", payload, allow=(409,))
        if status == 409:
            _, body = await self._request("POST", f"/proxies/{name}", payload)
        return body

    async def delete_proxy(self, name: str) -> None:
        await self._request("DELETE", f"/proxies/{name}", allow=(404,))

    async def set_enabled(self, name: str, enabled: bool) -> dict:
        _, body = await self._request("POST", f"/proxies/{name}", {"enabled": enabled})
        return body

    async def add_toxic(self, name: str, toxic: dict) -> None:
        await self._request("POST", f"/proxies/{name}/toxics", toxic, allow=(409,))

    async def remove_toxic(self, name: str, toxic_name: str) -> None:
        await self._request("DELETE", f"/proxies/{name}/toxics/{toxic_name}", allow=(404,))


def reset_peer_toxic() -> dict:
    return {
        "name": RESET_TOXIC,
        "type": "reset_peer",
        "stream": "downstream",
        "toxicity": 1.0,
        "attributes": {"timeout": 0},
    }


# =============================================================================
# ИНЖЕКТОРЫ
# =============================================================================

class IFaultInjector(ABC):
    """Разрыв и восстановление пути подписчик → брокер"""

    @abstractmethod
    async def apply_failure(self) -> None:
        pass

    @abstractmethod
    async def restore(self) -> None:
        pass

    async def close(self) -> None:
        pass


class ToxiproxyInjector(IFaultInjector):
    """Сбой через Toxiproxy: reset_peer (RST живым соединениям) и отключение прокси"""

    def __init__(self, client: ToxiproxyClient, proxy_name: str):
        self.client = client
        self.proxy_name = proxy_name

    async def apply_failure(self) -> None:
        await self.client.get_proxy(self.proxy_name)
        await self.client.add_toxic(self.proxy_name, reset_peer_toxic())
        await self.client.set_enabled(self.proxy_name, False)

    async def restore(self) -> None:
        await self.client.get_proxy(self.proxy_name)
        await self.client.remove_toxic(self.proxy_name, RESET_TOXIC)
        await self.client.set_enabled(self.proxy_name, True)

    async def close(self) -> None:
        await self.client.close()


async def apply_failure(proxy_admin: str, proxy_name: str) -> None:
    async with ToxiproxyClient(proxy_admin) as client:
        await ToxiproxyInjector(client, proxy_name).apply_failure()


async def restore(proxy_admin: str, proxy_name: str) -> None:
    async with ToxiproxyClient(proxy_admin) as client:
        await ToxiproxyInjector(client, proxy_name).restore()


def _reset(writer: asyncio.StreamWriter) -> None:
    """Закрыть соединение с RST вместо FIN"""
    sock = writer.get_extra_info("socket")
    if sock is not None:
        try:
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_LINGER, struct.pack("ii", 1, 0))
        except OSError:
            pass
    writer.transport.abort()


class LocalTcpProxy(IFaultInjector):
    """
    TCP прокси в этом же процессе. В отказе рвёт все соединения с RST и
    сбрасывает новые сразу после accept.
    """

    def __init__(self, upstream: Tuple[str, int], listen: Tuple[str, int] = ("127.0.0.1", 0)):
        self.upstream = upstream
        self.host, self.port = listen
        self.failed = False
        self._server: Optional[asyncio.base_events.Server] = None
        self._links: Set[Tuple[asyncio.StreamWriter, asyncio.StreamWriter]] = set()
        self.resets = 0

    async def start(self) -> "LocalTcpProxy":
        try:
            self._server = await asyncio.start_server(self._handle, self.host, self.port)
        except OSError as e:
            raise BindFailed(f"Прокси не смог занять {self.host}:{self.port}: {e}") from e
        self.host, self.port = self._server.sockets[0].getsockname()[:2]
        logger.info("Локальный прокси %s:%s -> %s:%s", self.host, self.port, *self.upstream)
        return self

    @property
    def endpoint(self) -> str:
        return f"tcp://{self.host}:{self.port}"

    @property
    def link_count(self) -> int:
        return len(self._links)

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        if self.failed:
            _reset(writer)
            return
        try:
            up_reader, up_writer = await asyncio.open_connection(*self.upstream)
        except OSError:
            _reset(writer)
            return
        link = (writer, up_writer)
        self._links.add(link)
        try:
            await asyncio.gather(self._pump(reader, up_writer), self._pump(up_reader, writer))
        finally:
            self._links.discard(link)
            for w in link:
                if not w.is_closing():
                    w.close()

    @staticmethod
    async def _pump(reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            while True:
                data = await reader.read(65536)
                if not data:
                    break
                writer.write(data)
                await writer.drain()
        except (ConnectionError, OSError):
            pass
        finally:
            if not writer.is_closing():
                try:
                    writer.write_eof()
                except (OSError, RuntimeError):
                    writer.close()

    async def apply_failure(self) -> None:
        self.failed = True
        for client_writer, upstream_writer in list(self._links):
            _reset(client_writer)
            _reset(upstream_writer)
            self.resets += 1
        self._links.clear()

    async def restore(self) -> None:
        self.failed = False

    async def close(self) -> None:
        self.failed = True
        await self.apply_failure()
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None


# =============================================================================
# ИСПОЛНЕНИЕ РАСПИСАНИЯ
# =============================================================================

@dataclass
class ExecutedFault:
    event_index: int
    scheduled_fail_s: float
    scheduled_recover_s: float
    actual_fail_ns: int = 0
    actual_recover_ns: int = 0
    status: str = "ok"

    @property
    def downtime_s(self) -> float:
        if not self.actual_fail_ns or not self.actual_recover_ns:
            return 0.0
        return (self.actual_recover_ns - self.actual_fail_ns) / NS_PER_S

    def to_dict(self) -> dict:
        return asdict(self)


ReconnectHook = Callable[[], Awaitable[Any]]


async def run_fault_schedule(schedule: List[FailureEvent], injector: IFaultInjector,
                             reconnect_hook: Optional[ReconnectHook] = None,
                             clock: IClock = SYSTEM_CLOCK,
                             run_start_ns: Optional[int] = None,
                             stop: Optional[asyncio.Event] = None,
                             reconnect_timeout_s: float = CONFIG["reconnect_timeout_s"]
                             ) -> List[ExecutedFault]:
    """
    Выполнить расписание последовательно. Ошибки отдельного события
    логируются и отмечаются в статусе, следующие события выполняются.
    run_start_ns: монотонное время начала прогона.
    """
    start = clock.monotonic_ns() if run_start_ns is None else run_start_ns
    log: List[ExecutedFault] = []

    for index, event in enumerate(schedule):
        entry = ExecutedFault(index, event.fail_at_s, event.recover_at_s)
        log.append(entry)
        if stop is not None and stop.is_set():
            entry.status = "skipped"
            continue

        await clock.sleep_until(start + int(event.fail_at_s * NS_PER_S), stop)
        if stop is not None and stop.is_set():
            entry.status = "skipped"
            continue

        try:
            await injector.apply_failure()
            entry.actual_fail_ns = clock.time_ns()
            logger.info("Сбой %d применён (план %.2f с)", index, event.fail_at_s)
        except BenchError as e:
            entry.status = "apply_failed"
            logger.warning("Сбой %d не применён: %s", index, e)

        # При stop восстанавливаем сразу
        await clock.sleep_until(start + int(event.recover_at_s * NS_PER_S), stop)
        try:
            await injector.restore()
            entry.actual_recover_ns = clock.time_ns()
            logger.info("Сбой %d снят (план %.2f с)", index, event.recover_at_s)
        except BenchError as e:
            entry.status = "restore_failed"
            logger.warning("Сбой %d не снят: %s", index, e)
            continue

        if entry.status != "ok" or reconnect_hook is None:
            continue
        try:
            await asyncio.wait_for(reconnect_hook(), timeout=reconnect_timeout_s)
        except asyncio.TimeoutError:
            entry.status = "reconnect_timeout"
            logger.warning("Переподключение после сбоя %d не уложилось в %.1f с",
                           index, reconnect_timeout_s)
        except Exception:
            entry.status = "reconnect_failed"
            logger.exception("Переподключение после сбоя %d не удалось", index)

    return log


def total_downtime_s(executed: List[ExecutedFault]) -> float:
    return sum(e.downtime_s for e in executed)


def executed_summary(executed: List[ExecutedFault]) -> Dict[str, int]:
    counts: Dict[str, int] = {}
    for entry in executed:
        counts[entry.status] = counts.get(entry.status, 0) + 1
    return counts
