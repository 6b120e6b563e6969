"""
Жизненный цикл эксперимента: брокер в контейнере, порядок запуска клиентов,
нагрузка, мониторинг, сбои, сбор артефактов и серии прогонов.
"""

from __future__ import annotations

import asyncio
import logging
import uuid
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union
from urllib.parse import urlsplit

from mqbench.chaos import (
    ExecutedFault,
    IFaultInjector,
    LocalTcpProxy,
    ToxiproxyClient,
    ToxiproxyInjector,
    run_fault_schedule,
    schedule_failures,
    total_downtime_s,
)
from mqbench.core import (
    CONFIG,
    SYSTEM_CLOCK,
    AbortedByTransport,
    ConfigError,
    ConnectionEvent,
    ContainerNotFound,
    EndpointUnreachable,
    ExperimentSpec,
    IClock,
    ImageUnavailable,
    ReadinessTimeout,
    ScenarioType,
    SpecInvalid,
    StartFailed,
    SummaryReport,
    TransportError,
    TransportKind,
    validate_spec,
)
from mqbench.export import ResultExporter
from mqbench.load import PublisherStats, SampleBuffer, run_publisher, run_subscriber, stagger_offsets
from mqbench.metrics import summarize
from mqbench.mini_broker import MiniBroker
from mqbench.resmon import (
    DockerStatsClient,
    IStatsClient,
    ProcessStatsClient,
    ResourceSeries,
    monitor,
)
from mqbench.transport import BaseSession, TransportOptions, connect

logger = logging.getLogger(__name__)

NS_PER_S = 1_000_000_000

SWEEP_AXES = ("pairs", "payload_bytes", "fanout_subscribers", "qos")

# Основная ось сценария: имя каталога одиночного прогона
SCENARIO_AXIS = {
    ScenarioType.LATENCY_PAYLOAD: "payload_bytes",
    ScenarioType.THROUGHPUT_PAIRS: "pairs",
    ScenarioType.FANOUT: "fanout_subscribers",
    ScenarioType.QOS_RELIABILITY: "qos",
}


# =============================================================================
# МОДЕЛИ
# =============================================================================

@dataclass
class BrokerDeployment:
    """Как поднять брокер для прогона"""
    name: str
    image: str = ""
    container_ctl: Optional[str] = None
    env: Dict[str, str] = field(default_factory=dict)
    ports: List[Tuple[int, int]] = field(default_factory=list)
    nofile_limit: int = CONFIG["default_nofile"]
    cpu_limit: Optional[float] = None
    mem_limit: Optional[str] = None
    command: Optional[Union[str, List[str]]] = None
    engine: str = "docker"
    host: str = "127.0.0.1"

    @property
    def readiness_port(self) -> Optional[int]:
        return self.ports[0][0] if self.ports else None

    def validate(self, planned_sessions: int) -> List[str]:
        violations = []
        if self.engine not in ("docker", "inprocess"):
            violations.append("broker.engine ∈ {docker, inprocess}")
        if self.engine == "docker" and not self.image:
            violations.append("broker.image is required for the docker engine")
        if self.nofile_limit < 2 * planned_sessions:
            violations.append(
                f"nofile_limit {self.nofile_limit} < 2 × {planned_sessions} planned sessions"
            )
        return violations

    def to_dict(self) -> dict:
        data = asdict(self)
        data["ports"] = [list(p) for p in self.ports]
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "BrokerDeployment":
        values = dict(data)
        values["ports"] = [tuple(int(x) for x in p) for p in values.get("ports", [])]
        try:
            return cls(**values)
        except TypeError as e:
            raise ConfigError(f"broker: {e}") from e


@dataclass
class FaultSettings:
    """Путь подписчиков через прокси сбоев"""
    mode: str = "local"
    admin_url: str = "http://127.0.0.1:8474"
    proxy_name: str = "mqbench_broker"
    listen: str = "127.0.0.1:0"
    upstream: Optional[str] = None
    toxics: List[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "FaultSettings":
        try:
            settings = cls(**data)
        except TypeError as e:
            raise ConfigError(f"faults: {e}") from e
        if settings.mode not in ("local", "toxiproxy"):
            raise ConfigError("faults.mode ∈ {local, toxiproxy}")
        return settings


@dataclass
class RunArtifacts:
    spec: ExperimentSpec
    directory: Path
    samples_path: Optional[Path] = None
    connections_path: Optional[Path] = None
    resources_path: Optional[Path] = None
    faults_path: Optional[Path] = None
    summary_path: Optional[Path] = None
    summary: Optional[SummaryReport] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None and self.summary is not None

    @property
    def degenerate(self) -> bool:
        return self.summary is not None and self.summary.degenerate

    def paths(self) -> List[Path]:
        return [p for p in (self.samples_path, self.connections_path, self.resources_path,
                            self.faults_path, self.summary_path) if p is not None]


@dataclass
class SweepResult:
    axis: str
    artifacts: List[RunArtifacts] = field(default_factory=list)
    stopped_early_at: Any = None

    @property
    def saturated(self) -> bool:
        return self.stopped_early_at is not None


# =============================================================================
# КОНТЕЙНЕРНЫЕ ДВИЖКИ
# =============================================================================

async def wait_for_port(host: str, port: int, timeout_s: float = CONFIG["readiness_timeout_s"],
                        interval_s: float = 0.2) -> None:
    """Ждать, пока порт принимает TCP подключения"""
    loop = asyncio.get_running_loop()
    deadline = loop.time() + timeout_s
    while True:
        try:
            _, writer = await asyncio.wait_for(asyncio.open_connection(host, port), timeout=1.0)
            writer.close()
            try:
                await writer.wait_closed()
            except OSError:
                pass
            return
        except (OSError, asyncio.TimeoutError):
            if loop.time() >= deadline:
                raise ReadinessTimeout(f"{host}:{port} не принимает подключения {timeout_s:g} с")
            await asyncio.sleep(interval_s)


class IContainerEngine(ABC):
    """Поднимает и убирает брокер"""

    @abstractmethod
    async def start(self, deployment: BrokerDeployment) -> str:
        pass

    @abstractmethod
    async def stop(self, container_id: str) -> None:
        pass

    @abstractmethod
    def stats_client(self, container_id: str) -> IStatsClient:
        pass

    def endpoint_for(self, container_id: str) -> Optional[str]:
        """Фактический адрес брокера, если он известен только после старта"""
        return None

    async def close(self) -> None:
        pass


class DockerEngine(IContainerEngine):
    """Брокер в контейнере через docker SDK"""

    def __init__(self, base_url: Optional[str] = None, client: Any = None,
                 readiness_timeout_s: float = CONFIG["readiness_timeout_s"],
                 stop_grace_s: int = CONFIG["stop_grace_s"]):
        self.base_url = base_url
        self.readiness_timeout_s = readiness_timeout_s
        self.stop_grace_s = stop_grace_s
        self._client = client

    def _init_docker(self):
        """Инициализация docker клиента"""
        import docker
        if self._client is None:
            try:
                self._client = (docker.DockerClient(base_url=self.base_url)
                                if self.base_url else docker.from_env())
            except docker.errors.DockerException as e:
                raise StartFailed(f"Контейнерный движок недоступен: {e}") from e
        return self._client

    def _run(self, deployment: BrokerDeployment) -> str:
        import docker
        from docker.types import Ulimit
        client = self._init_docker()

        try:
            client.images.get(deployment.image)
        except docker.errors.ImageNotFound:
            logger.info("Загрузка образа %s", deployment.image)
            try:
                client.images.pull(deployment.image)
            except docker.errors.APIError as e:
                raise ImageUnavailable(f"Образ {deployment.image} недоступен: {e}") from e

        # Свежий контейнер на каждый прогон
        try:
            client.containers.get(deployment.name).remove(force=True)
            logger.info("Удалён старый контейнер %s", deployment.name)
        except docker.errors.NotFound:
            pass

        kwargs: Dict[str, Any] = {
            "name": deployment.name,
            "detach": True,
            "environment": deployment.env,
            "ports": {f"{c}/tcp": h for h, c in deployment.ports},
            "ulimits": [Ulimit(name="nofile", soft=deployment.nofile_limit,
                               hard=deployment.nofile_limit)],
        }
        if deployment.command:
            kwargs["command"] = deployment.command
        if deployment.cpu_limit:
            kwargs["nano_cpus"] = int(deployment.cpu_limit * 1e9)
        if deployment.mem_limit:
            kwargs["mem_limit"] = deployment.mem_limit
        try:
            container = client.containers.run(deployment.image, **kwargs)
        except docker.errors.ImageNotFound as e:
            raise ImageUnavailable(str(e)) from e
        except docker.errors.APIError as e:
            raise StartFailed(f"Контейнер {deployment.name} не запустился: {e}") from e
        return container.id

    async def start(self, deployment: BrokerDeployment) -> str:
        container_id = await asyncio.to_thread(self._run, deployment)
        logger.info("Контейнер %s (%s) запущен", deployment.name, container_id[:12])
        if deployment.readiness_port is not None:
            await wait_for_port(deployment.host, deployment.readiness_port, self.readiness_timeout_s)
        return container_id

    def _remove(self, container_id: str) -> None:
        import docker
        client = self._init_docker()
        try:
            container = client.containers.get(container_id)
        except docker.errors.NotFound:
            return
        try:
            container.stop(timeout=self.stop_grace_s)
        except docker.errors.APIError:
            logger.warning("Контейнер %s не остановился, удаляем принудительно", container_id[:12])
        try:
            container.remove(force=True)
        except docker.errors.NotFound:
            pass

    async def stop(self, container_id: str) -> None:
        try:
            await asyncio.to_thread(self._remove, container_id)
        except Exception:
            logger.exception("Ошибка остановки контейнера %s", container_id[:12])

    def stats_client(self, container_id: str) -> IStatsClient:
        return DockerStatsClient(container_id, client=self._init_docker())

    async def close(self) -> None:
        if self._client is not None:
            await asyncio.to_thread(self._client.close)
            self._client = None


class InProcessBrokerEngine(IContainerEngine):
    """Мини-брокер в этом же процессе; свежее состояние на каждый старт"""

    def __init__(self):
        self._brokers: Dict[str, MiniBroker] = {}

    async def start(self, deployment: BrokerDeployment) -> str:
        port = deployment.readiness_port or 0
        broker = await MiniBroker(deployment.host, port).start()
        container_id = f"inproc-{deployment.name}-{uuid.uuid4().hex[:8]}"
        self._brokers[container_id] = broker
        await wait_for_port(broker.host, broker.port, CONFIG["readiness_timeout_s"])
        return container_id

    async def stop(self, container_id: str) -> None:
        broker = self._brokers.pop(container_id, None)
        if broker is not None:
            await broker.stop()

    async def kill(self, container_id: str) -> None:
        """Аварийно остановить брокер, как внешний kill контейнера"""
        broker = self._brokers.get(container_id)
        if broker is None:
            raise ContainerNotFound(container_id)
        await broker.stop()

    def broker(self, container_id: str) -> Optional[MiniBroker]:
        return self._brokers.get(container_id)

    def endpoint_for(self, container_id: str) -> Optional[str]:
        broker = self._brokers.get(container_id)
        return broker.endpoint if broker else None

    def stats_client(self, container_id: str) -> IStatsClient:
        return _BrokerProcessStats(self, container_id)


class _BrokerProcessStats(IStatsClient):
    """psutil статистика процесса, пока мини-брокер жив"""

    def __init__(self, engine: InProcessBrokerEngine, container_id: str):
        self._engine = engine
        self._container_id = container_id
        self._process = ProcessStatsClient()

    async def poll(self):
        broker = self._engine.broker(self._container_id)
        if broker is None or not broker.running:
            raise ContainerNotFound(self._container_id)
        return await self._process.poll()


def make_engine(deployment: BrokerDeployment) -> IContainerEngine:
    if deployment.engine == "inprocess":
        return InProcessBrokerEngine()
    return DockerEngine(base_url=deployment.container_ctl)


async def start_broker(deployment: BrokerDeployment, engine: Optional[IContainerEngine] = None) -> str:
    return await (engine or make_engine(deployment)).start(deployment)


async def stop_broker(container_id: str, engine: IContainerEngine) -> None:
    await engine.stop(container_id)


# =============================================================================
# ПРОГОН СЦЕНАРИЯ
# =============================================================================

def _host_port(address: str) -> Tuple[str, int]:
    parts = urlsplit(address if "://" in address else f"tcp://{address}")
    if not parts.hostname or parts.port is None:
        raise ConfigError(f"Ожидался host:port, получено {address!r}")
    return parts.hostname, parts.port


class ScenarioRunner:
    """
    Координирует прогон: брокер, монитор, подписчики, издатели, сбои,
    остановка, сбор и запись артефактов.
    """

    def __init__(self, engine: IContainerEngine, deployment: BrokerDeployment,
                 faults: Optional[FaultSettings] = None, clock: IClock = SYSTEM_CLOCK,
                 monitor_interval_s: float = CONFIG["resource_interval_s"],
                 drain_s: float = CONFIG["drain_s"]):
        self.engine = engine
        self.deployment = deployment
        self.faults = faults
        self.clock = clock
        self.monitor_interval_s = monitor_interval_s
        self.drain_s = drain_s
        self._semaphore = asyncio.Semaphore(CONFIG["connect_concurrency"])

    # ---- клиенты ----

    async def _connect_one(self, spec: ExperimentSpec, endpoint: str, client_id: str,
                           clean_session: bool, events: List[ConnectionEvent]
                           ) -> Optional[BaseSession]:
        options = TransportOptions(
            client_id=client_id,
            clean_session=clean_session,
            mqtt_version=spec.mqtt_version,
        )
        async with self._semaphore:
            try:
                return await connect(spec.transport_kind, endpoint, options,
                                     on_event=events.append, clock=self.clock)
            except TransportError as e:
                logger.warning("%s не подключился: %s", client_id, e)
                return None

    async def _connect_fleet(self, spec: ExperimentSpec, role: str, count: int, endpoint: str,
                             clean_session: bool, events: List[ConnectionEvent]
                             ) -> List[Tuple[int, Optional[BaseSession]]]:
        sessions = await asyncio.gather(*(
            self._connect_one(spec, endpoint, f"mqbench-{role}-{i}", clean_session, events)
            for i in range(count)
        ))
        return list(enumerate(sessions))

    # ---- сбои ----

    async def _setup_faults(self, spec: ExperimentSpec
                            ) -> Tuple[Optional[IFaultInjector], str]:
        """Вернуть инжектор и адрес, через который подключаются подписчики"""
        if not spec.has_faults:
            return None, spec.subscriber_address()
        settings = self.faults or FaultSettings()
        upstream = settings.upstream or spec.endpoint
        host, port = _host_port(upstream)

        if settings.mode == "local":
            listen_host, listen_port = _host_port(settings.listen)
            proxy = await LocalTcpProxy((host, port), (listen_host, listen_port)).start()
            return proxy, spec.subscriber_endpoint or proxy.endpoint

        client = ToxiproxyClient(settings.admin_url)
        await client.create_proxy(settings.proxy_name, settings.listen, f"{host}:{port}")
        for toxic in settings.toxics:
            await client.add_toxic(settings.proxy_name, toxic)
        listen_host, listen_port = _host_port(settings.listen)
        endpoint = spec.subscriber_endpoint or f"tcp://{listen_host}:{listen_port}"
        return ToxiproxyInjector(client, settings.proxy_name), endpoint

    @staticmethod
    def _reconnect_hook(sessions: Sequence[BaseSession]):
        async def reconnect_lost():
            async def revive(session: BaseSession):
                while not session.is_connected and not session.closed:
                    try:
                        await session.reconnect()
                    except TransportError as e:
                        logger.debug("%s: повтор переподключения: %s", session.client_id, e)
                        await asyncio.sleep(0.2)
            await asyncio.gather(*(revive(s) for s in sessions))
        return reconnect_lost

    # ---- прогон ----

    def _bind_endpoint(self, spec: ExperimentSpec, container_id: str) -> ExperimentSpec:
        actual = self.engine.endpoint_for(container_id)
        if actual and spec.transport_kind is TransportKind.MQTT:
            return replace(spec, endpoint=actual)
        return spec

    async def run_scenario(self, spec: ExperimentSpec,
                           directory: Union[str, Path]) -> RunArtifacts:
        """
        Полный прогон одного ExperimentSpec.

        Падение брокера во время прогона не прерывает его: отчёт помечается
        degenerate. Ошибки запуска брокера пробрасываются.

        Raises:
            SpecInvalid: спецификация не прошла валидацию
        """
        validation = validate_spec(spec)
        violations = list(validation.violations)
        violations += self.deployment.validate(spec.client_count())
        if violations:
            raise SpecInvalid(violations)

        directory = Path(directory)
        events: List[ConnectionEvent] = []
        container_id = await self.engine.start(self.deployment)
        injector: Optional[IFaultInjector] = None
        sessions: List[BaseSession] = []
        tasks: List[asyncio.Task] = []
        try:
            spec = self._bind_endpoint(spec, container_id)

            stop_monitor = asyncio.Event()
            monitor_task = asyncio.create_task(monitor(
                self.engine.stats_client(container_id), self.monitor_interval_s,
                stop_monitor, self.clock,
            ))
            tasks.append(monitor_task)

            injector, sub_endpoint = await self._setup_faults(spec)

            # Подписчики раньше издателей
            subscribers = await self._connect_fleet(
                spec, "sub", spec.subscriber_count(), sub_endpoint, spec.clean_session, events)
            stop_subs = asyncio.Event()
            buffers: List[SampleBuffer] = []
            sub_tasks = []
            readies = []
            for i, session in subscribers:
                if session is None:
                    continue
                sessions.append(session)
                buffer = SampleBuffer()
                ready = asyncio.Event()
                buffers.append(buffer)
                readies.append(ready)
                sub_tasks.append(asyncio.create_task(run_subscriber(
                    spec, session, spec.topic_for(i), buffer, stop_subs, ready)))
            tasks.extend(sub_tasks)
            subscribe_failures = await self._await_subscriptions(sub_tasks, readies)
            sub_sessions = [s for _, s in subscribers if s is not None]

            publishers = await self._connect_fleet(
                spec, "pub", spec.publisher_count(), spec.endpoint, True, events)
            sessions.extend(s for _, s in publishers if s is not None)
            live_publishers = [(i, s) for i, s in publishers if s is not None]

            offsets = (stagger_offsets(len(live_publishers), spec.rate_per_publisher)
                       if spec.stagger_start else [0] * len(live_publishers))
            stop_pubs = asyncio.Event()
            run_start_mono = self.clock.monotonic_ns()
            run_start_ns = self.clock.time_ns()
            pub_tasks = [
                asyncio.create_task(run_publisher(
                    spec, session, spec.topic_for(i), stop_pubs, self.clock, offset))
                for (i, session), offset in zip(live_publishers, offsets)
            ]
            tasks.extend(pub_tasks)

            stop_faults = asyncio.Event()
            fault_task = None
            schedule = []
            if injector is not None:
                schedule = schedule_failures(spec.mttf_s, spec.mttr_s,
                                             spec.measured_window_s(), spec.rng_seed)
                logger.info("Расписание сбоев: %d событий", len(schedule))
                fault_task = asyncio.create_task(run_fault_schedule(
                    schedule, injector, self._reconnect_hook(sub_sessions),
                    self.clock, run_start_mono, stop_faults,
                ))
                tasks.append(fault_task)

            if sessions:
                await self.clock.sleep_until(
                    run_start_mono + int(spec.measured_window_s() * NS_PER_S))
            else:
                logger.error("Ни один клиент не подключился, прогон пропущен")

            stop_pubs.set()
            run_end_ns = self.clock.time_ns()
            publisher_stats = await self._collect_publishers(pub_tasks)

            stop_faults.set()
            executed: List[ExecutedFault] = await fault_task if fault_task else []

            # Дать долететь сообщениям в пути
            if sessions:
                await self.clock.sleep_until(
                    self.clock.monotonic_ns() + int(self.drain_s * NS_PER_S))
            stop_subs.set()
            await asyncio.gather(*sub_tasks, return_exceptions=True)

            await asyncio.gather(*(s.disconnect() for s in sessions), return_exceptions=True)
            sessions = []
            stop_monitor.set()
            resources: ResourceSeries = await monitor_task
        finally:
            for task in tasks:
                if not task.done():
                    task.cancel()
            for session in sessions:
                await session.disconnect()
            if injector is not None:
                await injector.close()
            await self.engine.stop(container_id)

        samples = [s for b in buffers for s in b.samples]
        published: Dict[str, int] = {}
        for stats in publisher_stats:
            published[stats.topic] = published.get(stats.topic, 0) + stats.published_count
        for i in range(spec.publisher_count()):
            published.setdefault(spec.topic_for(i), 0)
        multiplicity = ({spec.topic_for(0): spec.fanout_subscribers} if spec.is_fanout else None)

        metadata = {
            "mqbench_version": CONFIG["version"],
            "broker": self.deployment.name,
            "container_id": container_id,
            "run_start_ns": run_start_ns,
            "run_end_ns": run_end_ns,
            "stagger_start": "uniform_one_period" if spec.stagger_start else "none",
            "connect_failures": sum(1 for _, s in subscribers + publishers if s is None),
            "publish_errors": sum(s.publish_errors for s in publisher_stats),
            "publish_timeouts": sum(s.publish_timeouts for s in publisher_stats),
            "backpressure_drops": sum(s.backpressure_drops for s in publisher_stats),
            "subscribe_failures": subscribe_failures,
            "resource_gaps": resources.gap_count,
            "resource_series_failed": resources.failed,
            "memory_field": "rss|anon|usage-inactive_file",
            "published_by_topic": published,
        }
        if schedule:
            metadata["fault_events"] = len(executed)
            metadata["fault_downtime_s"] = total_downtime_s(executed)

        summary = summarize(
            spec, samples, events, published, resources.samples, run_start_ns, run_end_ns,
            malformed_count=sum(b.malformed for b in buffers),
            multiplicity=multiplicity, metadata=metadata,
            resources_failed=resources.failed,
            container_lost_ns=resources.container_lost_ns,
        )
        if summary.degenerate:
            logger.warning("Прогон %s помечен как degenerate", directory)

        exporter = ResultExporter(directory)
        return RunArtifacts(
            spec=spec,
            directory=directory,
            samples_path=exporter.write_samples(samples),
            connections_path=exporter.write_connections(sorted(events, key=lambda e: e.ts_ns)),
            resources_path=exporter.write_resources(resources.samples),
            faults_path=exporter.write_faults(executed),
            summary_path=exporter.write_summary(summary),
            summary=summary,
        )

    @staticmethod
    async def _await_subscriptions(sub_tasks: Sequence[asyncio.Task],
                                   readies: Sequence[asyncio.Event],
                                   timeout_s: float = CONFIG["subscribe_ready_timeout_s"]) -> int:
        """
        Дождаться оформления подписок; вернуть число отказавших.

        Raises:
            EndpointUnreachable: подписки не оформлены за timeout_s или
                отказали все подписчики
        """
        async def outcome(task: asyncio.Task, ready: asyncio.Event) -> Optional[BaseException]:
            ready_wait = asyncio.ensure_future(ready.wait())
            try:
                await asyncio.wait({task, ready_wait}, return_when=asyncio.FIRST_COMPLETED)
            finally:
                ready_wait.cancel()
            if ready.is_set():
                return None
            if task.cancelled():
                return asyncio.CancelledError()
            return task.exception()

        if not sub_tasks:
            return 0
        try:
            errors = await asyncio.wait_for(
                asyncio.gather(*(outcome(t, r) for t, r in zip(sub_tasks, readies))),
                timeout=timeout_s,
            )
        except asyncio.TimeoutError as e:
            pending = sum(1 for r in readies if not r.is_set())
            raise EndpointUnreachable(
                f"{pending} подписок не оформлены за {timeout_s:g} с") from e

        failed = [err for err in errors if err is not None]
        for err in failed:
            logger.warning("Подписка не оформлена: %s", err)
        if failed and len(failed) == len(sub_tasks):
            raise EndpointUnreachable(f"Ни одна подписка не оформлена: {failed[0]}")
        return len(failed)

    @staticmethod
    async def _collect_publishers(tasks) -> List[PublisherStats]:
        stats: List[PublisherStats] = []
        for result in await asyncio.gather(*tasks, return_exceptions=True):
            if isinstance(result, PublisherStats):
                stats.append(result)
            elif isinstance(result, AbortedByTransport) and result.stats is not None:
                stats.append(result.stats)
            elif isinstance(result, BaseException):
                logger.error("Издатель завершился с ошибкой: %r", result)
        return stats


async def run_scenario(spec: ExperimentSpec, deployment: BrokerDeployment,
                       out_dir: Union[str, Path], faults: Optional[FaultSettings] = None,
                       engine: Optional[IContainerEngine] = None,
                       monitor_interval_s: float = CONFIG["resource_interval_s"]) -> RunArtifacts:
    """Прогон в каталоге <out>/<scenario>/<broker>/<значение основной оси>/"""
    engine = engine or make_engine(deployment)
    runner = ScenarioRunner(engine, deployment, faults, monitor_interval_s=monitor_interval_s)
    axis = SCENARIO_AXIS[spec.scenario]
    try:
        return await runner.run_scenario(spec, artifact_dir(out_dir, spec, deployment, getattr(spec, axis)))
    finally:
        await engine.close()


def artifact_dir(out_dir: Union[str, Path], spec: ExperimentSpec,
                 deployment: BrokerDeployment, value: Any) -> Path:
    return Path(out_dir) / spec.scenario.value / deployment.name / str(value)


# =============================================================================
# СЕРИИ
# =============================================================================

async def run_sweep(runner: ScenarioRunner, base: ExperimentSpec, axis: str,
                    values: Sequence[Any], out_dir: Union[str, Path],
                    early_stop: bool = False) -> SweepResult:
    """
    По прогону на значение оси, последовательно, со свежим брокером.

    Ошибка отдельного прогона записывается в RunArtifacts.error, серия
    продолжается. С early_stop серия прекращается, когда пропускная
    способность ниже saturation_threshold от предлагаемой нагрузки.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"Ось {axis!r} не поддерживается, допустимы {SWEEP_AXES}")
    result = SweepResult(axis=axis)
    threshold = CONFIG["saturation_threshold"]

    for value in values:
        spec = replace(base, **{axis: value})
        directory = artifact_dir(out_dir, spec, runner.deployment, value)
        logger.info("Серия %s: %s=%s", base.scenario.value, axis, value)
        try:
            artifacts = await runner.run_scenario(spec, directory)
        except Exception as e:
            logger.exception("Прогон %s=%s завершился ошибкой", axis, value)
            artifacts = RunArtifacts(spec=spec, directory=directory, error=f"{type(e).__name__}: {e}")
        result.artifacts.append(artifacts)

        summary = artifacts.summary
        if early_stop and summary is not None and \
                summary.throughput_msg_s < threshold * summary.offered_load_msg_s:
            logger.info("Насыщение при %s=%s: %.1f < %.0f%% от %.1f msg/s", axis, value,
                        summary.throughput_msg_s, threshold * 100, summary.offered_load_msg_s)
            result.stopped_early_at = value
            break

    return result
