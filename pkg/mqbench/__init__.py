"""
mqbench: бенчмарк pub/sub брокеров поверх разных протоколов
"""

from mqbench.core import (
    # Конфигурация
    CONFIG,
    HEADER_SIZE,
    PRESETS,

    # Типы
    ScenarioType,
    TransportKind,
    QosLevel,
    ConnectionEventKind,

    # Модели
    ExperimentSpec,
    MessageHeader,
    LatencySample,
    ConnectionEvent,
    LatencyStats,
    ResourceStats,
    SummaryReport,

    # Результаты
    SpecValidationResult,

    # Интерфейсы
    IClock,
    SystemClock,
    SYSTEM_CLOCK,

    # Ошибки
    BenchError,
    TransportError,

    # Кодек и валидация
    encode_header,
    decode_header,
    build_payload,
    validate_spec,
)

from mqbench.transport import (
    TransportOptions,
    BaseSession,
    connect,
    topic_matches,
)

from mqbench.mini_broker import MiniBroker, mini_broker_serve

from mqbench.load import (
    TokenBucket,
    PublisherStats,
    SampleBuffer,
    run_publisher,
    run_subscriber,
)

from mqbench.metrics import (
    StablePeriod,
    percentiles,
    latency_stats,
    detect_stable_period,
    compute_throughput,
    compute_loss,
    summarize,
)

from mqbench.resmon import (
    ResourceSample,
    IStatsClient,
    DockerStatsClient,
    ProcessStatsClient,
    parse_stats,
    cpu_cores_used,
    monitor,
)

from mqbench.chaos import (
    FailureEvent,
    IFaultInjector,
    ToxiproxyClient,
    LocalTcpProxy,
    schedule_failures,
    run_fault_schedule,
)

from mqbench.orchestrator import (
    BrokerDeployment,
    FaultSettings,
    RunArtifacts,
    IContainerEngine,
    DockerEngine,
    InProcessBrokerEngine,
    ScenarioRunner,
    run_scenario,
    run_sweep,
)

from mqbench.export import ResultExporter, render_report

from mqbench.parser import RunConfig, load_run_config

__all__ = [
    # Конфигурация
    'CONFIG',
    'HEADER_SIZE',
    'PRESETS',

    # Типы
    'ScenarioType',
    'TransportKind',
    'QosLevel',
    'ConnectionEventKind',

    # Модели
    'ExperimentSpec',
    'MessageHeader',
    'LatencySample',
    'ConnectionEvent',
    'LatencyStats',
    'ResourceStats',
    'SummaryReport',
    'SpecValidationResult',

    # Интерфейсы
    'IClock',
    'SystemClock',
    'SYSTEM_CLOCK',

    # Ошибки
    'BenchError',
    'TransportError',

    # Кодек и валидация
    'encode_header',
    'decode_header',
    'build_payload',
    'validate_spec',

    # Транспорт
    'TransportOptions',
    'BaseSession',
    'connect',
    'topic_matches',
    'MiniBroker',
    'mini_broker_serve',

    # Нагрузка
    'TokenBucket',
    'PublisherStats',
    'SampleBuffer',
    'run_publisher',
    'run_subscriber',

    # Метрики
    'StablePeriod',
    'percentiles',
    'latency_stats',
    'detect_stable_period',
    'compute_throughput',
    'compute_loss',
    'summarize',

    # Ресурсы
    'ResourceSample',
    'IStatsClient',
    'DockerStatsClient',
    'ProcessStatsClient',
    'parse_stats',
    'cpu_cores_used',
    'monitor',

    # Сбои
    'FailureEvent',
    'IFaultInjector',
    'ToxiproxyClient',
    'LocalTcpProxy',
    'schedule_failures',
    'run_fault_schedule',

    # Оркестрация
    'BrokerDeployment',
    'FaultSettings',
    'RunArtifacts',
    'IContainerEngine',
    'DockerEngine',
    'InProcessBrokerEngine',
    'ScenarioRunner',
    'run_scenario',
    'run_sweep',

    # Экспорт/Импорт
    'ResultExporter',
    'render_report',
    'RunConfig',
    'load_run_config',
]
