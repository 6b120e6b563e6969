"""
mqbench - Точка входа приложения
Командная строка: роли pub/sub, прогоны, серии, отчёты, мини-брокер
"""

from __future__ import annotations

import argparse
import asyncio
import logging
import sys
from typing import List, Optional

from app_logging import (
    configure_logging,
    install_asyncio_exception_handler,
    install_global_exception_hooks,
)
from mqbench import (
    CONFIG,
    PRESETS,
    ExperimentSpec,
    ScenarioType,
    TransportKind,
    TransportOptions,
    connect,
    mini_broker_serve,
    render_report,
    run_publisher,
    run_subscriber,
    validate_spec,
)
from mqbench.core import BenchError, ConfigError, SpecInvalid
from mqbench.export import render_reports, write_samples_csv
from mqbench.load import SampleBuffer
from mqbench.orchestrator import SWEEP_AXES, ScenarioRunner, make_engine, run_scenario, run_sweep
from mqbench.parser import find_summaries, load_run_config, parse_run_config, parse_values, read_summary

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2
EXIT_DEGENERATE = 3


# =============================================================================
# АРГУМЕНТЫ
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=CONFIG["app_name"],
        description="Бенчмарк pub/sub брокеров: задержка, пропускная способность, потери, ресурсы",
    )
    parser.add_argument("--log-level", default="INFO")
    parser.add_argument("--log-file", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    transports = [k.value for k in TransportKind]

    pub = sub.add_parser("pub", help="один издатель с фиксированным темпом")
    pub.add_argument("--transport", required=True, choices=transports)
    pub.add_argument("--endpoint", required=True)
    pub.add_argument("--topic", required=True)
    pub.add_argument("--rate", type=float, required=True, help="msg/s")
    pub.add_argument("--payload", type=int, required=True, help="байт, включая заголовок")
    pub.add_argument("--duration", type=float, required=True, help="секунды")
    pub.add_argument("--qos", type=int, default=0)
    pub.add_argument("--client-id", default="mqbench-pub")

    sb = sub.add_parser("sub", help="один подписчик, пишет сэмплы задержки")
    sb.add_argument("--transport", required=True, choices=transports)
    sb.add_argument("--endpoint", required=True)
    sb.add_argument("--topic", required=True)
    sb.add_argument("--duration", type=float, required=True)
    sb.add_argument("--qos", type=int, default=0)
    sb.add_argument("--out", default=None, help="CSV файл сэмплов")
    sb.add_argument("--client-id", default="mqbench-sub")

    run = sub.add_parser("run", help="полный прогон сценария")
    run.add_argument("--config", default=None)
    run.add_argument("--preset", default=None, choices=sorted(PRESETS))
    run.add_argument("--out", default=None)

    sweep = sub.add_parser("sweep", help="серия прогонов по одной оси")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sweep.add_argument("--values", required=True, help="V1,V2,...")
    sweep.add_argument("--early-stop", action="store_true")
    sweep.add_argument("--out", default=None)

    report = sub.add_parser("report", help="отчёт по summary.json")
    report.add_argument("--in", dest="input", required=True)
    report.add_argument("--format", default="table", choices=("json", "csv", "table"))

    broker = sub.add_parser("broker", help="запустить встроенный MQTT брокер")
    broker.add_argument("--listen", default="127.0.0.1:1883")

    return parser


def _print_violations(violations: List[str]) -> None:
    for violation in violations:
        print(f"invalid: {violation}", file=sys.stderr)


def _role_spec(args, duration: float, rate: float = 1.0, payload: int = 64) -> ExperimentSpec:
    return ExperimentSpec(
        scenario=ScenarioType.THROUGHPUT_PAIRS,
        transport_kind=TransportKind(args.transport),
        endpoint=args.endpoint,
        pairs=1,
        rate_per_publisher=rate,
        payload_bytes=payload,
        duration_s=duration,
        warmup_s=0.0,
        qos=args.qos,
    )


# =============================================================================
# КОМАНДЫ
# =============================================================================

async def cmd_pub(args) -> int:
    spec = _role_spec(args, args.duration, args.rate, args.payload)
    validation = validate_spec(spec)
    if not validation.is_valid:
        _print_violations(validation.violations)
        return EXIT_INVALID

    session = await connect(spec.transport_kind, spec.endpoint, TransportOptions(args.client_id))
    stop = asyncio.Event()
    asyncio.get_running_loop().call_later(args.duration, stop.set)
    try:
        stats = await run_publisher(spec, session, args.topic, stop)
    finally:
        await session.disconnect()
    print(f"published={stats.published_count}")
    print(f"errors={stats.publish_errors}")
    return EXIT_OK


async def cmd_sub(args) -> int:
    spec = _role_spec(args, args.duration)
    validation = validate_spec(spec)
    if not validation.is_valid:
        _print_violations(validation.violations)
        return EXIT_INVALID

    session = await connect(spec.transport_kind, spec.endpoint, TransportOptions(args.client_id))
    stop = asyncio.Event()
    buffer = SampleBuffer()
    asyncio.get_running_loop().call_later(args.duration, stop.set)
    try:
        received = await run_subscriber(spec, session, args.topic, buffer, stop)
    finally:
        await session.disconnect()
    if args.out:
        write_samples_csv(args.out, buffer.samples)
    print(f"received={received}")
    print(f"malformed={buffer.malformed}")
    return EXIT_OK


async def cmd_run(args) -> int:
    if args.config:
        config = load_run_config(args.config, preset=args.preset)
    elif args.preset:
        config = parse_run_config({"preset": args.preset})
    else:
        raise ConfigError("Нужен --config или --preset")

    artifacts = await run_scenario(config.experiment, config.broker, config.out_dir(args.out),
                                   faults=config.faults,
                                   monitor_interval_s=config.monitor.interval_s)
    print(render_report(artifacts.summary, "table"))
    print(f"artifacts={artifacts.directory}")
    return EXIT_DEGENERATE if artifacts.degenerate else EXIT_OK


async def cmd_sweep(args) -> int:
    config = load_run_config(args.config)
    values = parse_values(args.values)
    engine = make_engine(config.broker)
    runner = ScenarioRunner(engine, config.broker, config.faults,
                            monitor_interval_s=config.monitor.interval_s)
    try:
        result = await run_sweep(runner, config.experiment, args.axis, values,
                                 config.out_dir(args.out), early_stop=args.early_stop)
    finally:
        await engine.close()

    summaries = [a.summary for a in result.artifacts if a.summary is not None]
    if summaries:
        print(render_reports(summaries, "table"))
    for artifacts in result.artifacts:
        if artifacts.error:
            print(f"failed {args.axis}={getattr(artifacts.spec, args.axis)}: {artifacts.error}",
                  file=sys.stderr)
    if result.saturated:
        print(f"stopped_early_at={result.stopped_early_at}")

    if any(a.error for a in result.artifacts):
        return EXIT_RUNTIME
    if any(a.degenerate for a in result.artifacts):
        return EXIT_DEGENERATE
    return EXIT_OK


def cmd_report(args) -> int:
    paths = find_summaries(args.input)
    if not paths:
        print(f"summary.json не найден в {args.input}", file=sys.stderr)
        return EXIT_RUNTIME
    summaries = [read_summary(p) for p in paths]
    print(render_reports(summaries, args.format))
    return EXIT_OK


async def cmd_broker(args) -> int:
    host, _, port = args.listen.rpartition(":")
    broker = await mini_broker_serve((host or "127.0.0.1", int(port)))
    print(f"listening={broker.endpoint}", flush=True)
    try:
        await broker.serve_forever()
    except asyncio.CancelledError:
        pass
    finally:
        await broker.stop()
    return EXIT_OK


COMMANDS = {
    "pub": cmd_pub,
    "sub": cmd_sub,
    "run": cmd_run,
    "sweep": cmd_sweep,
    "broker": cmd_broker,
}


async def _run_async(handler, args) -> int:
    install_asyncio_exception_handler(asyncio.get_running_loop())
    return await handler(args)


def cli_main(argv: Optional[List[str]] = None) -> int:
    """Разобрать аргументы и выполнить команду; вернуть код выхода"""
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level, args.log_file)

    try:
        if args.command == "report":
            return cmd_report(args)
        return asyncio.run(_run_async(COMMANDS[args.command], args))
    except SpecInvalid as e:
        _print_violations(e.violations)
        return EXIT_INVALID
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except BenchError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        return EXIT_RUNTIME


def main():
    """Точка входа приложения"""
    install_global_exception_hooks()
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
