"""
Модуль импорта: файлы конфигурации прогона и чтение артефактов обратно
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from mqbench.chaos import ExecutedFault
from mqbench.core import (
    ConfigError,
    ConnectionEvent,
    ExperimentSpec,
    LatencySample,
    SummaryReport,
)
from mqbench.export import (
    ARTIFACT_FILES,
    CONNECTIONS_COLUMNS,
    FAULTS_COLUMNS,
    RESOURCES_COLUMNS,
    SAMPLES_COLUMNS,
)
from mqbench.orchestrator import BrokerDeployment, FaultSettings
from mqbench.resmon import ResourceSample

CONFIG_SECTIONS = ("experiment", "preset", "broker", "faults", "monitor", "out")
DEFAULT_OUT = "results"


@dataclass
class MonitorSettings:
    interval_s: float = 1.0

    @classmethod
    def from_dict(cls, data: dict) -> "MonitorSettings":
        try:
            settings = cls(**data)
        except TypeError as e:
            raise ConfigError(f"monitor: {e}") from e
        if not settings.interval_s > 0:
            raise ConfigError("monitor.interval_s > 0")
        return settings


@dataclass
class RunConfig:
    """Содержимое JSON файла прогона"""
    experiment: ExperimentSpec
    broker: BrokerDeployment
    faults: Optional[FaultSettings] = None
    monitor: MonitorSettings = field(default_factory=MonitorSettings)
    out: Optional[str] = None

    def out_dir(self, override: Optional[str] = None) -> Path:
        """--out, затем поле out, затем MQBENCH_OUT, затем ./results"""
        return Path(override or self.out or os.environ.get("MQBENCH_OUT") or DEFAULT_OUT)


def default_broker() -> BrokerDeployment:
    return BrokerDeployment(name="mini", engine="inprocess")


def parse_run_config(data: Dict[str, Any], preset: Optional[str] = None) -> RunConfig:
    """
    Собрать RunConfig из словаря

    Raises:
        ConfigError: неизвестные секции или некорректные значения
    """
    if not isinstance(data, dict):
        raise ConfigError("Конфигурация должна быть JSON объектом")
    unknown = set(data) - set(CONFIG_SECTIONS)
    if unknown:
        raise ConfigError(f"Неизвестные секции: {sorted(unknown)}")

    preset = preset or data.get("preset")
    experiment = data.get("experiment", {})
    if not isinstance(experiment, dict):
        raise ConfigError("experiment должен быть объектом")
    if preset:
        spec = ExperimentSpec.preset(preset, **experiment)
    elif experiment:
        spec = ExperimentSpec.from_dict(experiment)
    else:
        raise ConfigError("Нужна секция experiment или preset")

    broker = BrokerDeployment.from_dict(data["broker"]) if data.get("broker") else default_broker()
    faults = FaultSettings.from_dict(data["faults"]) if data.get("faults") else None
    monitor = MonitorSettings.from_dict(data["monitor"]) if data.get("monitor") else MonitorSettings()
    return RunConfig(experiment=spec, broker=broker, faults=faults, monitor=monitor,
                     out=data.get("out"))


def load_run_config(path: Union[str, Path], preset: Optional[str] = None) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigError(f"Файл конфигурации не найден: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: некорректный JSON: {e}") from e
    return parse_run_config(data, preset)


def parse_values(text: str) -> List[int]:
    """'1024,16384' -> [1024, 16384]"""
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"Ожидался список целых через запятую: {text!r}") from e


# =============================================================================
# ЧТЕНИЕ АРТЕФАКТОВ
# =============================================================================

def _rows(path: Union[str, Path], columns) -> List[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        header = tuple(reader.fieldnames or ())
        if header[:len(columns)] != tuple(columns):
            raise ConfigError(f"{path}: неожиданный заголовок {header}")
        return list(reader)


def read_samples(path: Union[str, Path]) -> List[LatencySample]:
    return [
        LatencySample(
            topic=row["topic"], seq=int(row["seq"]), send_ts_ns=int(row["send_ts_ns"]),
            recv_ts_ns=int(row["recv_ts_ns"]), latency_ns=int(row["latency_ns"]),
            payload_bytes=int(row["payload_bytes"]),
        )
        for row in _rows(path, SAMPLES_COLUMNS)
    ]


def read_connections(path: Union[str, Path]) -> List[ConnectionEvent]:
    return [ConnectionEvent.from_dict(row) for row in _rows(path, CONNECTIONS_COLUMNS)]


def read_resources(path: Union[str, Path]) -> List[ResourceSample]:
    return [
        ResourceSample(
            ts_ns=int(row["ts_ns"]), cpu_total_ns=int(row["cpu_total_ns"]),
            mem_rss_bytes=int(row["mem_rss_bytes"]), gap=row["gap"] == "1",
        )
        for row in _rows(path, RESOURCES_COLUMNS)
    ]


def read_faults(path: Union[str, Path]) -> List[ExecutedFault]:
    return [
        ExecutedFault(
            event_index=int(row["event_index"]),
            scheduled_fail_s=float(row["scheduled_fail_s"]),
            scheduled_recover_s=float(row["scheduled_recover_s"]),
            actual_fail_ns=int(row["actual_fail_ns"]),
            actual_recover_ns=int(row["actual_recover_ns"]),
            status=row["status"],
        )
        for row in _rows(path, FAULTS_COLUMNS)
    ]


def read_summary(path: Union[str, Path]) -> SummaryReport:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: некорректный JSON: {e}") from e
    return SummaryReport.from_dict(data)


def find_summaries(root: Union[str, Path]) -> List[Path]:
    """Все summary.json под каталогом, в стабильном порядке"""
    root = Path(root)
    if root.is_file():
        return [root]
    return sorted(root.rglob(ARTIFACT_FILES["summary"]))
