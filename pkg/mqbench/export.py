"""
Модуль экспорта результатов: CSV серии, summary.json и текстовые отчёты
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, List, Sequence, Union

from mqbench.core import ConnectionEvent, LatencySample, SummaryReport

# Схемы CSV только дополняются: новые колонки добавляются в конец.
SAMPLES_COLUMNS = ("topic", "seq", "send_ts_ns", "recv_ts_ns", "latency_ns", "payload_bytes")
CONNECTIONS_COLUMNS = ("client_id", "kind", "ts_ns")
RESOURCES_COLUMNS = ("ts_ns", "cpu_total_ns", "mem_rss_bytes", "gap")
FAULTS_COLUMNS = (
    "event_index", "scheduled_fail_s", "scheduled_recover_s",
    "actual_fail_ns", "actual_recover_ns", "status",
)

ARTIFACT_FILES = {
    "samples": "samples.csv",
    "connections": "connections.csv",
    "resources": "resources.csv",
    "faults": "faults.csv",
    "summary": "summary.json",
}

REPORT_FORMATS = ("json", "csv", "table")

NS_PER_MS = 1_000_000


class ResultExporter:
    """Запись артефактов одного прогона в каталог"""

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)

    def path(self, kind: str) -> Path:
        return self.directory / ARTIFACT_FILES[kind]

    def _open(self, kind: str):
        self.directory.mkdir(parents=True, exist_ok=True)
        return open(self.path(kind), "w", newline="", encoding="utf-8")

    def write_samples(self, samples: Iterable[LatencySample]) -> Path:
        self.directory.mkdir(parents=True, exist_ok=True)
        return write_samples_csv(self.path("samples"), samples)

    def write_connections(self, events: Iterable[ConnectionEvent]) -> Path:
        with self._open("connections") as f:
            writer = csv.writer(f)
            writer.writerow(CONNECTIONS_COLUMNS)
            writer.writerows((e.client_id, e.kind.value, e.ts_ns) for e in events)
        return self.path("connections")

    def write_resources(self, samples: Iterable) -> Path:
        with self._open("resources") as f:
            writer = csv.writer(f)
            writer.writerow(RESOURCES_COLUMNS)
            writer.writerows(
                (s.ts_ns, s.cpu_total_ns, s.mem_rss_bytes, int(s.gap)) for s in samples
            )
        return self.path("resources")

    def write_faults(self, executed: Iterable) -> Path:
        with self._open("faults") as f:
            writer = csv.writer(f)
            writer.writerow(FAULTS_COLUMNS)
            writer.writerows(
                (e.event_index, repr(e.scheduled_fail_s), repr(e.scheduled_recover_s),
                 e.actual_fail_ns, e.actual_recover_ns, e.status)
                for e in executed
            )
        return self.path("faults")

    def write_summary(self, summary: SummaryReport) -> Path:
        self.directory.mkdir(parents=True, exist_ok=True)
        self.path("summary").write_text(summary_to_json(summary) + "\n", encoding="utf-8")
        return self.path("summary")


def write_samples_csv(path: Union[str, Path], samples: Iterable[LatencySample]) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(SAMPLES_COLUMNS)
        writer.writerows(
            (s.topic, s.seq, s.send_ts_ns, s.recv_ts_ns, s.latency_ns, s.payload_bytes)
            for s in samples
        )
    return path


def summary_to_json(summary: SummaryReport) -> str:
    """Каноническая сериализация: сортированные ключи"""
    return json.dumps(summary.to_dict(), sort_keys=True, indent=2, ensure_ascii=False)


# =============================================================================
# ОТЧЁТЫ
# =============================================================================

REPORT_CSV_COLUMNS = (
    "scenario", "transport", "pairs", "fanout_subscribers", "payload_bytes", "qos",
    "throughput_msg_s", "offered_load_msg_s", "p50_ms", "p95_ms", "p99_ms",
    "loss_fraction", "cpu_cores_mean", "mem_mb_mean", "degenerate",
)

TABLE_HEADER = (
    "Run", "Throughput (msg/s)", "p50", "p95", "Loss", "CPU (cores)", "Mem (MB)",
)


def format_ms(value_ns: int) -> str:
    return f"{value_ns / NS_PER_MS:.2f} ms"


def format_percent(fraction: float) -> str:
    return f"{fraction * 100:.2f} %"


def run_label(summary: SummaryReport) -> str:
    spec = summary.spec
    clients = f"n={spec.fanout_subscribers}" if spec.is_fanout else f"pairs={spec.pairs}"
    return (
        f"{spec.scenario.value}/{spec.transport_kind.value} "
        f"{clients} payload={spec.payload_bytes} qos={spec.qos}"
    )


def _csv_row(summary: SummaryReport) -> list:
    spec = summary.spec
    lat = summary.latency
    return [
        spec.scenario.value, spec.transport_kind.value, spec.pairs, spec.fanout_subscribers,
        spec.payload_bytes, spec.qos,
        f"{summary.throughput_msg_s:.3f}", f"{summary.offered_load_msg_s:.3f}",
        f"{lat.p50_ns / NS_PER_MS:.3f}" if lat else "",
        f"{lat.p95_ns / NS_PER_MS:.3f}" if lat else "",
        f"{lat.p99_ns / NS_PER_MS:.3f}" if lat else "",
        f"{summary.loss_fraction:.6f}", f"{summary.cpu_cores.mean:.3f}",
        f"{summary.mem_mb.mean:.1f}", int(summary.degenerate),
    ]


def _table_row(summary: SummaryReport) -> List[str]:
    lat = summary.latency
    label = run_label(summary)
    if summary.degenerate:
        label += " [DEGENERATE]"
    return [
        label,
        f"{summary.throughput_msg_s:.1f}",
        format_ms(lat.p50_ns) if lat else "-",
        format_ms(lat.p95_ns) if lat else "-",
        format_percent(summary.loss_fraction),
        f"{summary.cpu_cores.mean:.2f}",
        f"{summary.mem_mb.mean:.1f}",
    ]


def render_reports(summaries: Sequence[SummaryReport], fmt: str) -> str:
    """Отрендерить один или несколько отчётов: json, csv или table"""
    if fmt not in REPORT_FORMATS:
        raise ValueError(f"Неизвестный формат отчёта: {fmt}")

    if fmt == "json":
        if len(summaries) == 1:
            return summary_to_json(summaries[0])
        return json.dumps([s.to_dict() for s in summaries], sort_keys=True, indent=2,
                          ensure_ascii=False)

    if fmt == "csv":
        lines = [",".join(REPORT_CSV_COLUMNS)]
        lines.extend(",".join(str(v) for v in _csv_row(s)) for s in summaries)
        return "\n".join(lines)

    rows = [list(TABLE_HEADER)] + [_table_row(s) for s in summaries]
    widths = [max(len(row[i]) for row in rows) for i in range(len(TABLE_HEADER))]
    lines = []
    for n, row in enumerate(rows):
        cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def render_report(summary: SummaryReport, fmt: str) -> str:
    return render_reports([summary], fmt)
