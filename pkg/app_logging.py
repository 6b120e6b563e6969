"""
Централизованная настройка логирования и глобальных исключений.
"""

from __future__ import annotations

import asyncio
import logging
import os
import sys
import threading
from pathlib import Path
from typing import Optional, Union

LOG_FORMAT = "%(asctime)s | %(levelname)s | %(name)s | %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


def configure_logging(level: Union[int, str] = logging.INFO, log_file: Optional[str] = None) -> None:
    """
    Настроить logging один раз на всё приложение.

    Поток stderr: stdout занят результатами CLI. Файл берётся из log_file
    или MQBENCH_LOG_FILE.
    """
    root = logging.getLogger()
    if root.handlers:
        return

    formatter = logging.Formatter(LOG_FORMAT, DATE_FORMAT)
    stream_handler = logging.StreamHandler(sys.stderr)
    stream_handler.setFormatter(formatter)
    root.addHandler(stream_handler)

    log_file = log_file or os.environ.get("MQBENCH_LOG_FILE")
    if log_file:
        file_handler = logging.FileHandler(Path(log_file).expanduser(), encoding="utf-8")
        file_handler.setFormatter(formatter)
        root.addHandler(file_handler)

    root.setLevel(level.upper() if isinstance(level, str) else level)
    # клиентские библиотеки шумят на INFO
    for noisy in ("aiormq", "aio_pika", "nats", "docker", "urllib3"):
        logging.getLogger(noisy).setLevel(logging.WARNING)


def install_global_exception_hooks() -> None:
    """Необработанные исключения процесса и потоков paho/zenoh пишутся в лог mqbench.crash."""
    crash_log = logging.getLogger("mqbench.crash")

    def _sys_excepthook(exc_type, exc_value, exc_tb):
        if issubclass(exc_type, KeyboardInterrupt):
            sys.__excepthook__(exc_type, exc_value, exc_tb)
            return
        crash_log.critical("Необработанное исключение", exc_info=(exc_type, exc_value, exc_tb))

    def _thread_excepthook(args):
        if args.exc_type is SystemExit:
            return
        crash_log.critical(
            "Необработанное исключение в потоке %s",
            getattr(args.thread, "name", "?"),
            exc_info=(args.exc_type, args.exc_value, args.exc_traceback),
        )

    sys.excepthook = _sys_excepthook
    threading.excepthook = _thread_excepthook


def install_asyncio_exception_handler(loop: asyncio.AbstractEventLoop) -> None:
    """Исключения задач, которые никто не дождался, пишутся в лог asyncio.unhandled."""
    unhandled = logging.getLogger("asyncio.unhandled")

    def _handler(loop, context):
        exc = context.get("exception")
        message = context.get("message", "Необработанное исключение в задаче")
        if exc is not None:
            unhandled.error("%s", message, exc_info=(type(exc), exc, exc.__traceback__))
        else:
            unhandled.error("%s", message)

    loop.set_exception_handler(_handler)
