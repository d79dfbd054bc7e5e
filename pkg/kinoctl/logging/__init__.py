"""Logging Utilities

structlog events for the control stack. Training epochs, solver runs and
closed-loop rollouts log numpy values directly; they are turned into plain
Python numbers and lists before rendering so JSON lines stay valid.
"""

import logging
import sys
import time
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import structlog


def plain_numbers(logger: Any, method_name: str, event_dict: Dict[str, Any]) -> Dict[str, Any]:
    """structlog processor: numpy scalars become Python scalars, arrays become lists."""
    for key, value in event_dict.items():
        if isinstance(value, np.generic):
            event_dict[key] = value.item()
        elif isinstance(value, np.ndarray):
            event_dict[key] = value.tolist()
    return event_dict


def configure_logging(
    log_level: str = "INFO",
    log_file: Optional[str] = None,
    structured: bool = True,
    json_logs: bool = False
) -> None:
    """
    Configure logging for a run.

    Args:
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_file: Optional file that receives a copy of every record
        structured: Route events through structlog
        json_logs: Render structured events as JSON lines
    """
    level = getattr(logging, log_level.upper(), logging.INFO)

    handlers = [logging.StreamHandler(sys.stderr)]
    if log_file:
        log_path = Path(log_file)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file))

    if structured:
        renderer = structlog.processors.JSONRenderer() if json_logs else structlog.dev.ConsoleRenderer()
        structlog.configure(
            processors=[
                structlog.stdlib.filter_by_level,
                structlog.stdlib.add_logger_name,
                structlog.stdlib.add_log_level,
                structlog.processors.TimeStamper(fmt="iso"),
                structlog.processors.format_exc_info,
                plain_numbers,
                renderer,
            ],
            context_class=dict,
            logger_factory=structlog.stdlib.LoggerFactory(),
            cache_logger_on_first_use=True,
        )
        logging.basicConfig(format="%(message)s", level=level, handlers=handlers, force=True)
    else:
        logging.basicConfig(
            format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
            level=level,
            handlers=handlers,
            force=True
        )

    # matplotlib's font manager is chatty at DEBUG
    logging.getLogger("matplotlib").setLevel(logging.WARNING)


def configure_from_section(section: Dict[str, Any]) -> None:
    """Configure logging from the ``logging`` section of the global config."""
    configure_logging(
        log_level=section.get("level", "INFO"),
        log_file=section.get("file"),
        structured=section.get("structured", True),
        json_logs=section.get("json_logs", False),
    )


def get_logger(name: str) -> Any:
    return structlog.get_logger(name)


class LogContext:
    """Binds run-scoped fields (method, path, speed, seed) for the events of one rollout."""

    def __init__(self, logger: Any, **context: Any):
        self.logger = logger
        self.context = context

    def __enter__(self):
        return self.logger.bind(**self.context)

    def __exit__(self, exc_type, exc_val, exc_tb):
        return False


class OperationLogger:
    """
    Start, completion and failure events around a block, with its wall time.

    ``elapsed`` holds the duration in seconds once the block exits.
    """

    def __init__(self, logger: Any, operation_name: str, level: str = "info", **context: Any):
        self.logger = logger
        self.operation_name = operation_name
        self.level = level
        self.context = context
        self.start_time = None
        self.elapsed = None

    def __enter__(self):
        self.start_time = time.perf_counter()
        getattr(self.logger, self.level)(
            f"Starting operation: {self.operation_name}",
            operation=self.operation_name,
            **self.context
        )
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.elapsed = time.perf_counter() - self.start_time
        if exc_type is None:
            getattr(self.logger, self.level)(
                f"Completed operation: {self.operation_name}",
                operation=self.operation_name,
                duration_seconds=self.elapsed,
                status="success",
                **self.context
            )
        else:
            self.logger.error(
                f"Failed operation: {self.operation_name}",
                operation=self.operation_name,
                duration_seconds=self.elapsed,
                status="failed",
                error=str(exc_val),
                **self.context
            )
        return False
