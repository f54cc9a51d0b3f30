import logging
import sys
from typing import Optional, TextIO

import structlog

from app.core.config import settings

UVICORN_LOGGERS = ("uvicorn", "uvicorn.error", "uvicorn.access")


def _processors(json_output: bool, callsite: bool) -> list:
    processors = [
        structlog.contextvars.merge_contextvars,
        structlog.stdlib.add_logger_name,
        structlog.stdlib.add_log_level,
        structlog.stdlib.PositionalArgumentsFormatter(),
        structlog.processors.TimeStamper(fmt="iso", utc=True),
        structlog.processors.StackInfoRenderer(),
        structlog.processors.format_exc_info,
    ]
    if callsite:
        processors.append(
            structlog.processors.CallsiteParameterAdder(
                {
                    structlog.processors.CallsiteParameter.FILENAME,
                    structlog.processors.CallsiteParameter.FUNC_NAME,
                    structlog.processors.CallsiteParameter.LINENO,
                }
            )
        )
    if json_output:
        return processors + [structlog.processors.dict_tracebacks, structlog.processors.JSONRenderer()]
    return processors + [structlog.dev.ConsoleRenderer(colors=False)]


def configure_logging(service: bool = False, stream: Optional[TextIO] = None) -> None:
    """
    Route structlog and stdlib logging to one stream.

    Training runs (``service=False``) log to stderr without callsite fields, so
    fold and epoch events stay readable and stdout carries nothing but what a
    subcommand prints. The HTTP service adds callsites and takes over uvicorn's
    loggers. Outside development everything is rendered as JSON.
    """
    json_output = settings.ENV.lower() != "development"
    level = getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO)

    structlog.configure(
        processors=_processors(json_output, callsite=service),
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        # the CLI is reconfigured per invocation, the service once per process
        cache_logger_on_first_use=service,
    )
    logging.basicConfig(format="%(message)s", stream=stream or sys.stderr, level=level, force=True)

    if service:
        for name in UVICORN_LOGGERS:
            log = logging.getLogger(name)
            log.handlers = []
            log.propagate = True
