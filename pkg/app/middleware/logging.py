import time
import uuid
from typing import Callable

import structlog
from fastapi import Request, Response
from starlette.middleware.base import BaseHTTPMiddleware
from structlog.contextvars import bind_contextvars, clear_contextvars

log = structlog.get_logger()

REQUEST_ID_HEADER = "X-Request-ID"


class LoggingMiddleware(BaseHTTPMiddleware):
    """Binds a request id and the served checkpoint to every log line of a request.

    A caller-supplied ``X-Request-ID`` is kept so client and server logs join up.
    """

    async def dispatch(self, request: Request, call_next: Callable) -> Response:
        clear_contextvars()

        request_id = request.headers.get(REQUEST_ID_HEADER) or uuid.uuid4().hex
        model = getattr(request.app.state, "model", None)
        bind_contextvars(
            request_id=request_id,
            http_method=request.method,
            path=request.url.path,
            model_labels=model.config.n_labels if model is not None else None,
        )
        request.state.request_id = request_id

        start_time = time.perf_counter()
        try:
            response = await call_next(request)
        except Exception as e:
            elapsed_ms = (time.perf_counter() - start_time) * 1000
            log.exception("http_request_failed", elapsed_ms=round(elapsed_ms, 2), error=str(e))
            raise

        elapsed_ms = (time.perf_counter() - start_time) * 1000
        emit = log.warning if response.status_code >= 400 else log.info
        emit("http_request", status_code=response.status_code, elapsed_ms=round(elapsed_ms, 2))
        response.headers[REQUEST_ID_HEADER] = request_id
        return response
