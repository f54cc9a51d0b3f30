from contextlib import asynccontextmanager
import uuid

import structlog
from fastapi import FastAPI, Request, status
from fastapi.responses import JSONResponse

# Local imports
from app.core.config import settings
from app.core.errors import IdrError
from app.logging import configure_logging
from app.middleware.logging import LoggingMiddleware
from app.services import checkpoint_store

# Configure logging (Structlog)
configure_logging(service=True)
logger = structlog.get_logger(__name__)


# --- Application Lifecycle Management ---
@asynccontextmanager
async def lifespan(app: FastAPI):
    logger.info("application_startup", version=settings.VERSION)
    app.state.model = None
    if settings.MODEL_PATH:
        try:
            app.state.model = checkpoint_store.load_model(settings.MODEL_PATH)
            logger.info(
                "model_loaded",
                path=str(settings.MODEL_PATH),
                d_in=app.state.model.config.d_in,
                labels=app.state.model.config.n_labels,
            )
        except IdrError as e:
            logger.error("model_load_failed", path=str(settings.MODEL_PATH), error=e.code, detail=e.detail)
    else:
        logger.warning("model_path_not_set")

    yield

    logger.info("application_shutdown")
    app.state.model = None


# --- FastAPI Application Initialization ---
app = FastAPI(
    title=settings.PROJECT_NAME,
    version=settings.VERSION,
    description=settings.BRIEF_DESCRIPTION,
    lifespan=lifespan,
)

# --- Middleware ---
app.add_middleware(LoggingMiddleware)

# --- API Routes ---
from app.api.routes import router as api_router
app.include_router(api_router, prefix="/api")


# --- Health Check Endpoint ---
@app.get("/health", status_code=status.HTTP_200_OK)
async def health_check(request: Request):
    return {
        "status": "ok",
        "model_loaded": getattr(request.app.state, "model", None) is not None,
    }


# --- Global Exception Handler (for unhandled errors) ---
@app.exception_handler(Exception)
async def global_exception_handler(request: Request, exc: Exception):
    error_id = str(uuid.uuid4())
    logger.error("unhandled_exception", error_id=error_id, error=str(exc), exc_info=True)
    return JSONResponse(
        status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
        content={
            "detail": {
                "error": "INTERNAL_SERVER_ERROR",
                "detail": "An unexpected error occurred. Please report this error ID.",
                "error_id": error_id,
            }
        },
    )
