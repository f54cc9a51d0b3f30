from typing import Optional

import numpy as np
import structlog
from fastapi import APIRouter, Depends, HTTPException, Request, status

from app.core.errors import IdrError, ShapeError
from app.models.dto import ErrorResponse, EvaluateRequest, EvaluateResponse, PredictRequest, PredictResponse
from app.services import metrics
from app.services.idr_model import IdrModel

router = APIRouter()
logger = structlog.get_logger(__name__)


# --- Helper for Error ID ---
def get_req_id(request: Request) -> Optional[str]:
    return getattr(request.state, "request_id", None)


# --- Dependencies ---

def get_model(request: Request) -> IdrModel:
    model = getattr(request.app.state, "model", None)
    if model is None:
        raise HTTPException(
            status_code=status.HTTP_503_SERVICE_UNAVAILABLE,
            detail=ErrorResponse(error="MODEL_NOT_LOADED", detail="No checkpoint is loaded; set MODEL_PATH.").model_dump(),
        )
    return model


def _matrix(rows, width: int, field: str) -> np.ndarray:
    lengths = sorted({len(r) for r in rows})
    if lengths != [width]:
        raise ShapeError(field, (len(rows), lengths[-1]), (len(rows), width), detail=f"{field} rows must all have length {width}")
    return np.asarray(rows, dtype=np.float64)


def _unprocessable(request: Request, e: IdrError) -> HTTPException:
    logger.warning("request_rejected", error=e.code, detail=e.detail, request_id=get_req_id(request))
    return HTTPException(status_code=status.HTTP_422_UNPROCESSABLE_ENTITY, detail=e.to_response().model_dump())


# --- Routes ---

@router.post("/predict", response_model=PredictResponse)
def predict(payload: PredictRequest, request: Request, model: IdrModel = Depends(get_model)):
    try:
        x = _matrix(payload.features, model.config.d_in, "features")
        pred = model.predict(x)
    except IdrError as e:
        raise _unprocessable(request, e)
    return PredictResponse(distributions=pred.tolist(), labels=model.config.n_labels)


@router.post("/evaluate", response_model=EvaluateResponse)
def evaluate(payload: EvaluateRequest, request: Request, model: IdrModel = Depends(get_model)):
    try:
        x = _matrix(payload.features, model.config.d_in, "features")
        y = _matrix(payload.targets, model.config.n_labels, "targets")
        if x.shape[0] != y.shape[0]:
            raise ShapeError("evaluate", x.shape, y.shape, detail="features and targets disagree on sample count")
        scores = metrics.mean_metrics(y, model.predict(x))
    except IdrError as e:
        raise _unprocessable(request, e)
    return EvaluateResponse(metrics=scores, n_samples=int(x.shape[0]))
