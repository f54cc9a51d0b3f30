from typing import Any, Dict, Optional

from app.models.dto import ErrorResponse


class IdrError(Exception):
    """Base error. Carries a machine-readable code and structured context."""

    code = "IDR_ERROR"

    def __init__(self, detail: str, code: Optional[str] = None, **context: Any):
        super().__init__(detail)
        self.detail = detail
        if code:
            self.code = code
        self.context: Dict[str, Any] = context

    def to_response(self) -> ErrorResponse:
        return ErrorResponse(error=self.code, detail=self.detail, context=self.context or None)


class ShapeError(IdrError):
    code = "SHAPE_MISMATCH"

    def __init__(self, op: str, *shapes: tuple, detail: Optional[str] = None):
        shapes_txt = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(detail or f"{op}: incompatible shapes {shapes_txt}", op=op, shapes=[list(s) for s in shapes])
        self.op = op
        self.shapes = shapes


class DomainError(IdrError):
    code = "DOMAIN_ERROR"


class GradientCheckError(IdrError):
    code = "GRADIENT_CHECK_FAILED"


class DatasetError(IdrError):
    code = "DATASET_INVALID"


class ConfigError(IdrError):
    code = "CONFIG_INVALID"


class SchemaError(IdrError):
    code = "SCHEMA_MISMATCH"


class DivergenceError(IdrError):
    code = "DIVERGED"


class LineSearchError(IdrError):
    code = "LINE_SEARCH_FAILED"


class ConversionError(IdrError):
    code = "CONVERSION_FAILED"
