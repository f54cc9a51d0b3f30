"""Versioned ``.npz`` checkpoints.

A checkpoint holds the flat parameter arrays under their schema keys plus a
``__meta__`` entry: the JSON of :class:`CheckpointMeta`. Readers reject any
schema version other than the current one.
"""

from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import structlog

from app.core.config import settings
from app.core.errors import SchemaError
from app.models.dto import CheckpointMeta
from app.services.idr_model import IdrModel

logger = structlog.get_logger(__name__)

META_KEY = "__meta__"


def check_schema_version(version, source: str) -> None:
    if version != settings.SCHEMA_VERSION:
        raise SchemaError(
            f"{source}: unsupported schema version {version!r} (this build reads {settings.SCHEMA_VERSION})",
            found=version,
            expected=settings.SCHEMA_VERSION,
        )


def save(path, params: Dict[str, np.ndarray], meta: CheckpointMeta) -> Path:
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_suffix(".npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    if META_KEY in params:
        raise SchemaError(f"parameter key {META_KEY} is reserved")
    arrays = {key: np.asarray(val) for key, val in params.items()}
    np.savez(path, **arrays, **{META_KEY: np.array(meta.model_dump_json())})
    logger.info("checkpoint_saved", path=str(path), kind=meta.kind, keys=len(arrays))
    return path


def load(path, kind: Optional[str] = None) -> Tuple[CheckpointMeta, Dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"checkpoint not found: {path}", path=str(path))
    with np.load(path, allow_pickle=False) as archive:
        if META_KEY not in archive.files:
            raise SchemaError(f"{path}: missing checkpoint metadata", path=str(path))
        raw = CheckpointMeta.model_validate_json(str(archive[META_KEY]))
        params = {key: np.array(archive[key]) for key in archive.files if key != META_KEY}
    check_schema_version(raw.schema_version, str(path))
    if kind is not None and raw.kind != kind:
        raise SchemaError(f"{path}: expected a {kind} checkpoint, found {raw.kind}", path=str(path))
    return raw, params


def save_model(path, model: IdrModel, epoch: Optional[int] = None, val_kl: Optional[float] = None) -> Path:
    meta = CheckpointMeta(
        schema_version=settings.SCHEMA_VERSION,
        kind="idr",
        model=model.config,
        epoch=epoch,
        val_kl=val_kl,
    )
    return save(path, model.params, meta)


def load_model(path) -> IdrModel:
    meta, params = load(path, kind="idr")
    if meta.model is None:
        raise SchemaError(f"{path}: checkpoint carries no model configuration")
    return IdrModel(meta.model, params)
