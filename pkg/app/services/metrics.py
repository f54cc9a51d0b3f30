"""The six LDL measures and their cross-validation aggregation.

Lower is better for chebyshev, clark, canberra and kl; higher for cosine and
intersection. Terms with d_j + p_j = 0 contribute 0 to clark and canberra.
"""

import json
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd
import structlog

from app.core.config import settings
from app.core.errors import DatasetError, ShapeError
from app.models.dto import METRIC_NAMES, MetricSummary, MetricsReport
from app.services.checkpoint_store import check_schema_version

logger = structlog.get_logger(__name__)


def _check(d: np.ndarray, p: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    d = np.atleast_2d(np.asarray(d, dtype=np.float64))
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    if d.shape != p.shape:
        raise ShapeError("evaluate", d.shape, p.shape)
    for name, arr in (("target", d), ("prediction", p)):
        off = np.flatnonzero(np.any(arr < 0, axis=1) | (np.abs(arr.sum(axis=1) - 1.0) > settings.SIMPLEX_TOL))
        if off.size:
            raise DatasetError(f"{name} rows are not on the simplex: {off[:20].tolist()}", rows=off.tolist())
    return d, p


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def evaluate_batch(d: np.ndarray, p: np.ndarray, eps: float = settings.LOG_EPS) -> np.ndarray:
    """(N, 6) matrix with columns in METRIC_NAMES order."""
    d, p = _check(d, p)
    diff = np.abs(d - p)
    total = d + p
    chebyshev = diff.max(axis=1)
    clark = np.sqrt(_safe_ratio(diff ** 2, total ** 2).sum(axis=1))
    canberra = _safe_ratio(diff, total).sum(axis=1)
    ratio = np.log(np.where(d > 0, d, 1.0)) - np.log(np.maximum(p, eps))
    kl = np.where(d > 0, d * ratio, 0.0).sum(axis=1)
    cosine = (d * p).sum(axis=1) / (np.linalg.norm(d, axis=1) * np.linalg.norm(p, axis=1))
    intersection = np.minimum(d, p).sum(axis=1)
    return np.stack([chebyshev, clark, canberra, kl, cosine, intersection], axis=1)


def evaluate(d: np.ndarray, p: np.ndarray) -> Dict[str, float]:
    row = evaluate_batch(d, p)[0]
    return dict(zip(METRIC_NAMES, (float(v) for v in row)))


def mean_metrics(d: np.ndarray, p: np.ndarray) -> Dict[str, float]:
    return dict(zip(METRIC_NAMES, (float(v) for v in evaluate_batch(d, p).mean(axis=0))))


def aggregate(per_split: Sequence[np.ndarray], algorithm: str, dataset: str) -> MetricsReport:
    """Mean per split, then mean and sample std (ddof=1) across splits."""
    if not per_split or any(np.asarray(s).size == 0 for s in per_split):
        raise DatasetError("cannot aggregate an empty set of evaluations")
    split_means = np.stack([np.asarray(s).reshape(-1, len(METRIC_NAMES)).mean(axis=0) for s in per_split])
    mean = split_means.mean(axis=0)
    std = split_means.std(axis=0, ddof=1) if split_means.shape[0] > 1 else np.zeros_like(mean)
    summaries = {
        name: MetricSummary(mean=float(m), std=float(s))
        for name, m, s in zip(METRIC_NAMES, mean, std)
    }
    return MetricsReport(
        schema_version=settings.SCHEMA_VERSION,
        algorithm=algorithm,
        dataset=dataset,
        n_splits=len(per_split),
        n_samples=int(sum(np.asarray(s).reshape(-1, len(METRIC_NAMES)).shape[0] for s in per_split)),
        **summaries,
    )


def write_reports(reports: Sequence[MetricsReport], out_dir, stem: str = "report") -> Tuple[Path, Path]:
    """``<stem>.json`` (list of reports) and ``<stem>.csv`` (one row per report)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / f"{stem}.json"
    csv_path = out_dir / f"{stem}.csv"
    payload = [json.loads(r.model_dump_json()) for r in reports]
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    frame = pd.DataFrame([r.row() for r in reports])
    frame.insert(0, "schema_version", settings.SCHEMA_VERSION)
    frame.to_csv(csv_path, index=False, encoding="utf-8")
    logger.info("report_written", json=str(json_path), csv=str(csv_path), rows=len(reports))
    return json_path, csv_path


def read_reports(path) -> List[MetricsReport]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    out = []
    for item in payload:
        check_schema_version(item.get("schema_version"), str(path))
        out.append(MetricsReport(**item))
    return out
