"""LDL datasets: CSV ingestion, synthetic generation, cross-validation splits
and masked-mixup augmentation."""

import math
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import structlog
from dotenv import dotenv_values
from pydantic import ValidationError

from app.core.config import settings
from app.core.errors import ConfigError, DatasetError, ShapeError
from app.models.dto import AugmentConfig, DatasetSidecar, GroundTruth, LdlDataset, LdlSample, Split
from app.services.idr_model import lnf
from app.utils.autodiff import constant
from app.utils.seeding import stream

logger = structlog.get_logger(__name__)

# Rows whose float sum is this close to 1 are stored untouched so CSV round trips are exact
RENORM_TOL = 1e-12
VALIDATION_FRACTION = 0.1


def _parse_real(text: str) -> float:
    try:
        return float(text)
    except (TypeError, ValueError):
        return float("nan")


def _split_header(columns: List[str]) -> Tuple[int, int]:
    d = 0
    while d < len(columns) and columns[d] == f"f{d}":
        d += 1
    labels = columns[d:]
    if d == 0 or len(labels) < 2 or labels != [f"y{j}" for j in range(len(labels))]:
        raise DatasetError(
            "header must read f0,...,f{d-1},y0,...,y{L-1} with d >= 1 and L >= 2",
            header=columns[:8],
        )
    return d, len(labels)


def validate_targets(targets: np.ndarray, first_row: int = 1) -> np.ndarray:
    """Reject rows off the simplex (tolerance 1e-6); rescale rows that are on it
    but not exactly normalised."""
    sums = targets.sum(axis=1)
    bad = np.flatnonzero((np.abs(sums - 1.0) > settings.SIMPLEX_TOL) | np.any(targets < 0, axis=1))
    if bad.size:
        rows = [int(r) + first_row for r in bad]
        raise DatasetError(
            f"{len(rows)} label rows violate the simplex (entries >= 0, sum 1 within {settings.SIMPLEX_TOL}): rows {rows[:20]}",
            rows=rows,
        )
    fix = np.abs(sums - 1.0) > RENORM_TOL
    if np.any(fix):
        targets = targets.copy()
        targets[fix] = targets[fix] / sums[fix, None]
    return targets


def load_sidecar(path: Path) -> DatasetSidecar:
    cfg_path = Path(f"{path}.cfg")
    if not cfg_path.exists():
        return DatasetSidecar()
    try:
        raw = {k: v for k, v in dotenv_values(cfg_path).items() if v is not None and v != ""}
    except (OSError, UnicodeDecodeError) as e:
        raise DatasetError(f"cannot read dataset sidecar {cfg_path}: {e}", path=str(cfg_path))
    try:
        return DatasetSidecar(**raw)
    except ValidationError as e:
        fields = sorted({str(err["loc"][0]) for err in e.errors() if err.get("loc")})
        raise ConfigError(f"invalid dataset sidecar {cfg_path}: {e}", path=str(cfg_path), keys=fields)


def load_csv(path) -> LdlDataset:
    """Read `f0..f{d-1},y0..y{L-1}` rows; row numbers in errors count data rows from 1."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset file not found: {path}", path=str(path))
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.ParserError as e:
        raise DatasetError(f"malformed CSV {path}: {e}", path=str(path))
    except pd.errors.EmptyDataError:
        raise DatasetError(f"empty dataset file: {path}", path=str(path))
    except (OSError, UnicodeDecodeError) as e:
        raise DatasetError(f"cannot read dataset file {path}: {e}", path=str(path))

    d, n_labels = _split_header([str(c).strip() for c in frame.columns])
    values = frame.map(_parse_real).to_numpy(dtype=np.float64)
    malformed = np.flatnonzero(~np.all(np.isfinite(values), axis=1))
    if malformed.size:
        rows = [int(r) + 1 for r in malformed]
        raise DatasetError(f"malformed rows (missing or non-numeric values): {rows[:20]}", rows=rows)
    if values.shape[0] == 0:
        raise DatasetError(f"dataset has no rows: {path}", path=str(path))

    targets = validate_targets(values[:, d:])
    sidecar = load_sidecar(path)
    dataset = LdlDataset(
        name=sidecar.name or path.stem,
        features=np.ascontiguousarray(values[:, :d]),
        targets=targets,
        source=str(path),
    )
    logger.info("dataset_loaded", path=str(path), n=dataset.n, d=d, labels=n_labels)
    return dataset


def write_csv(dataset: LdlDataset, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = [f"f{i}" for i in range(dataset.d)] + [f"y{j}" for j in range(dataset.n_labels)]
    frame = pd.DataFrame(np.hstack([dataset.features, dataset.targets]), columns=columns)
    # repr formatting round-trips float64 exactly
    frame.to_csv(path, index=False, encoding="utf-8")
    return path


def synthesize(n: int, d: int, n_labels: int, seed: int, name: Optional[str] = None) -> LdlDataset:
    """Standard-normal features; targets softmax(W x + b) for a hidden W, b drawn from the seed."""
    if n < 1 or d < 1 or n_labels < 2:
        raise DatasetError("synthesize needs n >= 1, d >= 1, L >= 2", n=n, d=d, labels=n_labels)
    rng = np.random.default_rng(seed)
    weight = rng.standard_normal((n_labels, d)) / math.sqrt(d)
    bias = 0.5 * rng.standard_normal(n_labels)
    features = rng.standard_normal((n, d))
    logits = features @ weight.T + bias
    logits -= logits.max(axis=1, keepdims=True)
    expd = np.exp(logits)
    targets = expd / expd.sum(axis=1, keepdims=True)
    return LdlDataset(
        name=name or f"synth-{n}x{d}x{n_labels}-s{seed}",
        features=features,
        targets=targets,
        ground_truth=GroundTruth(weight=weight, bias=bias),
        source=f"synthesize(n={n}, d={d}, L={n_labels}, seed={seed})",
    )


def kfold_split(dataset: Union[LdlDataset, int], k: int, repeats: int, seed: int) -> List[Split]:
    """Per repeat, k disjoint test folds covering all indices; 10% of each
    training fold is carved off as the validation slice."""
    n = dataset if isinstance(dataset, int) else dataset.n
    if k < 2:
        raise DatasetError("k-fold needs k >= 2", k=k)
    if n < k:
        raise DatasetError(f"cannot split {n} samples into {k} folds", n=n, k=k)
    splits: List[Split] = []
    for r in range(repeats):
        rng = stream(seed, "split", r)
        order = rng.permutation(n)
        folds = np.array_split(order, k)
        for f, test in enumerate(folds):
            rest = np.concatenate([folds[j] for j in range(k) if j != f])
            n_val = max(1, int(round(VALIDATION_FRACTION * rest.size))) if rest.size >= 2 else 0
            splits.append(Split(
                repeat=r,
                fold=f,
                train=np.sort(rest[: rest.size - n_val]),
                validation=np.sort(rest[rest.size - n_val:]),
                test=np.sort(test),
            ))
    return splits


def train_validation_split(dataset: LdlDataset, seed: int) -> Tuple[LdlDataset, LdlDataset]:
    """Whole-dataset training run: a seeded 10% validation slice, the rest for training."""
    if dataset.n < 2:
        raise DatasetError("need at least two samples to carve a validation slice", n=dataset.n)
    order = stream(seed, "split", 0).permutation(dataset.n)
    n_val = max(1, int(round(VALIDATION_FRACTION * dataset.n)))
    return (
        dataset.subset(np.sort(order[n_val:]), name=dataset.name),
        dataset.subset(np.sort(order[:n_val]), name=f"{dataset.name}:validation"),
    )


def lnf_rows(y: np.ndarray) -> np.ndarray:
    return np.array(lnf(constant(np.atleast_2d(y))).value).reshape(np.shape(y))


def mixup_mask(a: LdlSample, b: LdlSample, lam: float, mask: np.ndarray) -> LdlSample:
    """x = lam*x_a*mask + (1-lam)*x_b*mask ; y = Lnf(lam*y_a + (1-lam)*y_b)."""
    if not 0.0 <= lam <= 1.0:
        raise DatasetError("mixing weight must lie in [0, 1]", lam=lam)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != a.x.shape or mask.shape != b.x.shape:
        raise ShapeError("mixup_mask", mask.shape, a.x.shape)
    x = lam * a.x * mask + (1.0 - lam) * b.x * mask
    y = lnf_rows(lam * a.y + (1.0 - lam) * b.y)
    return LdlSample(x=x, y=y)


def sample_augmentation(
    features: np.ndarray,
    targets: np.ndarray,
    cfg: AugmentConfig,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    """Masked mixup over a batch: random partners, lam ~ Beta(alpha, alpha),
    one Bernoulli(keep_prob) feature mask per pair shared by both parents."""
    if not cfg.enabled or features.shape[0] < 2:
        return features, targets
    n = features.shape[0]
    partner = rng.permutation(n)
    if cfg.fixed_lambda is not None:
        lam = np.full(n, cfg.fixed_lambda)
    else:
        lam = rng.beta(cfg.alpha, cfg.alpha, size=n)
    mask = (rng.random(features.shape) < cfg.keep_prob).astype(features.dtype)
    x = lam[:, None] * features * mask + (1.0 - lam[:, None]) * features[partner] * mask
    y = lnf_rows(lam[:, None] * targets + (1.0 - lam[:, None]) * targets[partner])
    return x, y
