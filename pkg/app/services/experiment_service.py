"""Benchmark presets, layered run configuration and the experiments built on
cross-validation: ablations, the Lnf/Softmax convergence comparison and
label distribution matrix inspection."""

from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import structlog
from dotenv import dotenv_values
from pydantic import ValidationError

from app.core.errors import ConfigError, DatasetError
from app.models.dto import (
    AugmentConfig,
    DatasetProfile,
    LdlDataset,
    LossWeights,
    MetricsReport,
    ModelConfig,
    TrainConfig,
)
from app.services.dataset_service import kfold_split
from app.services.idr_model import IdrModel
from app.services.trainer import IdrAlgorithm, build_model_config, cross_validate, train

logger = structlog.get_logger(__name__)


def _profile(name, examples, features, labels, augment, batch_size, epochs, lr, stop_and_soup=True) -> DatasetProfile:
    return DatasetProfile(
        name=name,
        examples=examples,
        features=features,
        labels=labels,
        hidden=64 if features < 64 else 1024,
        augment=augment,
        batch_size=batch_size,
        epochs=epochs,
        learning_rate=lr,
        early_stopping=stop_and_soup,
        greedy_soup=stop_and_soup,
    )


PRESETS: Dict[str, DatasetProfile] = {
    p.name.lower(): p
    for p in (
        _profile("wc-LDL", 500, 243, 12, True, 500, 200, 2e-3),
        _profile("SJAFFE", 213, 243, 6, True, 213, 200, 2e-2),
        _profile("SBU-3DFE", 2500, 243, 6, False, 1000, 200, 1e-3),
        _profile("Scene", 2000, 294, 9, False, 1000, 120, 1e-3),
        _profile("Gene", 17892, 36, 68, False, 5000, 150, 2e-3),
        _profile("Movie", 7755, 1869, 5, False, 2000, 100, 2e-3),
        _profile("M2B", 1240, 250, 5, True, 500, 150, 2e-3),
        _profile("SCUT", 1500, 300, 5, True, 500, 150, 1e-2),
        _profile("fbp5500", 5500, 512, 5, False, 1500, 300, 2e-2),
        _profile("RAF-ML", 4908, 200, 6, False, 2000, 100, 1e-3),
        _profile("Twitter", 10040, 200, 8, False, 5000, 200, 1e-3, stop_and_soup=False),
        _profile("Flickr", 11150, 200, 8, False, 5000, 200, 1e-2),
    )
}


def get_preset(name: str) -> DatasetProfile:
    try:
        return PRESETS[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; known: {sorted(p.name for p in PRESETS.values())}")


def preset_values(profile: DatasetProfile) -> Dict[str, Any]:
    return {
        "batch_size": profile.batch_size,
        "epochs": profile.epochs,
        "learning_rate": profile.learning_rate,
        "weight_decay": profile.weight_decay,
        "early_stopping": profile.early_stopping,
        "greedy_soup": profile.greedy_soup,
        "augment": profile.augment,
        "hidden": profile.hidden,
    }

# --- Layered run configuration ---

TRAIN_KEYS = set(TrainConfig.model_fields) - {"augmentation"}
AUGMENT_KEYS = {"alpha", "keep_prob", "fixed_lambda"}
WEIGHT_KEYS = set(LossWeights.model_fields)
MODEL_KEYS = set(ModelConfig.model_fields) - {"d_in", "n_labels"}


def load_run_config(path) -> Dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"run config not found: {path}", path=str(path))
    try:
        return {k: v for k, v in dotenv_values(path).items() if v is not None and v != ""}
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot read run config {path}: {e}", path=str(path))


def build_configs(*layers: Optional[Mapping[str, Any]]) -> Tuple[TrainConfig, LossWeights, Dict[str, Any]]:
    """Merge flat ``key -> value`` layers, later layers winning, into typed configs.

    ``augment`` toggles masked mixup; ``keep_prob`` sets the density of both
    the mixup masks and the pseudo-feature masks.
    """
    merged: Dict[str, Any] = {}
    for layer in layers:
        merged.update({k: v for k, v in (layer or {}).items() if v is not None})
    unknown = set(merged) - TRAIN_KEYS - AUGMENT_KEYS - WEIGHT_KEYS - MODEL_KEYS - {"augment"}
    if unknown:
        raise ConfigError(f"unknown configuration keys: {sorted(unknown)}", keys=sorted(unknown))

    augment = {k: merged[k] for k in AUGMENT_KEYS if k in merged}
    if "augment" in merged:
        augment["enabled"] = merged["augment"]
    model = {k: merged[k] for k in MODEL_KEYS if k in merged}
    if isinstance(model.get("gcn_widths"), str):
        model["gcn_widths"] = [int(w) for w in model["gcn_widths"].split(",") if w.strip()]
    try:
        cfg = TrainConfig(
            **{k: merged[k] for k in TRAIN_KEYS if k in merged},
            augmentation=AugmentConfig(**augment),
        )
        weights = LossWeights(**{k: merged[k] for k in WEIGHT_KEYS if k in merged})
    except ValidationError as e:
        raise ConfigError(f"invalid run configuration: {e}")
    return cfg, weights, model

# --- Ablations ---

ABLATIONS: Dict[str, Dict[str, Dict[str, Any]]] = {
    "full": {},
    "no_perceptual": {"weights": {"lambda2": 0.0}},
    "no_prt": {"model": {"head": "softmax"}, "augment": {"enabled": False}},
    "softmax_head": {"model": {"head": "softmax"}},
    "no_augment": {"augment": {"enabled": False}},
    "mlp_coords": {"model": {"coordinate_net": "mlp"}},
}


def ablation_variant(
    name: str,
    cfg: TrainConfig,
    weights: LossWeights,
    model_overrides: Mapping[str, Any],
) -> Tuple[TrainConfig, LossWeights, Dict[str, Any]]:
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; known: {sorted(ABLATIONS)}")
    spec = ABLATIONS[name]
    augmentation = cfg.augmentation.model_copy(update=spec.get("augment", {}))
    return (
        cfg.model_copy(update={"augmentation": augmentation}),
        weights.model_copy(update=spec.get("weights", {})),
        {**model_overrides, **spec.get("model", {})},
    )


def run_ablation(
    dataset: LdlDataset,
    variants: Sequence[str],
    cfg: TrainConfig,
    weights: LossWeights,
    model_overrides: Optional[Mapping[str, Any]] = None,
    k: int = 5,
    repeats: int = 10,
    seed: int = 0,
    jobs: int = 1,
) -> List[MetricsReport]:
    """Cross-validate each variant on the same splits; one report per variant."""
    splits = kfold_split(dataset, k, repeats, seed)
    reports = []
    for name in variants:
        v_cfg, v_weights, v_model = ablation_variant(name, cfg, weights, model_overrides or {})
        algo = IdrAlgorithm(v_cfg, v_weights, v_model)
        report, _ = cross_validate(dataset, algo, seed=seed, jobs=jobs, splits=splits)
        reports.append(report.model_copy(update={"algorithm": f"idr:{name}"}))
        logger.info("ablation_variant_finished", variant=name, kl=report.kl.mean)
    return reports

# --- Lnf vs Softmax ---

def head_convergence(
    dataset: LdlDataset,
    cfg: TrainConfig,
    weights: LossWeights,
    model_overrides: Optional[Mapping[str, Any]] = None,
    seed: int = 0,
    target_loss: Optional[float] = None,
) -> Dict[str, Any]:
    """Train one Lnf and one Softmax model on the same split and seeds; report
    the first epoch each reaches ``target_loss`` on validation.

    Without an explicit target the larger of the two best validation losses
    is used, so both heads reach it.
    """
    split = kfold_split(dataset, 2, 1, seed)[0]
    train_set, val_set = dataset.subset(split.train), dataset.subset(split.validation)
    run_cfg = cfg.model_copy(update={"early_stopping": False, "greedy_soup": False})
    histories = {}
    for head in ("lnf", "softmax"):
        mcfg = build_model_config(dataset, {**(model_overrides or {}), "head": head})
        model = IdrModel.initialize(mcfg, run_cfg.seed, 0, 0)
        histories[head] = train(model, train_set, val_set, run_cfg, weights, keys=(0, 0)).history
    best = {head: min(r.val_loss for r in h) for head, h in histories.items()}
    target = target_loss if target_loss is not None else max(best.values())
    reached = {
        head: next((r.epoch for r in h if r.val_loss <= target), None)
        for head, h in histories.items()
    }
    ratio = None
    if reached["lnf"] and reached["softmax"]:
        ratio = reached["softmax"] / reached["lnf"]
    result = {
        "target_val_loss": target,
        "epochs_to_target": reached,
        "speedup": ratio,
        "histories": {head: [r.model_dump() for r in h] for head, h in histories.items()},
    }
    logger.info("head_convergence_measured", target=target, lnf=reached["lnf"], softmax=reached["softmax"], speedup=ratio)
    return result

# --- Matrix inspection ---

def inspect_matrix(model: IdrModel, dataset: LdlDataset, indices: Sequence[int]) -> pd.DataFrame:
    """Row mean and population variance of M next to each target description degree."""
    idx = np.asarray(list(indices), dtype=np.int64)
    if idx.size == 0 or np.any(idx < 0) or np.any(idx >= dataset.n):
        raise DatasetError(f"sample indices must lie in [0, {dataset.n})", indices=idx.tolist())
    _, matrix = model.forward(dataset.features[idx])
    rows = []
    for pos, i in enumerate(idx):
        for label in range(dataset.n_labels):
            rows.append({
                "sample": int(i),
                "label": label,
                "target": float(dataset.targets[i, label]),
                "row_mean": float(matrix[pos, label].mean()),
                "row_var": float(matrix[pos, label].var()),
            })
    return pd.DataFrame(rows, columns=["sample", "label", "target", "row_mean", "row_var"])
