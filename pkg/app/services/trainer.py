"""Optimisation loop, early stopping, greedy soup and the cross-validation driver."""

import math
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Dict, List, NamedTuple, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd
import structlog

from app.core.config import settings
from app.core.errors import ConfigError, DatasetError, DivergenceError
from app.models.dto import EpochRecord, LdlDataset, LossWeights, MetricsReport, ModelConfig, Split, TrainConfig
from app.services import metrics
from app.services.baseline import bfgsll_fit, bfgsll_predict
from app.services.dataset_service import kfold_split, sample_augmentation
from app.services.idr_model import IdrModel, model_forward
from app.services.objectives import PerceptualNet, composite_loss, uses_perceptual
from app.utils import autodiff as ad
from app.utils.seeding import stream

logger = structlog.get_logger(__name__)

Params = Dict[str, np.ndarray]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
EVAL_CHUNK = 256


class AdamState(NamedTuple):
    step: int
    m: Params
    v: Params


class Checkpoint(NamedTuple):
    params: Params
    epoch: int
    val_kl: float


class TrainResult(NamedTuple):
    model: IdrModel
    history: List[EpochRecord]
    checkpoints: List[Checkpoint]


def adam_init(params: Params) -> AdamState:
    return AdamState(
        step=0,
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
    )


def adam_step(
    params: Params,
    grads: Params,
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
) -> Tuple[Params, AdamState]:
    """One Adam update with decoupled weight decay. Keys missing from ``grads`` stay untouched."""
    t = state.step + 1
    new_params, new_m, new_v = dict(params), dict(state.m), dict(state.v)
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {key}", key=key, step=t)
        m = ADAM_BETA1 * state.m[key] + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.v[key] + (1.0 - ADAM_BETA2) * g * g
        m_hat = m / (1.0 - ADAM_BETA1 ** t)
        v_hat = v / (1.0 - ADAM_BETA2 ** t)
        theta = params[key]
        new_params[key] = theta - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS) - lr * weight_decay * theta
        new_m[key], new_v[key] = m, v
    return new_params, AdamState(step=t, m=new_m, v=new_v)

# --- Evaluation helpers ---

def predict_params(model: IdrModel, params: Params, features: np.ndarray) -> np.ndarray:
    return model.with_params(params).predict(features, batch_size=EVAL_CHUNK)


def validation_kl(model: IdrModel, params: Params, val_set: LdlDataset) -> float:
    pred = predict_params(model, params, val_set.features)
    return float(metrics.evaluate_batch(val_set.targets, pred)[:, 3].mean())


def validation_loss(
    model: IdrModel,
    params: Params,
    val_set: LdlDataset,
    weights: LossWeights,
    net: Optional[PerceptualNet],
    seed: int,
) -> Tuple[float, float]:
    """Composite loss and mean KL on the validation slice, with the inference mask bank."""
    consts = {k: ad.constant(v) for k, v in params.items()}
    prior_rng = stream(seed, "validation-prior")
    total, preds = 0.0, []
    for start in range(0, val_set.n, EVAL_CHUNK):
        x = val_set.features[start:start + EVAL_CHUNK]
        y = val_set.targets[start:start + EVAL_CHUNK]
        pred, matrix = model_forward(consts, x, model.config)
        loss = composite_loss(pred, y, matrix, weights, net, prior_rng)
        total += loss.item() * x.shape[0]
        preds.append(np.array(pred.value))
    kl = float(metrics.evaluate_batch(val_set.targets, np.concatenate(preds))[:, 3].mean())
    return total / val_set.n, kl

# --- Soup ---

def average_params(ingredients: Sequence[Params]) -> Params:
    return {key: np.mean(np.stack([p[key] for p in ingredients]), axis=0) for key in ingredients[0]}


def greedy_soup(checkpoints: Sequence[Checkpoint], val_set: LdlDataset, model: IdrModel) -> Params:
    """Start from the lowest-KL checkpoint; admit each next-best one if the
    uniform average of the ingredients does not raise validation KL."""
    if not checkpoints:
        raise ConfigError("greedy soup needs at least one checkpoint")
    ranked = sorted(checkpoints, key=lambda c: (c.val_kl, c.epoch))
    ingredients = [ranked[0].params]
    soup = ranked[0].params
    soup_kl = validation_kl(model, soup, val_set)
    best_single = soup_kl
    for cand in ranked[1:]:
        trial = average_params([*ingredients, cand.params])
        trial_kl = validation_kl(model, trial, val_set)
        if trial_kl <= soup_kl:
            ingredients.append(cand.params)
            soup, soup_kl = trial, trial_kl
    assert soup_kl <= best_single, "soup must not be worse than its best ingredient"
    logger.info("greedy_soup_built", ingredients=len(ingredients), candidates=len(ranked), val_kl=soup_kl)
    return soup

# --- Training ---

def train(
    model: IdrModel,
    train_set: LdlDataset,
    val_set: LdlDataset,
    cfg: TrainConfig,
    weights: LossWeights,
    net: Optional[PerceptualNet] = None,
    keys: Sequence[int] = (),
) -> TrainResult:
    """Mini-batch Adam on the composite objective.

    Stops once validation loss has failed to improve by ``min_delta`` for
    ``patience`` consecutive epochs. Returns the soup of the per-epoch
    checkpoints when greedy soup is on, else the best-validation parameters
    (early stopping) or the last ones.
    """
    if train_set.n == 0 or val_set.n == 0:
        raise DatasetError("training needs non-empty train and validation sets", train=train_set.n, validation=val_set.n)
    mcfg = model.config
    if uses_perceptual(mcfg.n_labels, weights) and net is None:
        net = PerceptualNet.initialize(mcfg.n_labels, stream(cfg.seed, "perceptual"))
    rng_batch = stream(cfg.seed, "augment", *keys)
    rng_time = stream(cfg.seed, "time-masks", *keys)
    rng_prior = stream(cfg.seed, "prior", *keys)
    trainable = model.trainable_keys()

    params = dict(model.params)
    state = adam_init(params)
    history: List[EpochRecord] = []
    checkpoints: List[Checkpoint] = []
    best_loss, best_params, stale = math.inf, params, 0

    for epoch in range(1, cfg.epochs + 1):
        order = rng_batch.permutation(train_set.n)
        running = 0.0
        for start in range(0, train_set.n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = train_set.features[idx], train_set.targets[idx]
            if cfg.augmentation.enabled:
                xb, yb = sample_augmentation(xb, yb, cfg.augmentation, rng_batch)
            leaves = {
                k: ad.parameter(v, name=k) if k in trainable else ad.constant(v)
                for k, v in params.items()
            }
            pred, matrix = model_forward(leaves, xb, mcfg, rng=rng_time)
            loss = composite_loss(pred, yb, matrix, weights, net, rng_prior)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}", epoch=epoch)
            grad_map = ad.backward(loss)
            grads = {k: grad_map.get(leaves[k], np.zeros_like(params[k])) for k in trainable}
            params, state = adam_step(params, grads, state, cfg.learning_rate, cfg.weight_decay)
            running += value * len(idx)

        val_loss, val_kl = validation_loss(model, params, val_set, weights, net, cfg.seed)
        if not np.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}", epoch=epoch)
        record = EpochRecord(epoch=epoch, train_loss=running / train_set.n, val_loss=val_loss, val_kl=val_kl)
        history.append(record)
        logger.debug("epoch_completed", **record.model_dump())
        if cfg.greedy_soup:
            checkpoints.append(Checkpoint(params=params, epoch=epoch, val_kl=val_kl))

        if val_loss < best_loss - cfg.min_delta:
            best_loss, best_params, stale = val_loss, params, 0
        else:
            stale += 1
        if cfg.early_stopping and stale >= cfg.patience:
            logger.info("early_stopping", epoch=epoch, best_val_loss=best_loss, patience=cfg.patience)
            break

    if cfg.greedy_soup and checkpoints:
        final = greedy_soup(checkpoints, val_set, model)
    elif cfg.early_stopping:
        final = best_params
    else:
        final = params
    return TrainResult(model=model.with_params(final), history=history, checkpoints=checkpoints)


def write_history(history: Sequence[EpochRecord], path) -> None:
    frame = pd.DataFrame([r.model_dump() for r in history], columns=["epoch", "train_loss", "val_loss", "val_kl"])
    frame.insert(0, "schema_version", settings.SCHEMA_VERSION)
    frame.to_csv(path, index=False, encoding="utf-8")

# --- Cross-validation ---

class Algorithm(Protocol):
    name: str

    def fit_predict(self, train_set: LdlDataset, val_set: LdlDataset, test_x: np.ndarray, keys: Tuple[int, int]) -> np.ndarray:
        ...


class UniformAlgorithm:
    name = "uniform"

    def fit_predict(self, train_set, val_set, test_x, keys):
        n_labels = train_set.n_labels
        return np.full((test_x.shape[0], n_labels), 1.0 / n_labels)


class BfgsLldAlgorithm:
    name = "bfgsll"

    def __init__(self, l2_reg: float = 1e-6, tol: float = 1e-6, max_iter: int = 500):
        self.l2_reg, self.tol, self.max_iter = l2_reg, tol, max_iter

    def fit_predict(self, train_set, val_set, test_x, keys):
        model = bfgsll_fit(train_set, self.l2_reg, self.tol, self.max_iter)
        return bfgsll_predict(model, test_x)


class IdrAlgorithm:
    name = "idr"

    def __init__(
        self,
        cfg: TrainConfig,
        weights: LossWeights,
        model_overrides: Optional[Dict[str, Any]] = None,
    ):
        self.cfg, self.weights = cfg, weights
        self.model_overrides = dict(model_overrides or {})

    def model_config(self, dataset: LdlDataset) -> ModelConfig:
        return build_model_config(dataset, self.model_overrides)

    def fit_predict(self, train_set, val_set, test_x, keys):
        model = IdrModel.initialize(self.model_config(train_set), self.cfg.seed, *keys)
        result = train(model, train_set, val_set, self.cfg, self.weights, keys=keys)
        return result.model.predict(test_x, batch_size=EVAL_CHUNK)


def build_model_config(dataset: LdlDataset, overrides: Optional[Dict[str, Any]] = None) -> ModelConfig:
    try:
        return ModelConfig(d_in=dataset.d, n_labels=dataset.n_labels, **(overrides or {}))
    except ValueError as e:
        raise ConfigError(f"invalid model configuration: {e}")


def make_algorithm(
    algo: str,
    cfg: TrainConfig,
    weights: LossWeights,
    model_overrides: Optional[Dict[str, Any]] = None,
) -> Algorithm:
    if algo == "idr":
        return IdrAlgorithm(cfg, weights, model_overrides)
    if algo == "bfgsll":
        return BfgsLldAlgorithm()
    if algo == "uniform":
        return UniformAlgorithm()
    raise ConfigError(f"unknown algorithm {algo!r}", algo=algo)


def _run_split(algorithm: Algorithm, dataset: LdlDataset, split: Split) -> np.ndarray:
    log = logger.bind(algorithm=algorithm.name, repeat=split.repeat, fold=split.fold)
    test = dataset.subset(split.test)
    pred = algorithm.fit_predict(
        dataset.subset(split.train),
        dataset.subset(split.validation),
        test.features,
        (split.repeat, split.fold),
    )
    scores = metrics.evaluate_batch(test.targets, pred)
    log.info("cv_split_finished", n_test=test.n, kl=float(scores[:, 3].mean()))
    return scores


def cross_validate(
    dataset: LdlDataset,
    algorithm: Algorithm,
    k: int = 5,
    repeats: int = 10,
    seed: int = 0,
    jobs: int = 1,
    splits: Optional[List[Split]] = None,
) -> Tuple[MetricsReport, List[np.ndarray]]:
    """Evaluate ``algorithm`` on every (repeat, fold) split; splits run on ``jobs`` threads."""
    splits = splits if splits is not None else kfold_split(dataset, k, repeats, seed)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_split = list(pool.map(lambda s: _run_split(algorithm, dataset, s), splits))
    else:
        per_split = [_run_split(algorithm, dataset, s) for s in splits]
    report = metrics.aggregate(per_split, algorithm.name, dataset.name)
    logger.info("cv_finished", algorithm=algorithm.name, dataset=dataset.name, splits=len(splits))
    return report, per_split
