"""BFGS-LLD comparator: softmax-linear maximum-entropy model fit by L-BFGS.

Objective minimised over (W, b)::

    f = mean_i KL(d_i || softmax(W x_i + b)) + l2 * ||W||^2
    df/dW = mean_i (p_i - d_i) x_i^T + 2 * l2 * W
    df/db = mean_i (p_i - d_i)
"""

from collections import deque
from typing import Callable, Deque, List, Optional, Tuple

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field

from app.core.config import settings
from app.core.errors import DatasetError, LineSearchError, ShapeError
from app.models.dto import CheckpointMeta, LdlDataset
from app.services import checkpoint_store

logger = structlog.get_logger(__name__)

MEMORY = 10
ARMIJO_C1 = 1e-4
MIN_STEP = 1e-20


class MaxEntModel(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    weight: np.ndarray = Field(..., description="(L, d) map.")
    bias: np.ndarray = Field(..., description="(L,) offsets.")
    iterations: int = 0
    objective: Optional[float] = None

    @property
    def n_labels(self) -> int:
        return self.weight.shape[0]

    @property
    def d(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def zeros(cls, d: int, n_labels: int) -> "MaxEntModel":
        return cls(weight=np.zeros((n_labels, d)), bias=np.zeros(n_labels))


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def bfgsll_predict(model: MaxEntModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.d:
        raise ShapeError("bfgsll_predict", x.shape, model.weight.shape)
    return np.exp(_log_softmax(x @ model.weight.T + model.bias))


def _unpack(theta: np.ndarray, d: int, n_labels: int) -> Tuple[np.ndarray, np.ndarray]:
    return theta[: n_labels * d].reshape(n_labels, d), theta[n_labels * d:]


def objective_and_gradient(
    theta: np.ndarray,
    features: np.ndarray,
    targets: np.ndarray,
    l2_reg: float,
) -> Tuple[float, np.ndarray]:
    n, d = features.shape
    n_labels = targets.shape[1]
    weight, bias = _unpack(theta, d, n_labels)
    log_p = _log_softmax(features @ weight.T + bias)
    entropy = np.where(targets > 0, targets * np.log(np.where(targets > 0, targets, 1.0)), 0.0).sum()
    value = (entropy - (targets * log_p).sum()) / n + l2_reg * float((weight * weight).sum())
    resid = (np.exp(log_p) - targets) / n
    g_weight = resid.T @ features + 2.0 * l2_reg * weight
    g_bias = resid.sum(axis=0)
    return float(value), np.concatenate([g_weight.ravel(), g_bias])


def _two_loop(g: np.ndarray, s_hist: Deque[np.ndarray], y_hist: Deque[np.ndarray]) -> np.ndarray:
    q = g.copy()
    alphas: List[float] = []
    rhos = [1.0 / float(y @ s) for s, y in zip(s_hist, y_hist)]
    for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rhos)):
        a = rho * float(s @ q)
        alphas.append(a)
        q -= a * y
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= float(s @ y) / float(y @ y)
    for (s, y, rho), a in zip(zip(s_hist, y_hist, rhos), reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return q


def _armijo(
    fn: Callable[[np.ndarray], Tuple[float, np.ndarray]],
    x: np.ndarray,
    f: float,
    g: np.ndarray,
    direction: np.ndarray,
    step: float,
    iteration: int,
) -> Tuple[float, np.ndarray, float, np.ndarray]:
    slope = float(g @ direction)
    while step >= MIN_STEP:
        x_new = x + step * direction
        f_new, g_new = fn(x_new)
        if np.isfinite(f_new) and f_new <= f + ARMIJO_C1 * step * slope:
            return step, x_new, f_new, g_new
        step *= 0.5
    raise LineSearchError(
        f"Armijo backtracking failed at iteration {iteration}",
        iteration=iteration,
        objective=f,
        grad_norm=float(np.linalg.norm(g)),
        slope=slope,
        last_step=step,
    )


def bfgsll_fit(
    dataset: LdlDataset,
    l2_reg: float = 1e-6,
    tol: float = 1e-6,
    max_iter: int = 500,
    init: Optional[MaxEntModel] = None,
) -> MaxEntModel:
    """L-BFGS (memory 10) from zero, or from ``init`` when given."""
    if dataset.n == 0:
        raise DatasetError("cannot fit an empty dataset")
    features, targets = dataset.features, dataset.targets
    d, n_labels = dataset.d, dataset.n_labels
    start = init or MaxEntModel.zeros(d, n_labels)
    x = np.concatenate([start.weight.ravel(), start.bias]).astype(np.float64)

    def fn(theta: np.ndarray) -> Tuple[float, np.ndarray]:
        return objective_and_gradient(theta, features, targets, l2_reg)

    f, g = fn(x)
    s_hist: Deque[np.ndarray] = deque(maxlen=MEMORY)
    y_hist: Deque[np.ndarray] = deque(maxlen=MEMORY)
    iteration = 0
    for iteration in range(max_iter):
        g_norm = float(np.linalg.norm(g))
        if g_norm < tol:
            break
        direction = -_two_loop(g, s_hist, y_hist)
        slope = float(g @ direction)
        if slope >= 0:
            s_hist.clear()
            y_hist.clear()
            direction = -g
            slope = -g_norm ** 2
        # predicted decrease below float resolution: nothing left to gain
        if abs(slope) <= np.finfo(float).eps * max(1.0, abs(f)):
            break
        step0 = min(1.0, 1.0 / g_norm) if not s_hist else 1.0
        step, x_new, f_new, g_new = _armijo(fn, x, f, g, direction, step0, iteration)
        s, y = x_new - x, g_new - g
        if float(s @ y) > 1e-12:
            s_hist.append(s)
            y_hist.append(y)
        x, f, g = x_new, f_new, g_new
    else:
        iteration = max_iter

    weight, bias = _unpack(x, d, n_labels)
    logger.info("bfgsll_converged", iterations=iteration, objective=f, grad_norm=float(np.linalg.norm(g)))
    return MaxEntModel(weight=weight.copy(), bias=bias.copy(), iterations=iteration, objective=f)


def save_model(path, model: MaxEntModel):
    meta = CheckpointMeta(
        schema_version=settings.SCHEMA_VERSION,
        kind="bfgsll",
        extra={"iterations": model.iterations, "objective": model.objective},
    )
    return checkpoint_store.save(path, {"weight": model.weight, "bias": model.bias}, meta)


def load_model(path) -> MaxEntModel:
    meta, params = checkpoint_store.load(path, kind="bfgsll")
    return MaxEntModel(
        weight=params["weight"],
        bias=params["bias"],
        iterations=int(meta.extra.get("iterations", 0)),
        objective=meta.extra.get("objective"),
    )
