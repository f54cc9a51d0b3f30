"""Training objectives.

Every per-sample function works on the last axis and returns a node of shape
``pred.shape[:-1]``; :func:`composite_loss` batch-averages them.

Small label sets (L <= label_threshold)::

    mean(l1) + lambda_kl * mean(kl) + beta * mean(matrix)

Large label sets::

    mean(l1) + lambda1 * mean(kl) + lambda2 * mean(perceptual) + beta_large * mean(matrix)
"""

import math
from typing import Dict, List, Optional

import numpy as np
import structlog

from app.core.errors import ConfigError, ShapeError
from app.models.dto import LossWeights
from app.utils import autodiff as ad
from app.utils.autodiff import Node

logger = structlog.get_logger(__name__)


def _check_pair(op: str, pred: Node, target: np.ndarray) -> None:
    if pred.shape != np.shape(target):
        raise ShapeError(op, pred.shape, np.shape(target))


def l1_loss(pred: Node, target: np.ndarray) -> Node:
    """sum_j |pred_j - target_j|."""
    _check_pair("l1_loss", pred, target)
    return ad.sum_(ad.abs_(ad.sub(pred, ad.constant(target))), axis=-1)


def kl_loss(target: np.ndarray, pred: Node, eps: float = 1e-12) -> Node:
    """sum_j d_j ln(d_j / max(pred_j, eps)), with 0 ln 0 = 0."""
    _check_pair("kl_loss", pred, target)
    target = np.asarray(target, dtype=np.float64)
    safe = np.where(target > 0, target, 1.0)
    entropy_part = ad.constant(np.sum(np.where(target > 0, target * np.log(safe), 0.0), axis=-1))
    cross = ad.sum_(ad.mul(ad.constant(target), ad.log(ad.clamp_min(pred, eps))), axis=-1)
    return ad.sub(entropy_part, cross)


def gaussian_matrix_reg(matrix: Node, target: np.ndarray, sigma2: float = 0.5) -> Node:
    """sum_i (mean(M_i) - d_i)^2 + (var(M_i) - sigma2)^2, population variance over the 2L entries."""
    if matrix.shape[:-1] != np.shape(target):
        raise ShapeError("gaussian_matrix_reg", matrix.shape, np.shape(target))
    row_mean = ad.mean(matrix, axis=-1, keepdims=True)
    row_var = ad.mean(ad.square(ad.sub(matrix, row_mean)), axis=-1)
    mean_term = ad.square(ad.sub(ad.reshape(row_mean, row_var.shape), ad.constant(target)))
    var_term = ad.square(ad.sub(row_var, ad.constant(np.full(row_var.shape, sigma2))))
    return ad.sum_(ad.add(mean_term, var_term), axis=-1)


def sampled_matrix_reg(matrix: Node, target: np.ndarray, sigma2: float, rng: np.random.Generator) -> Node:
    """L2 distance of M to a matrix whose row i is drawn from N(d_i, sigma2), averaged per row."""
    if matrix.shape[:-1] != np.shape(target):
        raise ShapeError("sampled_matrix_reg", matrix.shape, np.shape(target))
    prior = np.asarray(target)[..., None] + math.sqrt(sigma2) * rng.standard_normal(matrix.shape)
    return ad.sum_(ad.mean(ad.square(ad.sub(matrix, ad.constant(prior))), axis=-1), axis=-1)


class PerceptualNet:
    """Three frozen L -> L linear layers with ReLU between them."""

    def __init__(self, weights: List[np.ndarray], biases: Optional[List[np.ndarray]] = None):
        if len(weights) != 3:
            raise ConfigError("perceptual net needs exactly three layers", layers=len(weights))
        width = weights[0].shape[0]
        for w in weights:
            if w.shape != (width, width):
                raise ShapeError("PerceptualNet", w.shape, (width, width))
        self.width = width
        self.weights = [ad.as_tensor(w) for w in weights]
        biases = biases if biases is not None else [np.zeros(width) for _ in weights]
        self.biases = [ad.as_tensor(b) for b in biases]

    @classmethod
    def initialize(cls, width: int, rng: np.random.Generator) -> "PerceptualNet":
        std = math.sqrt(2.0 / width)
        return cls([rng.standard_normal((width, width)) * std for _ in range(3)])

    def activations(self, v: Node) -> List[Node]:
        out = []
        h = v
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.broadcast_add(ad.matmul(h, ad.constant(w)), ad.constant(b))
            if i < len(self.weights) - 1:
                h = ad.relu(h)
            out.append(h)
        return out


def perceptual_loss(pred: Node, target: np.ndarray, net: PerceptualNet) -> Node:
    """Sum over the three layers of the mean squared activation difference."""
    _check_pair("perceptual_loss", pred, target)
    if pred.shape[-1] != net.width:
        raise ShapeError("perceptual_loss", pred.shape, (net.width,))
    squeeze = pred.ndim == 1
    if squeeze:
        pred = ad.reshape(pred, (1, pred.shape[0]))
        target = np.asarray(target)[None, :]
    ours = net.activations(pred)
    theirs = [a.value for a in net.activations(ad.constant(target))]
    total = None
    for a, b in zip(ours, theirs):
        term = ad.mean(ad.square(ad.sub(a, ad.constant(b))), axis=-1)
        total = term if total is None else ad.add(total, term)
    return ad.reshape(total, ()) if squeeze else total


def uses_perceptual(n_labels: int, weights: LossWeights) -> bool:
    return n_labels > weights.label_threshold


def loss_terms(
    pred: Node,
    target: np.ndarray,
    matrix: Node,
    weights: LossWeights,
    net: Optional[PerceptualNet] = None,
    rng: Optional[np.random.Generator] = None,
) -> Dict[str, Node]:
    """Batch-averaged scalar nodes for every term active at this label count."""
    target = np.asarray(target, dtype=np.float64)
    n_labels = target.shape[-1]
    terms = {
        "l1": ad.mean(l1_loss(pred, target)),
        "kl": ad.mean(kl_loss(target, pred, weights.eps)),
    }
    if weights.matrix_prior == "sampled":
        if rng is None:
            raise ConfigError("sampled matrix prior needs a random stream")
        terms["matrix"] = ad.mean(sampled_matrix_reg(matrix, target, weights.sigma2, rng))
    else:
        terms["matrix"] = ad.mean(gaussian_matrix_reg(matrix, target, weights.sigma2))
    if uses_perceptual(n_labels, weights):
        if net is None:
            raise ConfigError(f"L={n_labels} exceeds {weights.label_threshold}: a perceptual net is required")
        terms["perceptual"] = ad.mean(perceptual_loss(pred, target, net))
    return terms


def term_weights(n_labels: int, weights: LossWeights) -> Dict[str, float]:
    if uses_perceptual(n_labels, weights):
        return {"l1": 1.0, "kl": weights.lambda1, "perceptual": weights.lambda2, "matrix": weights.beta_large}
    return {"l1": 1.0, "kl": weights.lambda_kl, "matrix": weights.beta}


def composite_loss(
    pred: Node,
    target: np.ndarray,
    matrix: Node,
    weights: LossWeights,
    net: Optional[PerceptualNet] = None,
    rng: Optional[np.random.Generator] = None,
) -> Node:
    terms = loss_terms(pred, target, matrix, weights, net, rng)
    coefs = term_weights(np.shape(target)[-1], weights)
    total = None
    for name, node in terms.items():
        part = ad.scale(node, coefs[name])
        total = part if total is None else ad.add(total, part)
    return total
