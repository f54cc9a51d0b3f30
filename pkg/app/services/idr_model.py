"""Implicit distribution representation network.

Pipeline per batch of feature rows:

    stack_time -> extract_features -> grid_sample(F_f, gcn_forward()) -> M
               -> self_attention_squeeze -> Lnf / Softmax head

Parameters live in a flat ``{key: ndarray}`` dict. The key list is the
checkpoint schema and the unit of model-soup averaging:

    extractor.{i}.weight (n_in, n_out), extractor.{i}.bias (n_out,)   i < n_linear
    extractor.head.weight (hidden, L*H*W), extractor.head.bias (L*H*W,)
    graph.coords (L, coord_dim)
    graph.{j}.weight                                                  j < len(gcn_widths) + 1
    attention.query / attention.key / attention.value (2L, 2L)
    attention.out.weight (2L, 1), attention.out.bias (1,)
"""

import math
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np
import structlog

from app.core.errors import DomainError, SchemaError, ShapeError
from app.models.dto import ModelConfig
from app.utils import autodiff as ad
from app.utils.autodiff import Node
from app.utils.seeding import stream

logger = structlog.get_logger(__name__)


class LayerSpec(NamedTuple):
    index: int
    n_in: int
    n_out: int
    skip_from: Optional[int]

    @property
    def weight_key(self) -> str:
        return f"extractor.{self.index}.weight"

    @property
    def bias_key(self) -> str:
        return f"extractor.{self.index}.bias"


def extractor_layout(cfg: ModelConfig) -> List[LayerSpec]:
    """Linear+ReLU units; every second unit from the third on adds the output
    of the unit two places back (identity shortcut over a pair)."""
    layers = []
    for i in range(cfg.n_linear):
        n_in = cfg.d_in if i == 0 else cfg.hidden
        skip = i - 2 if i >= 2 and i % 2 == 0 else None
        layers.append(LayerSpec(i, n_in, cfg.hidden, skip))
    return layers


def gcn_dims(cfg: ModelConfig) -> List[int]:
    return [cfg.coord_dim, *cfg.gcn_widths, 2 * cfg.token_width]


def param_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    shapes: Dict[str, Tuple[int, ...]] = {}
    for spec in extractor_layout(cfg):
        shapes[spec.weight_key] = (spec.n_in, spec.n_out)
        shapes[spec.bias_key] = (spec.n_out,)
    map_size = cfg.n_labels * cfg.height * cfg.width
    shapes["extractor.head.weight"] = (cfg.hidden, map_size)
    shapes["extractor.head.bias"] = (map_size,)
    shapes["graph.coords"] = (cfg.n_labels, cfg.coord_dim)
    dims = gcn_dims(cfg)
    for j in range(len(dims) - 1):
        shapes[f"graph.{j}.weight"] = (dims[j], dims[j + 1])
    tw = cfg.token_width
    for name in ("query", "key", "value"):
        shapes[f"attention.{name}"] = (tw, tw)
    shapes["attention.out.weight"] = (tw, 1)
    shapes["attention.out.bias"] = (1,)
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """Kaiming-normal weights, zero biases, standard-normal coordinates.

    The attention read-out starts at zero weight and unit bias, so every logit
    is 1 and the Lnf head begins at the uniform distribution.
    """
    params: Dict[str, np.ndarray] = {}
    for key, shape in param_shapes(cfg).items():
        if key == "graph.coords":
            params[key] = rng.standard_normal(shape)
        elif key == "attention.out.weight":
            params[key] = np.zeros(shape)
        elif key == "attention.out.bias":
            params[key] = np.ones(shape)
        elif key.endswith("bias"):
            params[key] = np.zeros(shape)
        else:
            params[key] = rng.standard_normal(shape) * math.sqrt(2.0 / shape[0])
    return params

# --- Heads ---

def softmax(z: Node) -> Node:
    """Softmax along the last axis; the max is subtracted as a constant."""
    peak = ad.constant(np.max(z.value, axis=-1, keepdims=True), dtype=z.value.dtype)
    e = ad.exp(ad.sub(z, peak))
    return ad.div(e, ad.sum_(e, axis=-1, keepdims=True))


def lnf(z: Node) -> Node:
    """(z_i + |min z|) / sum_c (z_c + |min z|) along the last axis."""
    shift = ad.abs_(ad.min_reduce(z, axis=-1, keepdims=True))
    num = ad.add(z, shift)
    den = ad.sum_(num, axis=-1, keepdims=True)
    if np.any(den.value <= 0):
        raise DomainError("Lnf denominator is zero: every entry equals a non-positive minimum", op="lnf")
    return ad.div(num, den)


HEADS = {"lnf": lnf, "softmax": softmax}

# --- Latent feature extraction ---

def stack_time(x: np.ndarray, time_steps: int, keep_prob: float, rng: np.random.Generator) -> np.ndarray:
    """(N, d) -> (N, T, d): slot 0 native, slots 1.. Bernoulli(keep_prob)-masked copies."""
    x = np.atleast_2d(np.asarray(x))
    if time_steps == 1:
        return x[:, None, :]
    masks = (rng.random((x.shape[0], time_steps - 1, x.shape[1])) < keep_prob).astype(x.dtype)
    return np.concatenate([x[:, None, :], x[:, None, :] * masks], axis=1)


def inference_masks(cfg: ModelConfig) -> np.ndarray:
    """Fixed (T-1, d) mask bank used for every sample outside training."""
    rng = stream(cfg.eval_seed, "inference-masks")
    return (rng.random((cfg.time_steps - 1, cfg.d_in)) < cfg.keep_prob).astype(np.float64)


def stack_time_inference(x: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x))
    bank = inference_masks(cfg)
    return np.concatenate([x[:, None, :], x[:, None, :] * bank[None, :, :]], axis=1)


def extractor_trunk(P: Dict[str, Node], x_stack: Node, cfg: ModelConfig) -> List[Node]:
    """Post-ReLU activation of every linear unit, each (N, T, hidden)."""
    if x_stack.shape[-1] != cfg.d_in:
        raise ShapeError("extract_features", x_stack.shape, (cfg.time_steps, cfg.d_in))
    acts: List[Node] = []
    h = x_stack
    for spec in extractor_layout(cfg):
        pre = ad.broadcast_add(ad.matmul(h, P[spec.weight_key]), P[spec.bias_key])
        if spec.skip_from is not None:
            pre = ad.add(pre, acts[spec.skip_from])
        h = ad.relu(pre)
        acts.append(h)
    return acts


def transform_features(P: Dict[str, Node], pooled: Node, cfg: ModelConfig) -> Node:
    """Transformation layer: (N, hidden) -> (N, L, H, W)."""
    flat = ad.broadcast_add(ad.matmul(pooled, P["extractor.head.weight"]), P["extractor.head.bias"])
    return ad.reshape(flat, (pooled.shape[0], cfg.n_labels, cfg.height, cfg.width))


def extract_features(P: Dict[str, Node], x_stack, cfg: ModelConfig) -> Node:
    if not isinstance(x_stack, Node):
        x_stack = ad.constant(x_stack)
    acts = extractor_trunk(P, x_stack, cfg)
    pooled = ad.mean(acts[-1], axis=1)
    return transform_features(P, pooled, cfg)

# --- Coordinate graph ---

def normalized_adjacency(n_nodes: int, coordinate_net: str = "gcn") -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 for the complete undirected graph; identity for the MLP variant."""
    if coordinate_net == "mlp":
        return np.eye(n_nodes)
    a_hat = np.ones((n_nodes, n_nodes))
    deg = a_hat.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    return inv_sqrt[:, None] * a_hat * inv_sqrt[None, :]


def gcn_forward(P: Dict[str, Node], cfg: ModelConfig) -> Node:
    """Lookup grid (L, 2L, 2) in [-1, 1]: ReLU graph convolutions, tanh output."""
    adj = ad.constant(normalized_adjacency(cfg.n_labels, cfg.coordinate_net))
    h = P["graph.coords"]
    n_layers = len(gcn_dims(cfg)) - 1
    for j in range(n_layers):
        h = ad.matmul(adj, ad.matmul(h, P[f"graph.{j}.weight"]))
        h = ad.tanh(h) if j == n_layers - 1 else ad.relu(h)
    return ad.reshape(h, (cfg.n_labels, cfg.token_width, 2))

# --- Lookup ---

def grid_sample(feature_map: Node, grid: Node) -> Node:
    """Bilinear lookup of channel l of (N, L, H, W) at the P points of grid[l].

    Align-corners convention: -1 maps to pixel 0, +1 to pixel H-1 / W-1.
    grid[..., 0] indexes width, grid[..., 1] height. Coordinates outside
    [-1, 1] clamp to the border and receive no gradient.
    """
    n, n_ch, height, width = feature_map.shape
    if grid.ndim != 3 or grid.shape[0] != n_ch or grid.shape[2] != 2:
        raise ShapeError("grid_sample", feature_map.shape, grid.shape)
    gv = grid.value
    px = (gv[..., 0] + 1.0) * 0.5 * (width - 1)
    py = (gv[..., 1] + 1.0) * 0.5 * (height - 1)
    in_x = (px >= 0) & (px <= width - 1)
    in_y = (py >= 0) & (py <= height - 1)
    px = np.clip(px, 0, width - 1)
    py = np.clip(py, 0, height - 1)
    x0 = np.clip(np.floor(px), 0, width - 2).astype(np.int64)
    y0 = np.clip(np.floor(py), 0, height - 2).astype(np.int64)
    ad.record_branch("grid_sample", np.stack([x0, y0, in_x, in_y]).astype(np.int64))
    wx = px - x0
    wy = py - y0
    ch = np.arange(n_ch)[:, None]
    fv = feature_map.value
    v00 = fv[:, ch, y0, x0]
    v01 = fv[:, ch, y0, x0 + 1]
    v10 = fv[:, ch, y0 + 1, x0]
    v11 = fv[:, ch, y0 + 1, x0 + 1]
    out = (1 - wx) * (1 - wy) * v00 + wx * (1 - wy) * v01 + (1 - wx) * wy * v10 + wx * wy * v11

    def rule(g: np.ndarray):
        g_map = np.zeros_like(fv)
        np.add.at(g_map, (slice(None), ch, y0, x0), g * (1 - wx) * (1 - wy))
        np.add.at(g_map, (slice(None), ch, y0, x0 + 1), g * wx * (1 - wy))
        np.add.at(g_map, (slice(None), ch, y0 + 1, x0), g * (1 - wx) * wy)
        np.add.at(g_map, (slice(None), ch, y0 + 1, x0 + 1), g * wx * wy)
        d_px = (1 - wy) * (v01 - v00) + wy * (v11 - v10)
        d_py = (1 - wx) * (v10 - v00) + wx * (v11 - v01)
        g_x = (g * d_px).sum(axis=0) * 0.5 * (width - 1) * in_x
        g_y = (g * d_py).sum(axis=0) * 0.5 * (height - 1) * in_y
        return g_map, np.stack([g_x, g_y], axis=-1)

    return ad._make(out, (feature_map, grid), rule, "grid_sample")

# --- Squeeze ---

def self_attention_squeeze(P: Dict[str, Node], matrix: Node) -> Node:
    """Single-head scaled dot-product attention over the L rows of M, then a
    shared scalar read-out per token. (N, L, 2L) -> (N, L) logits."""
    tw = P["attention.query"].shape[0]
    if matrix.shape[-1] != tw:
        raise ShapeError("self_attention_squeeze", matrix.shape, P["attention.query"].shape)
    q = ad.matmul(matrix, P["attention.query"])
    k = ad.matmul(matrix, P["attention.key"])
    v = ad.matmul(matrix, P["attention.value"])
    scores = ad.scale(ad.matmul(q, ad.swap_last(k)), 1.0 / math.sqrt(tw))
    weights = softmax(scores)
    attended = ad.matmul(weights, v)
    out = ad.broadcast_add(ad.matmul(attended, P["attention.out.weight"]), P["attention.out.bias"])
    return ad.reshape(out, matrix.shape[:-1])

# --- Composition ---

def forward_from_features(P: Dict[str, Node], feature_map: Node, cfg: ModelConfig) -> Tuple[Node, Node]:
    grid = gcn_forward(P, cfg)
    matrix = grid_sample(feature_map, grid)
    logits = self_attention_squeeze(P, matrix)
    return HEADS[cfg.head](logits), matrix


def model_forward(
    P: Dict[str, Node],
    x: np.ndarray,
    cfg: ModelConfig,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[Node, Node]:
    """Prediction (N, L) and label distribution matrix (N, L, 2L).

    With ``rng`` the pseudo-feature slots are freshly masked (training);
    without it the model's fixed inference mask bank is used.
    """
    x = np.atleast_2d(np.asarray(x))
    if x.shape[-1] != cfg.d_in:
        raise ShapeError("model_forward", x.shape, (cfg.d_in,))
    if rng is not None:
        x_stack = stack_time(x, cfg.time_steps, cfg.keep_prob, rng)
    else:
        x_stack = stack_time_inference(x, cfg)
    feature_map = extract_features(P, x_stack, cfg)
    return forward_from_features(P, feature_map, cfg)


class IdrModel:
    """Configuration plus the flat parameter dict."""

    def __init__(self, config: ModelConfig, params: Dict[str, np.ndarray]):
        expected = param_shapes(config)
        if list(params) != list(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            if missing or extra:
                raise SchemaError("parameter keys do not match the model schema", missing=missing, extra=extra)
            params = {key: params[key] for key in expected}
        for key, shape in expected.items():
            if tuple(np.shape(params[key])) != shape:
                raise SchemaError(f"{key}: expected shape {shape}, got {np.shape(params[key])}", key=key)
        self.config = config
        self.params = {key: np.asarray(val, dtype=np.float64) for key, val in params.items()}

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int, *keys: int) -> "IdrModel":
        return cls(config, init_params(config, stream(seed, "init", *keys)))

    def with_params(self, params: Dict[str, np.ndarray]) -> "IdrModel":
        return IdrModel(self.config, params)

    def leaves(self) -> Dict[str, Node]:
        return {key: ad.parameter(val, name=key) for key, val in self.params.items()}

    def constants(self) -> Dict[str, Node]:
        return {key: ad.constant(val) for key, val in self.params.items()}

    def trainable_keys(self) -> List[str]:
        return [k for k in self.params if not (self.config.freeze_coords and k == "graph.coords")]

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        pred, matrix = model_forward(self.constants(), x, self.config)
        return np.array(pred.value), np.array(matrix.value)

    def predict(self, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        P = self.constants()
        chunks = [
            np.array(model_forward(P, x[i:i + batch_size], self.config)[0].value)
            for i in range(0, x.shape[0], batch_size)
        ]
        return np.concatenate(chunks, axis=0)
