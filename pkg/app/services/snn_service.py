"""ANN -> SNN conversion of the feature extractor.

Percentile calibration fixes one activation scale p_l per linear unit; the
converted weights are W_l * p_{l-1} / p_l (p_{-1} = 1), biases b_l / p_l and
shortcut inputs are scaled by p_skip / p_l, so every integrate-and-fire layer
works in units of its own threshold (1). Neurons reset by subtraction and start
at half threshold. Layer 0 receives each analog pseudo-feature slot as a
constant current for the whole simulation; the slots run side by side.
"""

from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import structlog

from app.core.config import settings
from app.core.errors import ConversionError, SchemaError, ShapeError
from app.models.dto import CalibrationProfile, CheckpointMeta, EnergyReport
from app.services import checkpoint_store
from app.services.idr_model import (
    IdrModel,
    extractor_layout,
    extractor_trunk,
    forward_from_features,
    stack_time_inference,
    transform_features,
)
from app.utils import autodiff as ad

logger = structlog.get_logger(__name__)

THRESHOLD = 1.0
E_MAC = 4.6
E_AC = 0.9


class SpikingLayer(NamedTuple):
    weight: np.ndarray
    bias: np.ndarray
    skip_from: Optional[int] = None
    skip_scale: float = 0.0


class SpikingNet(NamedTuple):
    layers: List[SpikingLayer]
    scales: List[float]
    threshold: float = THRESHOLD
    head_width: int = 0

    def fanout(self, index: int) -> int:
        """Synapses driven by one spike of layer ``index``."""
        out = self.layers[index + 1].weight.shape[1] if index + 1 < len(self.layers) else self.head_width
        for layer in self.layers:
            if layer.skip_from == index:
                out += layer.weight.shape[1]
        return out


class SimulationResult(NamedTuple):
    counts: List[np.ndarray]
    rates: List[np.ndarray]
    decoded: List[np.ndarray]
    input_events: int
    t_sim: int


def activation_percentile(values: np.ndarray, q: float = 99.9) -> float:
    return float(np.percentile(np.asarray(values, dtype=np.float64).ravel(), q, method="linear"))


def ann_activations(model: IdrModel, x: np.ndarray) -> List[np.ndarray]:
    """Post-ReLU activations of every extractor unit, each (N, T, hidden)."""
    x_stack = stack_time_inference(x, model.config)
    acts = extractor_trunk(model.constants(), ad.constant(x_stack), model.config)
    return [np.array(a.value) for a in acts]


def calibrate(model: IdrModel, x: np.ndarray, q: float = 99.9) -> CalibrationProfile:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ConversionError("calibration batch is empty", shape=list(x.shape))
    scales = []
    for layer, acts in enumerate(ann_activations(model, x)):
        p = activation_percentile(acts, q)
        if not p > 0:
            raise ConversionError(f"layer {layer} is silent on the calibration batch", layer=layer)
        scales.append(p)
    logger.info("snn_calibrated", percentile=q, layers=len(scales), scales=[round(s, 6) for s in scales])
    return CalibrationProfile(percentile=q, scales=scales)


def convert(model: IdrModel, profile: CalibrationProfile) -> SpikingNet:
    layout = extractor_layout(model.config)
    if len(profile.scales) != len(layout):
        raise ConversionError(
            f"profile covers {len(profile.scales)} layers, the extractor has {len(layout)}",
            scales=len(profile.scales),
            layers=len(layout),
        )
    p = profile.scales
    layers = []
    for spec in layout:
        prev = p[spec.index - 1] if spec.index > 0 else 1.0
        layers.append(SpikingLayer(
            weight=model.params[spec.weight_key] * prev / p[spec.index],
            bias=model.params[spec.bias_key] / p[spec.index],
            skip_from=spec.skip_from,
            skip_scale=p[spec.skip_from] / p[spec.index] if spec.skip_from is not None else 0.0,
        ))
    head_width = model.params["extractor.head.weight"].shape[1]
    return SpikingNet(layers=layers, scales=list(p), head_width=head_width)


def simulate(snn: SpikingNet, x_stack: np.ndarray, t_sim: int) -> SimulationResult:
    """Integrate-and-fire over ``t_sim`` steps for a (N, T, d) input.

    Each pseudo-feature slot drives its own trajectory; counts and rates are
    (N, T, width) and decoded activations average the slots, matching the
    slot-averaged ANN features.
    """
    if t_sim < 1:
        raise ConversionError("simulation needs at least one step", t_sim=t_sim)
    x_stack = np.asarray(x_stack, dtype=np.float64)
    if x_stack.ndim != 3 or x_stack.shape[-1] != snn.layers[0].weight.shape[0]:
        raise ShapeError("simulate", x_stack.shape, snn.layers[0].weight.shape)
    n, n_slots, d = x_stack.shape
    drive = x_stack.reshape(n * n_slots, d)
    theta = snn.threshold
    potentials = [np.full((drive.shape[0], layer.weight.shape[1]), 0.5 * theta) for layer in snn.layers]
    counts = [np.zeros((drive.shape[0], layer.weight.shape[1]), dtype=np.int64) for layer in snn.layers]
    input_events = int(np.count_nonzero(drive)) * t_sim
    for _ in range(t_sim):
        spikes: List[np.ndarray] = []
        for i, layer in enumerate(snn.layers):
            source = drive if i == 0 else spikes[i - 1]
            current = source @ layer.weight + layer.bias
            if layer.skip_from is not None:
                current = current + layer.skip_scale * spikes[layer.skip_from]
            potentials[i] += current
            fired = potentials[i] >= theta
            potentials[i] -= theta * fired
            counts[i] += fired
            spikes.append(fired.astype(np.float64))
    counts = [c.reshape(n, n_slots, -1) for c in counts]
    rates = [c / t_sim for c in counts]
    decoded = [r.mean(axis=1) * p for r, p in zip(rates, snn.scales)]
    return SimulationResult(counts=counts, rates=rates, decoded=decoded, input_events=input_events, t_sim=t_sim)


def relative_error(snn_values: np.ndarray, ann_values: np.ndarray) -> float:
    """sum |snn - ann| / sum |ann|."""
    den = float(np.abs(ann_values).sum())
    num = float(np.abs(snn_values - ann_values).sum())
    return num / den if den > 0 else num


def decoding_errors(model: IdrModel, snn: SpikingNet, x: np.ndarray, t_sims: Sequence[int]) -> Dict[int, float]:
    """Final-layer decoding error against the T-averaged ANN activation, per simulation length."""
    ann_last = ann_activations(model, x)[-1].mean(axis=1)
    x_stack = stack_time_inference(x, model.config)
    return {t: relative_error(simulate(snn, x_stack, t).decoded[-1], ann_last) for t in t_sims}


def count_synops(snn: SpikingNet, input_events: int, counts: Sequence[np.ndarray]) -> int:
    total = input_events * snn.layers[0].weight.shape[1]
    for i, c in enumerate(counts):
        total += int(np.asarray(c).sum()) * snn.fanout(i)
    return int(total)


def count_macs(snn: SpikingNet, n_samples: int, n_slots: int) -> int:
    per_slot = sum(layer.weight.shape[0] * layer.weight.shape[1] for layer in snn.layers)
    head = snn.layers[-1].weight.shape[1] * snn.head_width
    return int(n_samples * (n_slots * per_slot + head))


def energy_report(
    snn: SpikingNet,
    x_stack: np.ndarray,
    t_sim: int,
    e_mac: float = E_MAC,
    e_ac: float = E_AC,
) -> EnergyReport:
    """Analytic ANN MACs vs spike-driven synaptic operations on a sample batch."""
    x_stack = np.asarray(x_stack, dtype=np.float64)
    result = simulate(snn, x_stack, t_sim)
    macs = count_macs(snn, x_stack.shape[0], x_stack.shape[1])
    synops = count_synops(snn, result.input_events, result.counts)
    saving = 1.0 - (synops * e_ac) / (macs * e_mac) if macs else 0.0
    logger.info("energy_estimated", ann_macs=macs, snn_synops=synops, saving=saving, t_sim=t_sim)
    return EnergyReport(
        schema_version=settings.SCHEMA_VERSION,
        ann_macs=macs,
        snn_synops=synops,
        e_mac=e_mac,
        e_ac=e_ac,
        t_sim=t_sim,
        estimated_saving=saving,
    )


def snn_predict(model: IdrModel, snn: SpikingNet, x: np.ndarray, t_sim: int) -> np.ndarray:
    """Model prediction with the extractor trunk replaced by the spiking network."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    pooled = simulate(snn, stack_time_inference(x, model.config), t_sim).decoded[-1]
    P = model.constants()
    feature_map = transform_features(P, ad.constant(pooled), model.config)
    pred, _ = forward_from_features(P, feature_map, model.config)
    return np.array(pred.value)

# --- Persistence ---

def save_snn(path, model: IdrModel, snn: SpikingNet, profile: CalibrationProfile, t_sim: int) -> Path:
    arrays = {f"ann.{k}": v for k, v in model.params.items()}
    for i, layer in enumerate(snn.layers):
        arrays[f"snn.{i}.weight"] = layer.weight
        arrays[f"snn.{i}.bias"] = layer.bias
    meta = CheckpointMeta(
        schema_version=settings.SCHEMA_VERSION,
        kind="snn",
        model=model.config,
        extra={
            "percentile": profile.percentile,
            "scales": list(profile.scales),
            "threshold": snn.threshold,
            "t_sim": t_sim,
            "skips": [[layer.skip_from, layer.skip_scale] for layer in snn.layers],
        },
    )
    return checkpoint_store.save(path, arrays, meta)


def load_snn(path) -> Tuple[IdrModel, SpikingNet, int]:
    meta, arrays = checkpoint_store.load(path, kind="snn")
    if meta.model is None:
        raise SchemaError(f"{path}: converted checkpoint carries no model configuration")
    model = IdrModel(meta.model, {k[4:]: v for k, v in arrays.items() if k.startswith("ann.")})
    skips = meta.extra.get("skips", [])
    layers = [
        SpikingLayer(
            weight=arrays[f"snn.{i}.weight"],
            bias=arrays[f"snn.{i}.bias"],
            skip_from=skips[i][0],
            skip_scale=float(skips[i][1]),
        )
        for i in range(len(skips))
    ]
    snn = SpikingNet(
        layers=layers,
        scales=[float(s) for s in meta.extra["scales"]],
        threshold=float(meta.extra.get("threshold", THRESHOLD)),
        head_width=model.params["extractor.head.weight"].shape[1],
    )
    return model, snn, int(meta.extra.get("t_sim", 64))
