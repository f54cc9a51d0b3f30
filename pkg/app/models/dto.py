from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

METRIC_NAMES: Tuple[str, ...] = ("chebyshev", "clark", "canberra", "kl", "cosine", "intersection")

# --- Label distributions and datasets ---

class LdlSample(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)
    x: np.ndarray = Field(..., description="Feature vector of length d.")
    y: np.ndarray = Field(..., description="Label distribution of length L.")

    @field_validator("x")
    @classmethod
    def _finite(cls, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ValueError("features must be a finite vector")
        return v


class GroundTruth(BaseModel):
    """Hidden softmax-linear map behind a synthetic dataset."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)
    weight: np.ndarray = Field(..., description="(L, d) map.")
    bias: np.ndarray = Field(..., description="(L,) offsets.")


class LdlDataset(BaseModel):
    """Feature matrix plus label distribution matrix. Immutable after construction."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)
    name: str = "dataset"
    features: np.ndarray = Field(..., description="(N, d) real features.")
    targets: np.ndarray = Field(..., description="(N, L) label distributions.")
    ground_truth: Optional[GroundTruth] = None
    source: Optional[str] = Field(None, description="File path or generator spec.")

    @model_validator(mode="after")
    def _consistent(self) -> "LdlDataset":
        if self.features.ndim != 2 or self.targets.ndim != 2:
            raise ValueError("features and targets must be 2-D")
        if self.features.shape[0] != self.targets.shape[0]:
            raise ValueError("features and targets disagree on sample count")
        if self.targets.shape[1] < 2:
            raise ValueError("a label distribution needs at least 2 labels")
        self.features.setflags(write=False)
        self.targets.setflags(write=False)
        return self

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    @property
    def d(self) -> int:
        return int(self.features.shape[1])

    @property
    def n_labels(self) -> int:
        return int(self.targets.shape[1])

    def sample(self, i: int) -> LdlSample:
        return LdlSample(x=self.features[i], y=self.targets[i])

    def subset(self, idx: np.ndarray, name: Optional[str] = None) -> "LdlDataset":
        return LdlDataset(
            name=name or self.name,
            features=np.array(self.features[idx]),
            targets=np.array(self.targets[idx]),
            ground_truth=self.ground_truth,
            source=self.source,
        )


class DatasetSidecar(BaseModel):
    """Overrides read from `<csv>.cfg`."""
    name: Optional[str] = None
    k: Optional[int] = Field(None, ge=2)
    repeats: Optional[int] = Field(None, ge=1)
    seed: Optional[int] = None
    split_seed: Optional[int] = None


class Split(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)
    repeat: int
    fold: int
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray

# --- Configuration objects ---

class AugmentConfig(BaseModel):
    enabled: bool = Field(True, description="Masked mixup on/off.")
    alpha: float = Field(0.2, gt=0, description="Beta(alpha, alpha) concentration for the mixing weight.")
    keep_prob: float = Field(0.8, gt=0, le=1, description="Density of ones in feature masks.")
    fixed_lambda: Optional[float] = Field(None, ge=0, le=1, description="Pins the mixing weight instead of sampling it.")


class ModelConfig(BaseModel):
    """Shapes and switches of the implicit-distribution network."""
    d_in: int = Field(..., ge=1)
    n_labels: int = Field(..., ge=2)
    hidden: Optional[int] = Field(None, ge=1, description="Extractor width; 64 for small feature spaces, else 1024.")
    n_linear: int = Field(8, ge=1)
    height: int = Field(32, ge=2)
    width: int = Field(32, ge=2)
    time_steps: int = Field(4, ge=1)
    keep_prob: float = Field(0.8, gt=0, le=1, description="Mask density of the pseudo-feature slots.")
    coord_dim: int = Field(64, ge=1)
    gcn_widths: List[int] = Field(default_factory=lambda: [64, 128, 256])
    coordinate_net: Literal["gcn", "mlp"] = "gcn"
    head: Literal["lnf", "softmax"] = "lnf"
    freeze_coords: bool = False
    eval_seed: int = 0

    @model_validator(mode="after")
    def _resolve_hidden(self) -> "ModelConfig":
        if self.hidden is None:
            self.hidden = 64 if self.d_in < 64 else 1024
        return self

    @property
    def token_width(self) -> int:
        return 2 * self.n_labels


class LossWeights(BaseModel):
    lambda_kl: float = Field(0.01, ge=0, description="KL weight of the small-label objective.")
    beta: float = Field(0.1, ge=0, description="Matrix regulariser weight of the small-label objective.")
    lambda1: float = Field(0.01, ge=0, description="KL weight of the large-label objective.")
    lambda2: float = Field(0.01, ge=0, description="Perceptual weight of the large-label objective.")
    beta_large: float = Field(0.08, ge=0, description="Matrix regulariser weight of the large-label objective.")
    label_threshold: int = Field(20, ge=1)
    sigma2: float = Field(0.5, gt=0, description="Variance of the Gaussian prior on matrix rows.")
    matrix_prior: Literal["moments", "sampled"] = "moments"
    eps: float = Field(1e-12, gt=0)


class TrainConfig(BaseModel):
    batch_size: int = Field(64, ge=1)
    epochs: int = Field(50, ge=1)
    learning_rate: float = Field(2e-3, ge=0)
    weight_decay: float = Field(1e-4, ge=0)
    early_stopping: bool = True
    patience: int = Field(10, ge=1)
    min_delta: float = Field(1e-4, ge=0)
    greedy_soup: bool = True
    augmentation: AugmentConfig = Field(default_factory=AugmentConfig)
    seed: int = 0


class DatasetProfile(BaseModel):
    """One benchmark row: dataset shape plus its training configuration."""
    name: str
    examples: int
    features: int
    labels: int
    hidden: int
    augment: bool
    batch_size: int
    epochs: int
    learning_rate: float
    weight_decay: float = 1e-4
    early_stopping: bool = True
    greedy_soup: bool = True

    @property
    def objective(self) -> str:
        return "large_label" if self.labels > 20 else "small_label"

# --- Training records ---

class EpochRecord(BaseModel):
    epoch: int
    train_loss: float
    val_loss: float
    val_kl: float


class GradCheckReport(BaseModel):
    max_rel_error: float
    tol: float
    step: float
    passed: bool
    worst: Optional[str] = Field(None, description="key[index] of the worst coordinate.")
    n_checked: int
    skipped: List[str] = Field(default_factory=list, description="Coordinates excluded because a perturbation crossed a kink.")

# --- Reports ---

class MetricSummary(BaseModel):
    mean: float
    std: float


class MetricsReport(BaseModel):
    schema_version: int
    algorithm: str
    dataset: str
    chebyshev: MetricSummary
    clark: MetricSummary
    canberra: MetricSummary
    kl: MetricSummary
    cosine: MetricSummary
    intersection: MetricSummary
    n_splits: int
    n_samples: int

    def row(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"algorithm": self.algorithm, "dataset": self.dataset}
        for name in METRIC_NAMES:
            summary: MetricSummary = getattr(self, name)
            out[f"{name}_mean"] = summary.mean
            out[f"{name}_std"] = summary.std
        out["n_splits"] = self.n_splits
        out["n_samples"] = self.n_samples
        return out


class CalibrationProfile(BaseModel):
    percentile: float = Field(99.9, gt=0, le=100)
    scales: List[float] = Field(..., description="Per-layer activation scale p_l.")

    @field_validator("scales")
    @classmethod
    def _positive(cls, v: List[float]) -> List[float]:
        if any(not (s > 0) for s in v):
            raise ValueError("every layer scale must be positive")
        return v


class EnergyReport(BaseModel):
    schema_version: int
    ann_macs: int = Field(..., ge=0)
    snn_synops: int = Field(..., ge=0)
    e_mac: float = 4.6
    e_ac: float = 0.9
    t_sim: int
    estimated_saving: float


class CheckpointMeta(BaseModel):
    schema_version: int
    kind: Literal["idr", "snn", "bfgsll"]
    model: Optional[ModelConfig] = None
    epoch: Optional[int] = None
    val_kl: Optional[float] = None
    extra: Dict[str, Any] = Field(default_factory=dict)

# --- Run specification ---

class RunSpec(BaseModel):
    subcommand: str
    data: Optional[str] = Field(None, description="Dataset CSV path.")
    synth: Optional[Tuple[int, int, int]] = Field(None, description="(n, d, L) for an in-memory synthetic dataset.")
    algo: Literal["idr", "bfgsll", "uniform"] = "idr"
    train: TrainConfig = Field(default_factory=TrainConfig)
    weights: LossWeights = Field(default_factory=LossWeights)
    model_overrides: Dict[str, Any] = Field(default_factory=dict)
    output_dir: str
    seed: int = 0
    k: int = Field(5, ge=2)
    repeats: int = Field(10, ge=1)
    jobs: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _one_source(self) -> "RunSpec":
        if self.data is not None and self.synth is not None:
            raise ValueError("pass either a dataset path or a synth spec, not both")
        if self.data is None and self.synth is None:
            raise ValueError("pass a dataset with --data or --synth N D L")
        return self

# --- Error Response Model ---

class ErrorResponse(BaseModel):
    """Standardized error payload."""
    error: str = Field(..., description="A machine-readable error code.")
    detail: str = Field(..., description="A human-readable explanation.")
    context: Optional[Dict[str, Any]] = None

# --- HTTP DTOs ---

class PredictRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    features: List[List[float]] = Field(..., min_length=1, description="One feature row per sample.")


class PredictResponse(BaseModel):
    distributions: List[List[float]]
    labels: int


class EvaluateRequest(PredictRequest):
    targets: List[List[float]] = Field(..., min_length=1)


class EvaluateResponse(BaseModel):
    metrics: Dict[str, float]
    n_samples: int
