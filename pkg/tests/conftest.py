import numpy as np
import pytest

from app.models.dto import AugmentConfig, LossWeights, ModelConfig, TrainConfig
from app.services.dataset_service import synthesize
from app.services.idr_model import IdrModel


def tiny_config(d_in: int = 5, n_labels: int = 3, **overrides) -> ModelConfig:
    """Smallest shape that still exercises every stage of the network."""
    base = dict(
        d_in=d_in,
        n_labels=n_labels,
        hidden=8,
        n_linear=4,
        height=4,
        width=4,
        time_steps=2,
        coord_dim=4,
        gcn_widths=[4, 4, 4],
    )
    base.update(overrides)
    return ModelConfig(**base)


def tiny_model(seed: int = 0, randomize_readout: bool = True, **overrides) -> IdrModel:
    """Initialised tiny model; the zero read-out is replaced by random weights
    so gradients reach every parameter."""
    model = IdrModel.initialize(tiny_config(**overrides), seed)
    if randomize_readout:
        params = dict(model.params)
        rng = np.random.default_rng(seed + 100)
        params["attention.out.weight"] = rng.standard_normal(params["attention.out.weight"].shape)
        model = model.with_params(params)
    return model


def fast_train_config(**overrides) -> TrainConfig:
    base = dict(
        batch_size=32,
        epochs=5,
        learning_rate=5e-3,
        early_stopping=False,
        greedy_soup=False,
        augmentation=AugmentConfig(enabled=False),
        seed=0,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture
def tiny():
    return tiny_model()


@pytest.fixture
def small_dataset():
    return synthesize(64, 5, 3, seed=11)


@pytest.fixture
def weights():
    return LossWeights()


@pytest.fixture
def out_dir(tmp_path):
    path = tmp_path / "runs"
    path.mkdir()
    return path


@pytest.fixture
def make_config():
    return tiny_config


@pytest.fixture
def make_model():
    return tiny_model


@pytest.fixture
def make_train_config():
    return fast_train_config
