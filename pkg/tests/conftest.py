"""
Shared fixtures: a tiny architecture that builds and trains in milliseconds.
"""

import numpy as np
import pytest

from neuralinterp.config import (
    ExperimentConfig,
    ModelConfig,
    OptimizerConfig,
    OutputConfig,
    TaskConfig,
    TrainingConfig,
)
from neuralinterp.models import PositionalMode


def tiny_model_config(**overrides) -> ModelConfig:
    """Two inputs, two CLS tokens, d=8, one script with two functions."""
    values = dict(
        n_inputs=2,
        dim=8,
        code_dim=8,
        type_dim=4,
        head_dim=4,
        n_heads=1,
        n_scripts=1,
        n_iterations=2,
        n_locs=1,
        n_functions=2,
        n_cls=2,
        tau=1.99,
        positional_mode=PositionalMode.LEARNED_1D,
    )
    values.update(overrides)
    return ModelConfig(**values)


def tiny_experiment_config(directory: str, **training) -> ExperimentConfig:
    """Five fuzzy variables, three pretraining and two adaptation tasks."""
    return ExperimentConfig(
        model=tiny_model_config(n_inputs=5, n_cls=3, n_functions=3, n_iterations=1),
        task=TaskConfig(
            n_vars=5, n_pretrain_tasks=3, n_adapt_tasks=2, num_samples=160, seed=0
        ),
        optimizer=OptimizerConfig(lr=0.01, finetune_lr=0.05),
        training=TrainingConfig(
            batch_size=32,
            pretrain_epochs=training.get("pretrain_epochs", 2),
            finetune_epochs=training.get("finetune_epochs", 1),
            seed=training.get("seed", 0),
        ),
        output=OutputConfig(directory=directory),
    )


@pytest.fixture
def tiny_config() -> ModelConfig:
    return tiny_model_config()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def experiment_config(tmp_path) -> ExperimentConfig:
    return tiny_experiment_config(str(tmp_path / "run"))
