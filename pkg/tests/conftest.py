import numpy as np
import pytest

from pathkernel.config import (
    DatasetConfig,
    EPKConfig,
    ExperimentConfig,
    ModelSpec,
    OptimizerConfig,
    RunConfig,
    ScheduleConfig,
)
from pathkernel.datasets import build_dataset
from pathkernel.trajectory import TrajectoryRecorder, train


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale run, skipped unless --runslow is given")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="desk-scale run, use --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


# ============================================================================
# CONFIGS
# ============================================================================

def tiny_transformer_config(output_dir: str = "runs", **optimizer) -> RunConfig:
    """Mod-5 transformer small enough for finite differences and full EPK sweeps"""
    settings = dict(
        kind="adamw",
        schedule=ScheduleConfig(kind="constant", peak=0.01),
        beta1=0.9, beta2=0.98, eps=1e-8, weight_decay=0.5,
        steps=4, seed=0,
    )
    settings.update(optimizer)
    return RunConfig(
        name="tiny",
        model=ModelSpec(kind="modadd_transformer", p=5, d_model=4, n_heads=2, d_head=2, d_mlp=8),
        optimizer=OptimizerConfig(**settings),
        dataset=DatasetConfig(kind="modadd", p=5, train_fraction=0.6, include_diagonal=True, seed=0),
        epk=EPKConfig(T=2, T_values=[1, 2], window_size=2),
        experiments=ExperimentConfig(
            prune_fractions=[0.5],
            prune_seeds=[0, 1],
            swap_steps=[2],
            reinit_source_steps=[4],
            reinit_seeds=[0, 1],
            reinit_steps=2,
            lasso_freq_min=2,
            lasso_freq_max=5,
        ),
        output_dir=output_dir,
    )


def blob_config(model_kind: str = "linear", **optimizer) -> RunConfig:
    """Linear or MLP classifier on a small blob dataset"""
    settings = dict(
        kind="adamw",
        schedule=ScheduleConfig(kind="constant", peak=0.05),
        beta1=0.9, beta2=0.99, eps=1e-8, weight_decay=0.1,
        steps=6, batch_size=4, seed=3,
    )
    settings.update(optimizer)
    return RunConfig(
        name=f"{model_kind}_blobs",
        model=ModelSpec(kind=model_kind, input_dim=3, hidden_dims=[5], output_dim=2),
        optimizer=OptimizerConfig(**settings),
        dataset=DatasetConfig(kind="blobs", n_samples=20, train_fraction=0.5, seed=1),
        epk=EPKConfig(T=1, T_values=[1]),
        experiments=ExperimentConfig(swap_sets=[], reinit_donors=[]),
    )


def train_log(config: RunConfig):
    train_samples, test_samples = build_dataset(config.dataset, config.model)
    result = train(config, train_samples, test_samples, recorder=TrajectoryRecorder(), progress=False)
    return result.log


# ============================================================================
# FIXTURES
# ============================================================================

@pytest.fixture(scope="session")
def tiny_config():
    return tiny_transformer_config()


@pytest.fixture(scope="session")
def tiny_log(tiny_config):
    return train_log(tiny_config)


@pytest.fixture(scope="session")
def linear_adamw_log():
    return train_log(blob_config("linear"))


@pytest.fixture(scope="session")
def linear_momentum_log():
    return train_log(blob_config(
        "linear", kind="sgd_momentum", momentum=0.8, weight_decay=0.05,
        schedule=ScheduleConfig(kind="linear_warmup_peak_decay", peak=0.1, peak_step=2),
    ))


@pytest.fixture(scope="session")
def mlp_log():
    return train_log(blob_config("mlp", kind="sgd_momentum", momentum=0.9, weight_decay=0.01))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
