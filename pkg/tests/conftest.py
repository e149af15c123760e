import logging
import os
from unittest.mock import patch

import numpy as np
import pytest
import torch

from config.settings import Settings
from src.datamodel import MultiDomainDataset, generate_synthetic_msda
from src.models import ExperimentConfig, SyntheticShiftConfig


# Point every run directory at a temporary folder and pin process settings
@pytest.fixture(autouse=True)
def set_test_env(tmp_path):
    with patch.dict(os.environ, {
        "BORT2_OUTPUT_ROOT": str(tmp_path / "runs"),
        "BORT2_SEED": "",
        "BORT2_LOG_LEVEL": "INFO",
        "BORT2_LOG_DIR": str(tmp_path / "logs"),
        "BORT2_SWEEP_WORKERS": "1",
    }):
        Settings.reload_config()
        yield
    Settings.reload_config()


@pytest.fixture
def small_shift_config():
    return SyntheticShiftConfig(num_classes=3, num_source_domains=2, samples_per_domain=60,
                                feature_dim=2, shift_magnitudes=[0.0, 20.0, 40.0], seed=7)


@pytest.fixture
def small_dataset(small_shift_config) -> MultiDomainDataset:
    return generate_synthetic_msda(small_shift_config)


@pytest.fixture
def tiny_config(tmp_path) -> ExperimentConfig:
    """A config that trains in well under a second"""
    return ExperimentConfig(
        name="tiny",
        output_dir=str(tmp_path / "runs"),
        num_classes=3,
        num_source_domains=2,
        samples_per_domain=48,
        shift_magnitudes=[0.0, 20.0, 40.0],
        hidden_dim=8,
        batch_size=16,
        step1_epochs=2,
        step2_epochs=2,
        warmup_epochs=1,
        phase_trigger="fixed_epochs",
        inner_steps_per_outer=1,
        neumann_terms=3,
    )


@pytest.fixture
def image_dataset() -> MultiDomainDataset:
    rng = np.random.default_rng(0)
    inputs = [rng.random((6, 3, 8, 8)).astype(np.float32) for _ in range(3)]
    labels = [rng.integers(0, 2, 6) for _ in range(2)]
    return MultiDomainDataset(["a", "b", "t"], ["c0", "c1"], inputs, labels, rng.integers(0, 2, 6))


@pytest.fixture(autouse=True)
def fixed_torch_seed():
    torch.manual_seed(0)


# setup_logging installs handlers on the root logger; drop them so each test starts clean
@pytest.fixture(autouse=True)
def reset_root_handlers():
    yield
    root = logging.getLogger()
    for handler in root.handlers[:]:
        if getattr(handler, "_bort2_console", False) or getattr(handler, "_bort2_process_log", False):
            root.removeHandler(handler)
            handler.close()
    root.setLevel(logging.WARNING)
