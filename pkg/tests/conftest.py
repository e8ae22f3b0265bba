import os

import pytest
import torch

from dmrl import synthdata
from dmrl.config import DataConfig, ModelConfig, TrainConfig

torch.set_num_threads(1)


def tiny_model_cfg() -> ModelConfig:
    return ModelConfig().scaled(8)


def mini_model_cfg() -> ModelConfig:
    """Three-level anatomy U-Net and three-layer modality encoder for 8x8 inputs."""
    return ModelConfig(
        anat_widths=(2, 4, 8), bottleneck_width=8, mod_widths=(4, 8, 8), dec_widths=(8, 4, 4, 2), spade_hidden=2,
    )


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_ds")
    cfg = DataConfig(num_subjects=10, height=32, width=32, generator_seed=3)
    synthdata.build_dataset(cfg, out)
    return out


@pytest.fixture
def tiny_train_cfg(tiny_dataset):
    return TrainConfig(dataset=str(tiny_dataset), epochs=2, batch_subjects=4, eval_every=1,
                       model=tiny_model_cfg(), pool_size=4)


@pytest.fixture
def det_env(monkeypatch):
    monkeypatch.setenv("DMRL_DETERMINISTIC", "1")
    yield
    torch.use_deterministic_algorithms(False)


def pytest_report_header(config):
    return f"DMRL_DETERMINISTIC={os.environ.get('DMRL_DETERMINISTIC', '')} torch={torch.__version__}"


# one line per acceptance criterion, repeated at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
