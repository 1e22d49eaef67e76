from pathlib import Path

import numpy as np
import pytest

from core.config import RunConfig
from core.services.checkpoint_service import CheckpointService
from core.services.dataset_service import DatasetService
from core.services.training_service import TrainingService

# Small enough to train in seconds: two bit-widths, one stage, one seen and one unseen patch.
TINY_CONFIG = """\
[run]
seed = 3
mode = triqdef
bits = 32,2
epochs = 2
batch_size = 8

[data]
dataset = synthetic-shapes
train_size = 16
eval_size = 8
num_classes = 4
image_size = 32
calibration_samples = 8

[attack]
iterations = 2
craft_samples = 4
train_sizes = 5
train_locations = 2:2
train_source_bits = 32
unseen_sizes = 6
unseen_locations = 20:20
unseen_source_bits = 2

[eval]
samples = 8
align_samples = 4

[sweep]
alpha_beta = 1:1
lambdas = 0.5:0.8
epochs = 2
"""


def write_config(directory: Path, text: str = TINY_CONFIG, name: str = "tiny.cfg") -> Path:
    path = Path(directory) / name
    path.write_text(text, encoding="utf-8")
    return path


def load_split(cfg: RunConfig):
    data = cfg.data
    return DatasetService().load_dataset(
        data["dataset"], cfg.seed, data["train_size"], data["eval_size"], data["num_classes"], data["image_size"],
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_config_path(tmp_path):
    return write_config(tmp_path)


@pytest.fixture
def tiny_cfg(tiny_config_path):
    return RunConfig(str(tiny_config_path))


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory):
    """One tiny triqdef run shared by the evaluation, report and CLI tests."""
    root = tmp_path_factory.mktemp("trained")
    cfg_path = write_config(root)
    cfg = RunConfig(str(cfg_path))
    train, held = load_split(cfg)
    result = TrainingService(cfg, progress=False).train(train, root / "run")
    ckpt_path = CheckpointService().save(result.checkpoint, root / "run" / "checkpoint.tqc")
    return {
        "cfg": cfg,
        "cfg_path": cfg_path,
        "result": result,
        "train": train,
        "held": held,
        "ckpt_path": ckpt_path,
        "root": root,
    }
