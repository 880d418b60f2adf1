from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
import torch

from crobo.model import ModelConfig, build_model
from crobo.seeding import derive_seed
from crobo.synthvideo import ClipConfig, generate_clip, write_dataset

torch.set_num_threads(1)


def rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


@pytest.fixture(scope="session")
def tiny_clip_cfg() -> ClipConfig:
    return ClipConfig(frame_size=64, n_frames=8)


@pytest.fixture(scope="session")
def tiny_clips(tiny_clip_cfg):
    return [generate_clip(derive_seed(99, "clip", i), tiny_clip_cfg) for i in range(5)]


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory, tiny_clips) -> Path:
    out = tmp_path_factory.mktemp("tinydata")
    write_dataset(tiny_clips, out)
    return out


@pytest.fixture(scope="session")
def desk_model():
    return build_model(ModelConfig(seed=7))


@pytest.fixture()
def micro_model_double():
    return build_model(ModelConfig.micro(seed=5)).double()
