import numpy as np
import pytest
import torch

from deepwavenet.losses import VGGFeatureExtractor
from deepwavenet.model import ModelConfig
from deepwavenet.synthetic import write_paired_dataset


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def tiny_config():
    return ModelConfig(branch_width=4, cbam_reduction=2, seed=3)


@pytest.fixture(scope="session")
def extractor():
    return VGGFeatureExtractor.untrained(seed=0)


@pytest.fixture(scope="session")
def extractor_file(tmp_path_factory, extractor):
    path = tmp_path_factory.mktemp("vgg") / "vgg_relu2_2.pth"
    extractor.save(path)
    return str(path)


@pytest.fixture(scope="session")
def paired_dirs(tmp_path_factory):
    root = tmp_path_factory.mktemp("pairs")
    return write_paired_dataset(root, n=6, height=16, width=16, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
