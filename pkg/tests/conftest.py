import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from clearsight.ppu import PPUConfig
from clearsight.semprior import SemanticProviderSpec, build_provider


TINY_PPU = PPUConfig(widths=(8, 12, 16, 24, 32), k_s=8, reduction=4)


@pytest.fixture(scope="session", autouse=True)
def _torch_threads():
    torch.set_num_threads(max(1, min(4, torch.get_num_threads())))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_provider_spec():
    return SemanticProviderSpec(provider_id="toy", num_classes=4, channel_count=8)


@pytest.fixture(scope="session")
def tiny_provider(tiny_provider_spec):
    return build_provider(tiny_provider_spec)


@pytest.fixture
def tiny_ppu_config():
    return TINY_PPU
