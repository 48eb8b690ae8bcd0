import pytest
import torch

from stfoundry import data as D
from stfoundry.backbone import BackboneConfig
from stfoundry.tokenizer import TokenizerConfig


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_world():
    cfg = D.WorldConfig(num_segments=10, num_trajectories=30, num_users=3, seed=7)
    return D.generate_synthetic_world(cfg)


@pytest.fixture(scope="session")
def small_tok_cfg():
    return TokenizerConfig(d_hidden=16, window=3, d_token=32)


@pytest.fixture(scope="session")
def small_bb_cfg():
    return BackboneConfig(layers=2, heads=2, d_model=32, d_ff=64, max_len=256, lora_rank=4)
