import numpy as np
import pytest
import torch

from attrfuse.config import desk_config
from attrfuse.data import FixtureConfig, synthetic_samples

torch.set_default_dtype(torch.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    return desk_config(d_v=6, d_e=6, d_t=6, d=8, d_h=6, d_a=4, d_b=4, heads=2,
                       g_att_layers=1, batch_size=4)


@pytest.fixture
def small_samples(small_cfg):
    return synthetic_samples(FixtureConfig(
        n_samples=4, M=3, L=4, d_v=6, d_e=6, d_t=6, n_t=3, n_p=2, n_c=2, vocab_size=4,
        attribute_words=0, seed=3))


def set_identity(linear: torch.nn.Linear) -> None:
    with torch.no_grad():
        linear.weight.copy_(torch.eye(linear.out_features, linear.in_features))
        if linear.bias is not None:
            linear.bias.zero_()
