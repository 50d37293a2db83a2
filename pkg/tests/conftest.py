import numpy as np
import pytest
import torch

from mvlm.model import ModelConfig, build_model


@pytest.fixture(autouse=True)
def _single_thread():
    # Bit-exact comparisons assume a fixed reduction order.
    n = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(n)


def tiny_config(**kw):
    base = dict(image_size=16, patch_size=8, h_img=8, num_query_tokens=4, h_q=8, h_v=8, h_l=8,
                n_heads=2, n_layers_vit=1, n_layers_qformer=1, n_layers_lm=1)
    base.update(kw)
    return ModelConfig(**base)


def random_image(size, seed=0):
    return np.random.default_rng(seed).random((size, size, 3)).astype(np.float32)


@pytest.fixture
def model():
    return build_model(ModelConfig(), seed=0)
