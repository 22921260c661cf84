import numpy as np
import pytest
import torch

from jetflow.config import RunConfig
from jetflow.data import SynthShapesSpec, synth_shapes


def tiny_config(**overrides) -> RunConfig:
    """Smallest config that still exercises every module; trains at ~20 steps/s."""
    base = dict(image_size=8, patch_size=4, flow_depth=2, flow_width=16, flow_block_depth=1, flow_heads=2,
                width=32, depth=2, heads=2, kv_heads=1, num_mixtures=4, factor_mode="post_flow",
                factor_dim=8, batch_size=8, steps=20, sigma0=8.0, checkpoint_every=0, dropout=0.1)
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture(scope="session")
def shapes8():
    return synth_shapes(SynthShapesSpec(count=64, size=8, seed=3))


@pytest.fixture(scope="session")
def captions8():
    return synth_shapes(SynthShapesSpec(count=64, size=8, seed=4, captions=True))


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)
