import numpy as np
import pytest
import torch

import genhance as gh
from genhance.training import TrainConfig, build_train_state


@pytest.fixture(scope="session")
def tiny_ds():
    return gh.generate_shapes(seed=11, count=64, size=32, num_classes=4)

@pytest.fixture(scope="session")
def tiny_val_ds():
    return gh.generate_shapes(seed=11, count=32, size=32, num_classes=4, split="val")


@pytest.fixture(scope="session")
def tiny_tokenizer(tiny_ds):
    cfg = gh.TokenizerConfig(
        vocab_size=64, code_dim=16, hidden=32, epochs=3, batch_size=32, seed=3
    )
    tok, _ = gh.train_tokenizer(tiny_ds, cfg)
    return tok.freeze()


def tiny_train_config(**overrides):
    base = dict(
        objective="revdet",
        epochs=2,
        batch_size=16,
        enhancer_dim=48,
        enhancer_depth=3,
        enhancer_heads=2,
        generator_depth=2,
        share_layers=2,
        seed=5,
        warmup_epochs=0.5,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture()
def tiny_state(tiny_tokenizer, tiny_ds):
    cfg = tiny_train_config()
    return build_train_state(cfg, tiny_tokenizer, len(tiny_ds))


def rng(seed=0):
    return np.random.default_rng(seed)


def torch_gen(seed=0):
    g = torch.Generator()
    g.manual_seed(seed)
    return g
