"""Shared fixtures."""

from __future__ import annotations

import pytest

from gteforge.encoder import EncoderConfig, EncoderModel, build_vocab
from gteforge.synthetic import ParaphraseWorld, write_toy_suite


@pytest.fixture
def tiny_config():
    return EncoderConfig(vocab_size=40, embed_dim=8, num_layers=1, num_heads=2, ffn_dim=12, max_seq_len=10)


@pytest.fixture
def tiny_model(tiny_config):
    return EncoderModel.init(tiny_config, seed=3)


@pytest.fixture(scope="session")
def world():
    return ParaphraseWorld(seed=0)


@pytest.fixture(scope="session")
def world_vocab(world):
    return build_vocab(world.all_texts(), len(set(world.all_texts())) + 3)


@pytest.fixture
def toy_suite(tmp_path):
    """A written toy suite with short training budgets; returns the config path."""
    return write_toy_suite(tmp_path / "toy", seed=0, pretrain_steps=10, finetune_steps=6)
