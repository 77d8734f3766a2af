"""Shared pytest fixtures for testing."""

import tempfile
from pathlib import Path
from typing import Generator, Iterator

import numpy as np
import pytest
import torch

from pianotune.config import ModelConfig, TokenizerConfig
from pianotune.tokenizer import Vocab, build_vocab
from pianotune.transformer import CausalTransformer, init_model
from tests.test_support.mock_scorer import RunningMockScorer, start_mock_scorer


@pytest.fixture
def temp_dir() -> Generator[Path, None, None]:
    """Create a temporary directory for outputs.

    Yields:
        Path to the temporary directory
    """
    with tempfile.TemporaryDirectory() as tmpdir:
        yield Path(tmpdir)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def vocab() -> Vocab:
    return build_vocab(TokenizerConfig())


@pytest.fixture
def tiny_config(vocab: Vocab) -> ModelConfig:
    """A 2-layer model small enough for finite differences and quick tuning runs."""
    return ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, vocab_size=len(vocab), max_seq_len=64, seed=7)


@pytest.fixture
def tiny_model(tiny_config: ModelConfig) -> CausalTransformer:
    return init_model(tiny_config)


@pytest.fixture
def tiny_model_f64(tiny_config: ModelConfig) -> CausalTransformer:
    return init_model(tiny_config, dtype=torch.float64)


@pytest.fixture
def mock_scorer() -> Iterator[RunningMockScorer]:
    """The reference scoring server listening on a random local port."""
    running = start_mock_scorer()
    try:
        yield running
    finally:
        running.stop()
