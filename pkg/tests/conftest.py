from pathlib import Path

import numpy as np
import pytest

from lyric_transfer.lib.encoder import EncoderConfig
from lyric_transfer.lib.lm_utils import LmConfig
from lyric_transfer.lib.model import HeadConfig, ModelConfig
from lyric_transfer.lib.s2s_decoder import DecoderConfig
from lyric_transfer.lib.text_utils import BLANK, BOS, EOS, TokenInventory, default_inventory

FIXTURES = Path(__file__).parent / "fixtures"


def random_log_probs(rng: np.random.Generator, frames: int, vocab: int) -> np.ndarray:
    """Row-normalized log-probabilities (frames, vocab)."""
    logits = rng.normal(size=(frames, vocab))
    return logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def inventory() -> TokenInventory:
    return default_inventory()


@pytest.fixture
def nordic_inventory() -> TokenInventory:
    """The default inventory extended with the letter Ø."""
    base = default_inventory()
    return TokenInventory(symbols=[*base.symbols, "Ø"])


@pytest.fixture
def tiny_inventory() -> TokenInventory:
    """blank, bos, eos and two letters: three ids an autoregressive model can emit."""
    return TokenInventory(symbols=[BLANK, BOS, EOS, "A", "B"], word_boundary=None, quote=None)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


@pytest.fixture
def tiny_encoder_config() -> EncoderConfig:
    return EncoderConfig(input_dim=16, conv_channels=8, num_blocks=1, num_heads=2, model_dim=16, ffn_dim=32)


@pytest.fixture
def tiny_decoder_config() -> DecoderConfig:
    return DecoderConfig(hidden_dim=12, attention_dim=8, embedding_dim=6, location_width=3, location_channels=2)


@pytest.fixture
def tiny_model_config(tiny_encoder_config, tiny_decoder_config) -> ModelConfig:
    return ModelConfig(
        encoder=tiny_encoder_config,
        head=HeadConfig(projection_dim=16, attention=True),
        decoder=tiny_decoder_config,
    )


@pytest.fixture
def tiny_ctc_model_config(tiny_model_config) -> ModelConfig:
    return tiny_model_config.model_copy(update={"head": HeadConfig(projection_dim=16, attention=False)})


@pytest.fixture
def tiny_lm_config() -> LmConfig:
    return LmConfig(embedding_dim=8, num_layers=1, hidden_dim=12, head_layers=1, head_dim=12)
