"""
Assembly of the encoder and the transcription head into one checkpointable model.

The head takes the context representations c of the encoder, optionally projects them with a linear
layer followed by leaky ReLU into features f, and feeds f to

- a CTC linear layer with a softmax over the inventory (bos and eos masked out), and
- optionally the attention decoder of `s2s_decoder`.

Parameters live in one flat dict of named arrays: `encoder.*` for the encoder, `head.*` for the
transcription head and `ssl.*` for the pretraining projection and the frozen codebook.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from lyric_transfer.lib import numerics as nx
from lyric_transfer.lib.config import LOG_FLOOR
from lyric_transfer.lib.ctc_utils import ctc_loss_tensor
from lyric_transfer.lib.encoder import (
    EncoderConfig,
    SpecAugmentPolicy,
    band_keep_mask,
    draw_spec_augment_bands,
    encode_features,
    init_encoder_params,
    output_length,
)
from lyric_transfer.lib.errors import CheckpointMismatchError
from lyric_transfer.lib.numerics import Tensor, architecture_hash, make_rng, uniform_init
from lyric_transfer.lib.s2s_decoder import (
    DecoderConfig,
    DecoderContext,
    init_decoder_params,
    s2s_loss,
)
from lyric_transfer.lib.text_utils import TokenInventory

ENCODER_PREFIX = "encoder."
HEAD_PREFIX = "head."
SSL_PREFIX = "ssl."


class HeadConfig(BaseModel):
    """
    Shape of the transcription head.

    Attributes:
        projection_dim (Optional[int]): Size of the linear + leaky ReLU projection; None feeds c directly.
        attention (bool): Whether the head has the attention decoder (hybrid CTC/attention) or only CTC.
    """
    projection_dim: Optional[int] = Field(64, gt=0)
    attention: bool = Field(True, description="Hybrid CTC/attention head when true, CTC-only otherwise.")


class ModelConfig(BaseModel):
    """Full model shape."""
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    head: HeadConfig = Field(default_factory=HeadConfig)
    decoder: DecoderConfig = Field(default_factory=DecoderConfig)

    def architecture(self) -> dict:
        """Shape description hashed into checkpoint metadata; the decoder counts only when present."""
        arch = {"encoder": self.encoder.model_dump(), "head": self.head.model_dump()}
        if self.head.attention:
            arch["decoder"] = self.decoder.model_dump(exclude={"reduction"})
        return arch


def ctc_output_mask(inventory: TokenInventory) -> np.ndarray:
    """Additive logit mask of the CTC layer: bos and eos are never emitted by CTC."""
    mask = np.zeros(inventory.size)
    mask[[inventory.bos_id, inventory.eos_id]] = LOG_FLOOR
    return mask


def init_head_params(cfg: ModelConfig, vocab_size: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """Draws a fresh transcription head."""
    params: Dict[str, np.ndarray] = {}
    feature_dim = cfg.encoder.model_dim
    if cfg.head.projection_dim is not None:
        params["head.proj.weight"] = uniform_init(rng, (feature_dim, cfg.head.projection_dim), feature_dim)
        params["head.proj.bias"] = np.zeros(cfg.head.projection_dim)
        feature_dim = cfg.head.projection_dim
    params["head.ctc.weight"] = uniform_init(rng, (feature_dim, vocab_size), feature_dim)
    params["head.ctc.bias"] = np.zeros(vocab_size)
    if cfg.head.attention:
        params.update(init_decoder_params(cfg.decoder, feature_dim, vocab_size, rng))
    return params


@dataclass
class UtteranceOutput:
    """Head features f and CTC log-probabilities of one utterance."""
    features: Tensor
    ctc_log_probs: Tensor


@dataclass
class UtteranceLoss:
    """Components of the training loss of one utterance; the s2s part is None for CTC-only heads."""
    ctc: Tensor
    s2s: Optional[Tensor]
    feasible: bool


class TranscriptionModel:
    """
    Encoder plus transcription head with their parameters.

    Args:
        cfg (ModelConfig): Model shape.
        inventory (TokenInventory): Token inventory.
        params (Dict[str, np.ndarray]): Named parameter arrays.
    """

    def __init__(self, cfg: ModelConfig, inventory: TokenInventory, params: Dict[str, np.ndarray]):
        self.cfg = cfg
        self.inventory = inventory
        self.params = params
        self.ctc_mask = ctc_output_mask(inventory)

    @classmethod
    def initialize(cls, cfg: ModelConfig, inventory: TokenInventory, seed: int) -> "TranscriptionModel":
        params = init_encoder_params(cfg.encoder, make_rng(seed, "init", "encoder"))
        params.update(init_head_params(cfg, inventory.size, make_rng(seed, "init", "head")))
        return cls(cfg, inventory, params)

    def with_params(self, params: Dict[str, np.ndarray]) -> "TranscriptionModel":
        return TranscriptionModel(self.cfg, self.inventory, params)

    def with_fresh_head(self, cfg: ModelConfig, seed: int) -> "TranscriptionModel":
        """Keeps the encoder and the ssl parameters, replaces the head by a new one of shape `cfg`."""
        if cfg.encoder != self.cfg.encoder:
            raise CheckpointMismatchError("a fresh head must sit on an encoder of the same shape")
        kept = {k: v for k, v in self.params.items() if not k.startswith(HEAD_PREFIX)}
        kept.update(init_head_params(cfg, self.inventory.size, make_rng(seed, "init", "head")))
        return TranscriptionModel(cfg, self.inventory, kept)

    # Metadata and persistence

    def metadata(self) -> dict:
        arch = self.cfg.architecture()
        return {
            "inventory_hash": self.inventory.fingerprint(),
            "inventory": list(self.inventory.symbols),
            "architecture": arch,
            "architecture_hash": architecture_hash(arch),
            "model_config": self.cfg.model_dump(),
        }

    def save(self, path: Path) -> None:
        nx.save_checkpoint(path, self.params, self.metadata())
        logging.info(f"Model checkpoint saved to {path}")

    @classmethod
    def load(cls, path: Path, inventory: TokenInventory, expected: Optional[ModelConfig] = None) -> "TranscriptionModel":
        """
        Loads a checkpoint, checking its inventory hash and, when `expected` is given, its architecture.

        Raises:
            CheckpointMismatchError: If the inventory or the architecture differs.
        """
        params, meta = nx.load_checkpoint(path)
        if meta.get("inventory_hash") != inventory.fingerprint():
            raise CheckpointMismatchError(f"{path} was trained on another token inventory", key="inventory_hash")
        cfg = ModelConfig.model_validate(meta["model_config"])
        if expected is not None and architecture_hash(expected.architecture()) != meta.get("architecture_hash"):
            raise CheckpointMismatchError(f"{path} has another architecture than the configured model", key="architecture_hash")
        return cls(cfg, inventory, params)

    # Forward pass

    def tensors(self, trainable: bool = False, frozen: Sequence[str] = ()) -> Dict[str, Tensor]:
        return nx.tensors_from(self.params, requires_grad=trainable, frozen=frozen)

    def frames_for(self, length: int) -> int:
        return output_length(length, self.cfg.encoder)

    def forward(
        self,
        params: Dict[str, Tensor],
        x: np.ndarray,
        augment: Optional[SpecAugmentPolicy] = None,
        rng: Optional[np.random.Generator] = None,
    ) -> UtteranceOutput:
        """
        Runs encoder and head on one utterance.

        With `augment` and `rng`, SpecAugment zeroes bands of the input features (features mode) or of the
        latent frames (raw mode).
        """
        time_keep = None
        x = np.asarray(x, dtype=np.float64)
        if augment is not None and rng is not None:
            if self.cfg.encoder.input_mode == "features":
                bands = draw_spec_augment_bands(x.shape[0], x.shape[1], augment, rng)
                x = x * band_keep_mask(x.shape[0], x.shape[1], bands)
            else:
                frames, dim = self.frames_for(x.size), self.cfg.encoder.model_dim
                time_keep = band_keep_mask(frames, dim, draw_spec_augment_bands(frames, dim, augment, rng))
        c = encode_features(x, self.cfg.encoder, params, time_keep=time_keep)
        f = c
        if self.cfg.head.projection_dim is not None:
            f = nx.leaky_relu(nx.linear(c, params["head.proj.weight"], params["head.proj.bias"]))
        logits = nx.linear(f, params["head.ctc.weight"], params["head.ctc.bias"]) + self.ctc_mask
        return UtteranceOutput(f, nx.log_softmax(logits, axis=-1))

    def utterance_loss(
        self,
        params: Dict[str, Tensor],
        x: np.ndarray,
        target: Sequence[int],
        augment: Optional[SpecAugmentPolicy] = None,
        rng: Optional[np.random.Generator] = None,
        s2s_reduction: Optional[str] = None,
        with_s2s: bool = True,
    ) -> UtteranceLoss:
        """
        CTC and (for hybrid heads) teacher-forced sequence losses of one labelled utterance.

        `with_s2s=False` skips the attention branch, whose loss is then None.
        """
        out = self.forward(params, x, augment, rng)
        ctc, feasible = ctc_loss_tensor(out.ctc_log_probs, target, self.inventory.blank_id)
        s2s = None
        if self.cfg.head.attention and with_s2s:
            context = DecoderContext(out.features, params)
            s2s = s2s_loss(context, target, self.cfg.decoder, self.inventory, s2s_reduction)
        return UtteranceLoss(ctc, s2s, feasible)

    def infer(self, x: np.ndarray) -> Tuple[np.ndarray, UtteranceOutput]:
        """Inference pass without gradients: CTC log-probabilities (T, V) and the raw outputs."""
        out = self.forward(self.tensors(trainable=False), x)
        return out.ctc_log_probs.data, out
