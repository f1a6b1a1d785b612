"""
Attention branch of the transcription head: a single-layer GRU decoder with location-aware attention.

At step n the attention energies are

    e_t = g . tanh(W_enc f_t + b + W_loc (F * a_{n-1})_t + W_dec s_{n-1}) + g_b

where F * a_{n-1} is a 1-D convolution over the previous attention weights. The weights
a_n = softmax(scaling * e) select the context vector ctx_n = sum_t a_{n,t} f_t, the GRU consumes
[embedding(w_{n-1}); ctx_n], and a linear layer gives the next-token log-probabilities.

The output distribution covers every label plus eos; blank and bos receive `LOG_FLOOR` logits.
The first step is fed bos, the hidden state starts at zero and the attention weights start uniform
over the valid frames.
"""
from dataclasses import dataclass
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator

from lyric_transfer.lib import numerics as nx
from lyric_transfer.lib.config import LOG_FLOOR
from lyric_transfer.lib.errors import EmptyTargetError, StateMismatchError
from lyric_transfer.lib.numerics import Tensor, uniform_init
from lyric_transfer.lib.text_utils import TokenInventory

PREFIX = "head.dec."


class DecoderConfig(BaseModel):
    """Sizes of the attention decoder."""
    hidden_dim: int = Field(64, gt=0, description="GRU hidden size.")
    attention_dim: int = Field(32, gt=0, description="Attention projection size.")
    embedding_dim: int = Field(32, gt=0, description="Previous-token embedding size.")
    location_width: int = Field(11, gt=0, description="Width of the convolution over previous weights (odd).")
    location_channels: int = Field(8, gt=0, description="Channels of that convolution.")
    attention_scaling: float = Field(2.0, gt=0.0, description="Energy scaling before the softmax.")
    reduction: Literal["sum", "mean"] = Field("sum", description="How the loss combines the steps of an utterance.")

    @field_validator("location_width")
    @classmethod
    def _odd_width(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError("location_width must be odd so the convolution keeps the frame count")
        return value


def reference_decoder_config() -> DecoderConfig:
    """Full-scale decoder sizes (hidden 1024, attention 256); shape checks only."""
    return DecoderConfig(hidden_dim=1024, attention_dim=256, embedding_dim=256)


def output_mask(inventory: TokenInventory) -> np.ndarray:
    """Additive logit mask: 0 on emittable tokens, `LOG_FLOOR` on blank and bos."""
    mask = np.zeros(inventory.size)
    mask[[inventory.blank_id, inventory.bos_id]] = LOG_FLOOR
    return mask


def init_decoder_params(
    cfg: DecoderConfig, feature_dim: int, vocab_size: int, rng: np.random.Generator, prefix: str = PREFIX
) -> Dict[str, np.ndarray]:
    """Draws initial decoder parameters for encoder features of size `feature_dim`."""
    h, a, e, d = cfg.hidden_dim, cfg.attention_dim, cfg.embedding_dim, feature_dim
    return {
        f"{prefix}embed": uniform_init(rng, (vocab_size, e), e),
        f"{prefix}att.w_enc": uniform_init(rng, (d, a), d),
        f"{prefix}att.b_enc": np.zeros(a),
        f"{prefix}att.w_dec": uniform_init(rng, (h, a), h),
        f"{prefix}att.loc_conv": uniform_init(rng, (cfg.location_width, 1, cfg.location_channels), cfg.location_width),
        f"{prefix}att.w_loc": uniform_init(rng, (cfg.location_channels, a), cfg.location_channels),
        f"{prefix}att.g": uniform_init(rng, (a,), a),
        f"{prefix}att.g_bias": np.zeros(()),
        f"{prefix}gru.w_ih": uniform_init(rng, (e + d, 3 * h), h),
        f"{prefix}gru.w_hh": uniform_init(rng, (h, 3 * h), h),
        f"{prefix}gru.b_ih": np.zeros(3 * h),
        f"{prefix}gru.b_hh": np.zeros(3 * h),
        f"{prefix}out.weight": uniform_init(rng, (h, vocab_size), h),
        f"{prefix}out.bias": np.zeros(vocab_size),
    }


@dataclass(frozen=True)
class AttentionState:
    """
    Decoder state between steps. Immutable, so beam branches can share it.

    Attributes:
        weights (Tensor): Previous attention weights (T,), summing to one.
        hidden (Tensor): GRU hidden state (H,).
        step (int): Number of steps taken.
    """
    weights: Tensor
    hidden: Tensor
    step: int = 0


class DecoderContext:
    """
    Per-utterance quantities shared by every decoding step.

    Args:
        features: Encoder features f (T, D).
        params (Dict[str, Tensor]): Decoder parameters.
        valid (Optional[np.ndarray]): Boolean (T,) marking real frames; padded frames are excluded from
            attention.
        prefix (str): Parameter name prefix.
    """

    def __init__(self, features, params: Dict[str, Tensor], valid: Optional[np.ndarray] = None, prefix: str = PREFIX):
        self.features = nx.as_tensor(features)
        self.params = params
        self.prefix = prefix
        frames = self.features.shape[0]
        self.valid = np.ones(frames, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
        if self.valid.shape != (frames,) or not self.valid.any():
            raise StateMismatchError(f"frame mask of shape {self.valid.shape} for {frames} frames")
        self.energy_mask = np.where(self.valid, 0.0, LOG_FLOOR)
        self.encoded = nx.linear(self.features, params[prefix + "att.w_enc"], params[prefix + "att.b_enc"])

    @property
    def frames(self) -> int:
        return self.features.shape[0]

    def p(self, name: str) -> Tensor:
        return self.params[self.prefix + name]


def initial_state(context: DecoderContext, cfg: DecoderConfig) -> AttentionState:
    """Zero hidden state and uniform attention over the valid frames."""
    weights = context.valid / context.valid.sum()
    return AttentionState(nx.Tensor(weights), nx.Tensor(np.zeros(cfg.hidden_dim)), 0)


def attention_weights(
    context: DecoderContext, state: AttentionState, cfg: DecoderConfig, use_location: bool = True
) -> Tensor:
    """
    Attention weights for the next step. With `use_location=False` the location term is left out,
    which gives plain content-based attention.
    """
    energy_in = context.encoded + state.hidden @ context.p("att.w_dec")
    if use_location:
        pad = (cfg.location_width - 1) // 2
        previous = nx.reshape(state.weights, (context.frames, 1))
        location = nx.conv1d(previous, context.p("att.loc_conv"), padding=pad)
        energy_in = energy_in + location @ context.p("att.w_loc")
    energy = nx.tanh(energy_in) @ context.p("att.g") + context.p("att.g_bias")
    return nx.softmax(energy * cfg.attention_scaling + context.energy_mask, axis=-1)


def decoder_step(
    context: DecoderContext,
    prev_token: int,
    state: AttentionState,
    cfg: DecoderConfig,
    mask: np.ndarray,
    use_location: bool = True,
) -> Tuple[Tensor, AttentionState]:
    """
    Runs one decoding step.

    Args:
        context (DecoderContext): Encoder features and parameters of the utterance.
        prev_token (int): Token emitted at the previous step (bos at the first step).
        state (AttentionState): State after the previous step.
        cfg (DecoderConfig): Decoder sizes.
        mask (np.ndarray): Additive output mask from `output_mask`.
        use_location (bool): Include the location-aware term.

    Returns:
        Tuple[Tensor, AttentionState]: Log-probabilities over the inventory (V,) and the new state.

    Raises:
        StateMismatchError: If the state was built for another utterance length or hidden size.
    """
    if state.weights.shape != (context.frames,) or state.hidden.shape != (cfg.hidden_dim,):
        raise StateMismatchError(
            f"state with {state.weights.shape} weights and {state.hidden.shape} hidden for "
            f"{context.frames} frames and hidden size {cfg.hidden_dim}"
        )
    weights = attention_weights(context, state, cfg, use_location)
    attended = weights @ context.features
    embedded = context.p("embed")[int(prev_token)]
    hidden = nx.gru_cell(
        nx.concat([embedded, attended], axis=0),
        state.hidden,
        context.p("gru.w_ih"), context.p("gru.w_hh"), context.p("gru.b_ih"), context.p("gru.b_hh"),
    )
    logits = nx.linear(hidden, context.p("out.weight"), context.p("out.bias")) + mask
    return nx.log_softmax(logits), AttentionState(weights, hidden, state.step + 1)


def teacher_forced_targets(target: Sequence[int], inventory: TokenInventory) -> List[int]:
    """Appends eos unless the target already ends with it."""
    target = [int(t) for t in target]
    if not target or target[-1] != inventory.eos_id:
        target.append(inventory.eos_id)
    return target


def s2s_loss(
    context: DecoderContext,
    target: Sequence[int],
    cfg: DecoderConfig,
    inventory: TokenInventory,
    reduction: Optional[str] = None,
) -> Tensor:
    """
    Teacher-forced sequence loss -sum_n log p(w_n | w_<n, f), eos included.

    Args:
        context (DecoderContext): Encoder features and parameters.
        target (Sequence[int]): Label ids, with or without a trailing eos.
        cfg (DecoderConfig): Decoder sizes.
        inventory (TokenInventory): Token inventory.
        reduction (Optional[str]): `sum` or `mean` over steps; defaults to `cfg.reduction`.

    Raises:
        EmptyTargetError: If `target` is empty.
    """
    if len(target) == 0:
        raise EmptyTargetError("the sequence loss needs a nonempty target")
    steps = teacher_forced_targets(target, inventory)
    mask = output_mask(inventory)
    state = initial_state(context, cfg)
    prev = inventory.bos_id
    picked = []
    for token in steps:
        logp, state = decoder_step(context, prev, state, cfg, mask)
        picked.append(logp[token])
        prev = token
    total = -nx.sum(nx.concat([nx.reshape(p, (1,)) for p in picked], axis=0))
    if (reduction or cfg.reduction) == "mean":
        return total * (1.0 / len(steps))
    return total


def sequence_log_probability(
    context: DecoderContext, tokens: Sequence[int], cfg: DecoderConfig, inventory: TokenInventory
) -> float:
    """log p(tokens | f) by step-by-step accumulation; `tokens` is scored as given (append eos yourself)."""
    mask = output_mask(inventory)
    state = initial_state(context, cfg)
    prev, total = inventory.bos_id, 0.0
    for token in tokens:
        logp, state = decoder_step(context, prev, state, cfg, mask)
        total += float(logp.data[int(token)])
        prev = int(token)
    return total
