"""
Toy-scale speech encoder: a convolutional feature extractor followed by a Transformer context network.

### Main Functionalities
1. **Latent extraction**:
   In `raw` input mode a 1-D signal passes through convolution blocks (conv, layer norm, GELU) and a
   projection to the model dimension. In `features` mode a feature matrix is projected directly and
   the convolution stack is bypassed. The result is the latent sequence z (T, D).

2. **Context network**:
   Sinusoidal positions are added to z and pre-norm Transformer blocks (multi-head self-attention and a
   GELU feed-forward layer) produce the context representations c (T, D).

3. **Masking and augmentation**:
   `compute_mask` samples spans of frames for self-supervised pretraining and `apply_mask` replaces
   them with a trainable vector. `spec_augment` zeroes random time and frequency bands.

4. **Feature files**:
   Binary matrices with an int32 (T, F) header followed by row-major float32 values, plus a CSV
   reader for small fixtures.
"""
import csv
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from lyric_transfer.lib import numerics as nx
from lyric_transfer.lib.errors import InputTooShortError, LengthMismatchError
from lyric_transfer.lib.numerics import Tensor, uniform_init


class EncoderConfig(BaseModel):
    """
    Shape of the encoder.

    Attributes:
        input_mode (str): `raw` for 1-D signals through the convolution stack, `features` for feature
            matrices projected directly.
        input_dim (int): Feature dimension in `features` mode (ignored in `raw` mode).
        conv_channels (int): Channels of every convolution block.
        conv_widths (List[int]): Kernel width per convolution block.
        conv_strides (List[int]): Stride per convolution block.
        num_blocks (int): Transformer blocks in the context network.
        num_heads (int): Attention heads per block.
        model_dim (int): Dimension of z and c.
        ffn_dim (int): Hidden size of the feed-forward layers.
    """
    input_mode: Literal["raw", "features"] = Field("features", description="raw signal or feature matrix input")
    input_dim: int = Field(16, gt=0, description="Feature dimension in features mode.")
    conv_channels: int = Field(32, gt=0, description="Channels per convolution block.")
    conv_widths: List[int] = Field(default_factory=lambda: [4, 4], min_length=1, description="Kernel widths.")
    conv_strides: List[int] = Field(default_factory=lambda: [2, 2], min_length=1, description="Strides.")
    num_blocks: int = Field(2, ge=0, description="Transformer blocks.")
    num_heads: int = Field(4, gt=0, description="Attention heads.")
    model_dim: int = Field(64, gt=0, description="Model dimension.")
    ffn_dim: int = Field(128, gt=0, description="Feed-forward hidden size.")

    @model_validator(mode="after")
    def _check_shapes(self) -> "EncoderConfig":
        if len(self.conv_widths) != len(self.conv_strides):
            raise ValueError("conv_widths and conv_strides must have the same length")
        if any(w <= 0 for w in self.conv_widths) or any(s <= 0 for s in self.conv_strides):
            raise ValueError("convolution widths and strides must be positive")
        if self.model_dim % self.num_heads:
            raise ValueError("model_dim must be divisible by num_heads")
        return self

    @property
    def conv_blocks(self) -> int:
        return len(self.conv_widths)

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.conv_strides))


def reference_encoder_config() -> EncoderConfig:
    """Full-scale shape (seven convolution blocks, 12 Transformer blocks). Used for shape checks only."""
    return EncoderConfig(
        input_mode="raw",
        conv_channels=512,
        conv_widths=[10, 3, 3, 3, 3, 2, 2],
        conv_strides=[5, 2, 2, 2, 2, 2, 2],
        num_blocks=12,
        num_heads=16,
        model_dim=1024,
        ffn_dim=4096,
    )


class MaskingPolicy(BaseModel):
    """Span masking used during contrastive pretraining."""
    span: int = Field(4, gt=0, description="Frames per masked span.")
    start_probability: float = Field(0.15, ge=0.0, le=1.0, description="Probability that a frame starts a span.")
    min_spans: int = Field(1, ge=0, description="Spans forced when sampling selects fewer.")


class SpecAugmentPolicy(BaseModel):
    """Time and frequency band masking; no time warping."""
    time_masks: int = Field(2, ge=0)
    time_width: int = Field(10, ge=0, description="Maximum width of a time band, in frames.")
    freq_masks: int = Field(2, ge=0)
    freq_width: int = Field(4, ge=0, description="Maximum width of a frequency band, in bins.")


# Shape arithmetic

def receptive_field(cfg: EncoderConfig) -> int:
    """Number of input samples seen by one output frame (1 in features mode)."""
    if cfg.input_mode == "features":
        return 1
    field_size = 1
    for width, stride in zip(reversed(cfg.conv_widths), reversed(cfg.conv_strides)):
        field_size = (field_size - 1) * stride + width
    return field_size


def output_length(length: int, cfg: EncoderConfig) -> int:
    """Frames produced for an input of `length`: floor((L - w) / s) + 1 composed across blocks."""
    if cfg.input_mode == "features":
        return length
    if length < receptive_field(cfg):
        return 0
    for width, stride in zip(cfg.conv_widths, cfg.conv_strides):
        length = (length - width) // stride + 1
    return length


# Parameters

def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator, prefix: str = "encoder.") -> Dict[str, np.ndarray]:
    """Draws initial encoder parameters."""
    p: Dict[str, np.ndarray] = {}
    d = cfg.model_dim
    if cfg.input_mode == "raw":
        c_in = 1
        for i, width in enumerate(cfg.conv_widths):
            c_out = cfg.conv_channels
            p[f"{prefix}conv.{i}.weight"] = uniform_init(rng, (width, c_in, c_out), width * c_in)
            p[f"{prefix}conv.{i}.bias"] = np.zeros(c_out)
            p[f"{prefix}conv.{i}.norm.gamma"] = np.ones(c_out)
            p[f"{prefix}conv.{i}.norm.beta"] = np.zeros(c_out)
            c_in = c_out
        p[f"{prefix}proj.weight"] = uniform_init(rng, (c_in, d), c_in)
    else:
        p[f"{prefix}proj.weight"] = uniform_init(rng, (cfg.input_dim, d), cfg.input_dim)
    p[f"{prefix}proj.bias"] = np.zeros(d)
    p[f"{prefix}mask_embedding"] = rng.uniform(0.0, 1.0, size=d)
    for b in range(cfg.num_blocks):
        base = f"{prefix}block.{b}."
        for norm in ("ln1", "ln2"):
            p[f"{base}{norm}.gamma"] = np.ones(d)
            p[f"{base}{norm}.beta"] = np.zeros(d)
        for name in ("wq", "wk", "wv", "wo"):
            p[f"{base}attn.{name}"] = uniform_init(rng, (d, d), d)
        p[f"{base}ffn.w1"] = uniform_init(rng, (d, cfg.ffn_dim), d)
        p[f"{base}ffn.b1"] = np.zeros(cfg.ffn_dim)
        p[f"{base}ffn.w2"] = uniform_init(rng, (cfg.ffn_dim, d), cfg.ffn_dim)
        p[f"{base}ffn.b2"] = np.zeros(d)
    p[f"{prefix}final_norm.gamma"] = np.ones(d)
    p[f"{prefix}final_norm.beta"] = np.zeros(d)
    return p


# Forward pass

def sinusoidal_positions(frames: int, dim: int) -> np.ndarray:
    """Absolute sinusoidal position table (T, D)."""
    positions = np.arange(frames)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2) / dim))
    table = np.zeros((frames, dim))
    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates[: dim // 2])
    return table


def extract_latents(x: np.ndarray, cfg: EncoderConfig, params: Dict[str, Tensor], prefix: str = "encoder.") -> Tensor:
    """
    Computes the latent sequence z (T, D) from a raw signal (L,) or a feature matrix (T, F).

    Raises:
        InputTooShortError: If a raw signal is shorter than the receptive field, or a feature matrix
            has no frame.
    """
    x = np.asarray(x, dtype=np.float64)
    if cfg.input_mode == "features":
        if x.ndim != 2 or x.shape[0] == 0:
            raise InputTooShortError(f"feature input must be (T >= 1, F), got shape {x.shape}")
        h: Tensor = nx.as_tensor(x)
    else:
        signal = x.reshape(-1)
        needed = receptive_field(cfg)
        if signal.size < needed:
            raise InputTooShortError(f"signal of {signal.size} samples is shorter than the receptive field {needed}")
        h = nx.as_tensor(signal[:, None])
        for i, stride in enumerate(cfg.conv_strides):
            base = f"{prefix}conv.{i}."
            h = nx.conv1d(h, params[base + "weight"], params[base + "bias"], stride=stride)
            h = nx.layer_norm(h, params[base + "norm.gamma"], params[base + "norm.beta"])
            h = nx.gelu(h)
    return nx.linear(h, params[prefix + "proj.weight"], params[prefix + "proj.bias"])


def _self_attention(x: Tensor, cfg: EncoderConfig, params: Dict[str, Tensor], base: str) -> Tensor:
    q = x @ params[base + "attn.wq"]
    k = x @ params[base + "attn.wk"]
    v = x @ params[base + "attn.wv"]
    head_dim = cfg.model_dim // cfg.num_heads
    scale = 1.0 / math.sqrt(head_dim)
    heads = []
    for h in range(cfg.num_heads):
        cols = slice(h * head_dim, (h + 1) * head_dim)
        scores = (q[:, cols] @ nx.transpose(k[:, cols])) * scale
        heads.append(nx.softmax(scores, axis=-1) @ v[:, cols])
    return nx.concat(heads, axis=1) @ params[base + "attn.wo"]


def context_network(z: Tensor, cfg: EncoderConfig, params: Dict[str, Tensor], prefix: str = "encoder.") -> Tensor:
    """Transformer context network: c = blocks(z + positions)."""
    x = z + sinusoidal_positions(z.shape[0], cfg.model_dim)
    for b in range(cfg.num_blocks):
        base = f"{prefix}block.{b}."
        normed = nx.layer_norm(x, params[base + "ln1.gamma"], params[base + "ln1.beta"])
        x = x + _self_attention(normed, cfg, params, base)
        normed = nx.layer_norm(x, params[base + "ln2.gamma"], params[base + "ln2.beta"])
        hidden = nx.gelu(nx.linear(normed, params[base + "ffn.w1"], params[base + "ffn.b1"]))
        x = x + nx.linear(hidden, params[base + "ffn.w2"], params[base + "ffn.b2"])
    return nx.layer_norm(x, params[prefix + "final_norm.gamma"], params[prefix + "final_norm.beta"])


def encode_features(
    x: np.ndarray,
    cfg: EncoderConfig,
    params: Dict[str, Tensor],
    mask: Optional["FrameMask"] = None,
    time_keep: Optional[np.ndarray] = None,
    prefix: str = "encoder.",
) -> Tensor:
    """
    Encodes one utterance into context representations c (T, D).

    Args:
        x (np.ndarray): Raw signal (L,) or feature matrix (T, F).
        cfg (EncoderConfig): Encoder shape.
        params (Dict[str, Tensor]): Encoder parameters.
        mask (Optional[FrameMask]): Frames of z to replace with the mask embedding.
        time_keep (Optional[np.ndarray]): 0/1 array of shape (T, D) multiplied into z (augmentation of
            raw-mode latents).
        prefix (str): Parameter name prefix.

    Returns:
        Tensor: Context representations (T, D).
    """
    z = extract_latents(x, cfg, params, prefix)
    if time_keep is not None:
        z = z * time_keep
    if mask is not None:
        z = apply_mask(z, mask, params[prefix + "mask_embedding"])
    return context_network(z, cfg, params, prefix)


# Masking

@dataclass(frozen=True)
class FrameMask:
    """
    Frames selected for masking.

    Attributes:
        mask (np.ndarray): Boolean per frame.
        starts (Tuple[int, ...]): First frame of every span.
        span (int): Span length.
    """
    mask: np.ndarray
    starts: Tuple[int, ...]
    span: int

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    @classmethod
    def empty(cls, frames: int, span: int = 1) -> "FrameMask":
        return cls(np.zeros(frames, dtype=bool), (), span)


def compute_mask(frames: int, policy: MaskingPolicy, rng: np.random.Generator) -> FrameMask:
    """
    Samples masked spans for a sequence of `frames`.

    Every frame that can start a full-length span does so with `policy.start_probability`; overlapping
    spans merge. At least `policy.min_spans` spans are drawn. Spans are removed from the end when the
    union would cover every frame, so at least one frame always stays visible.
    """
    span = min(policy.span, frames - 1)
    if span <= 0:
        return FrameMask.empty(frames, max(span, 1))
    candidates = frames - span + 1
    starts = list(np.flatnonzero(rng.random(candidates) < policy.start_probability))
    if len(starts) < policy.min_spans:
        extra = rng.choice(candidates, size=min(policy.min_spans, candidates), replace=False)
        starts = sorted(set(starts) | set(int(s) for s in extra))
    while starts:
        mask = np.zeros(frames, dtype=bool)
        for s in starts:
            mask[s:s + span] = True
        if not mask.all():
            return FrameMask(mask, tuple(int(s) for s in starts), span)
        starts = starts[:-1]
    return FrameMask.empty(frames, span)


def apply_mask(z, mask: FrameMask, mask_embedding) -> Tensor:
    """
    Replaces the masked rows of z with the mask embedding; unmasked rows are returned unchanged.

    Raises:
        LengthMismatchError: If the mask length differs from the number of frames.
    """
    z = nx.as_tensor(z)
    if mask.mask.shape != (z.shape[0],):
        raise LengthMismatchError(f"mask of {mask.mask.shape[0]} frames for {z.shape[0]} latent frames")
    return nx.where_rows(z, mask.mask, mask_embedding)


# SpecAugment

def draw_spec_augment_bands(
    frames: int, bins: int, policy: SpecAugmentPolicy, rng: np.random.Generator
) -> List[Tuple[str, int, int]]:
    """
    Draws `(axis, start, width)` bands, axis being `time` or `freq`.

    Widths are uniform in [0, max width]. A band that would leave no unmasked frame (or bin) is skipped.
    """
    bands: List[Tuple[str, int, int]] = []
    for axis, count, max_width, extent in (
        ("time", policy.time_masks, policy.time_width, frames),
        ("freq", policy.freq_masks, policy.freq_width, bins),
    ):
        covered = np.zeros(extent, dtype=bool)
        for _ in range(count):
            width = int(rng.integers(0, max_width + 1))
            start = int(rng.integers(0, max(extent - width, 0) + 1))
            trial = covered.copy()
            trial[start:start + width] = True
            if width == 0 or trial.all():
                continue
            covered = trial
            bands.append((axis, start, width))
    return bands


def band_keep_mask(frames: int, bins: int, bands: List[Tuple[str, int, int]]) -> np.ndarray:
    """0/1 array (frames, bins) with zeros inside the bands."""
    keep = np.ones((frames, bins))
    for axis, start, width in bands:
        if axis == "time":
            keep[start:start + width, :] = 0.0
        else:
            keep[:, start:start + width] = 0.0
    return keep


def spec_augment(features: np.ndarray, policy: SpecAugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Zeroes random time and frequency bands of a (T, F) matrix; the shape is preserved."""
    features = np.asarray(features, dtype=np.float64)
    bands = draw_spec_augment_bands(features.shape[0], features.shape[1], policy, rng)
    return features * band_keep_mask(features.shape[0], features.shape[1], bands)


# Feature files

_FEATURE_HEADER = struct.Struct("<ii")


def write_feature_file(path: Path, matrix: np.ndarray) -> None:
    """Writes a (T, F) matrix: int32 T and F, then row-major little-endian float32 values."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise LengthMismatchError(f"feature matrix must be 2-D, got shape {matrix.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_FEATURE_HEADER.pack(*matrix.shape))
        f.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def read_feature_file(path: Path) -> np.ndarray:
    """Reads a matrix written by `write_feature_file` as float64."""
    raw = Path(path).read_bytes()
    frames, bins = _FEATURE_HEADER.unpack_from(raw, 0)
    values = np.frombuffer(raw, dtype="<f4", offset=_FEATURE_HEADER.size)
    if values.size != frames * bins:
        raise LengthMismatchError(f"{path}: header announces {frames}x{bins} values, found {values.size}")
    return values.reshape(frames, bins).astype(np.float64)


def read_feature_csv(path: Path) -> np.ndarray:
    """Reads a small comma-separated matrix, one frame per row."""
    with open(path, newline="", encoding="utf-8") as f:
        rows = [[float(v) for v in row] for row in csv.reader(f) if row]
    logging.debug(f"Read {len(rows)} feature rows from {path}")
    return np.asarray(rows, dtype=np.float64)


def load_features(path: Path) -> np.ndarray:
    """Reads a feature matrix from the binary format or, for `.csv` files, from CSV."""
    path = Path(path)
    return read_feature_csv(path) if path.suffix.lower() == ".csv" else read_feature_file(path)
