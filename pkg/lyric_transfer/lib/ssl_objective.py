"""
Contrastive pretraining objective over masked frames.

The context vector c_t of every masked frame must pick its quantized target q_t among a candidate set
made of distractors (targets of other masked frames of the same utterance) and q_t itself:

    loss_t = -log( exp(cos(c_t, q_t) / k) / sum_{q in Q_t} exp(cos(c_t, q) / k) )

Targets come from a fixed codebook: each latent frame (gradient stopped) is replaced by its nearest
codeword under cosine similarity. The codebook is initialised by cosine k-means on a warmup batch and
stays frozen.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from lyric_transfer.lib import numerics as nx
from lyric_transfer.lib.config import CONTRASTIVE_TEMPERATURE, DISTRACTOR_COUNT
from lyric_transfer.lib.encoder import (
    EncoderConfig,
    MaskingPolicy,
    apply_mask,
    compute_mask,
    context_network,
    extract_latents,
)
from lyric_transfer.lib.errors import DimensionMismatchError, NotEnoughFramesError, ZeroNormVectorError
from lyric_transfer.lib.numerics import Tensor

CODEBOOK_PARAM = "ssl.codebook"


class SslConfig(BaseModel):
    """Settings of the contrastive objective."""
    temperature: float = Field(CONTRASTIVE_TEMPERATURE, gt=0.0, description="Cosine temperature.")
    distractors: int = Field(DISTRACTOR_COUNT, ge=1, description="Distractors per masked frame.")
    codebook_size: int = Field(32, ge=2, description="Codewords in the quantization codebook.")
    kmeans_iterations: int = Field(20, ge=1)
    diversity_weight: float = Field(0.0, ge=0.0, description="Weight of the codebook diversity penalty; 0 disables it.")


@dataclass(frozen=True)
class Codebook:
    """
    Fixed set of K codewords of dimension D.

    Raises:
        ValueError: With fewer than two codewords, non-finite values or duplicate rows.
    """
    entries: np.ndarray

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=np.float64)
        if entries.ndim != 2 or entries.shape[0] < 2:
            raise ValueError(f"a codebook needs at least two codewords, got shape {entries.shape}")
        if not np.all(np.isfinite(entries)):
            raise ValueError("codewords must be finite")
        if np.unique(entries, axis=0).shape[0] != entries.shape[0]:
            raise ValueError("codewords must be distinct")
        object.__setattr__(self, "entries", entries)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ZeroNormVectorError("cosine similarity is undefined for a zero vector")
    return x / norms


def quantize(z: np.ndarray, codebook: Codebook) -> Tuple[np.ndarray, np.ndarray]:
    """
    Replaces every frame by its nearest codeword under cosine similarity.

    Ties go to the lowest codeword index.

    Returns:
        Tuple[np.ndarray, np.ndarray]: Quantized frames (T, D) and codeword indices (T,).

    Raises:
        DimensionMismatchError: If frame and codeword dimensions differ.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != codebook.dim:
        raise DimensionMismatchError(f"frames of shape {z.shape} for codewords of dimension {codebook.dim}")
    similarity = _unit_rows(z) @ _unit_rows(codebook.entries).T
    indices = np.argmax(similarity, axis=1)
    return codebook.entries[indices], indices


def kmeans_codebook(vectors: np.ndarray, size: int, rng: np.random.Generator, iterations: int = 20) -> Codebook:
    """
    Cosine k-means on a warmup batch of latent frames.

    Centroids start at distinct randomly chosen frames. An empty cluster keeps its centroid; a centroid
    that collapses onto another is moved to the frame least similar to every centroid.
    """
    units = _unit_rows(np.asarray(vectors, dtype=np.float64))
    distinct = np.unique(units, axis=0)
    if distinct.shape[0] < size:
        raise ValueError(f"k-means needs {size} distinct vectors, got {distinct.shape[0]}")
    centroids = distinct[rng.choice(distinct.shape[0], size=size, replace=False)]
    for _ in range(iterations):
        assign = np.argmax(units @ centroids.T, axis=1)
        for k in range(size):
            members = units[assign == k]
            if len(members):
                centre = members.mean(axis=0)
                norm = np.linalg.norm(centre)
                if norm > 0:
                    centroids[k] = centre / norm
        _, first = np.unique(centroids, axis=0, return_index=True)
        for k in sorted(set(range(size)) - set(first.tolist())):
            farthest = int(np.argmin(np.max(units @ centroids.T, axis=1)))
            centroids[k] = units[farthest]
    logging.debug(f"k-means codebook of {size} codewords fitted on {units.shape[0]} frames")
    return Codebook(centroids)


@dataclass(frozen=True)
class DistractorSample:
    """
    Candidate sets for a group of masked frames.

    Attributes:
        candidates (np.ndarray): (M, K + 1, D); the positive target is always the last candidate.
        picks (np.ndarray): (M, K) positions (within the masked frames) of the drawn distractors.
        requested (int): Distractor count asked for.
        clamped (bool): Whether fewer than `requested` frames were available.
    """
    candidates: np.ndarray
    picks: np.ndarray
    requested: int
    clamped: bool


def sample_distractors(targets: np.ndarray, count: int, rng: np.random.Generator) -> DistractorSample:
    """
    Draws distractors for every masked frame from the targets of the other masked frames.

    Distractors are drawn uniformly without replacement. When `count` exceeds the M - 1 frames
    available it is clamped and the clamp is logged.

    Args:
        targets (np.ndarray): Quantized targets of the M masked frames of one utterance, (M, D).
        count (int): Distractors per frame.
        rng (np.random.Generator): Random stream.

    Raises:
        NotEnoughFramesError: If fewer than two masked frames are given.
    """
    targets = np.asarray(targets, dtype=np.float64)
    frames = targets.shape[0]
    if count < 1:
        raise ValueError("distractor count must be at least 1")
    if frames < 2:
        raise NotEnoughFramesError(f"{frames} masked frame(s); at least two are needed for distractors")
    used = min(count, frames - 1)
    if used < count:
        logging.debug(f"Distractor count clamped from {count} to {used} ({frames} masked frames)")
    picks = np.empty((frames, used), dtype=np.int64)
    for i in range(frames):
        others = np.delete(np.arange(frames), i)
        picks[i] = rng.choice(others, size=used, replace=False)
    candidates = np.concatenate([targets[picks], targets[:, None, :]], axis=1)
    return DistractorSample(candidates, picks, count, used < count)


def contrastive_loss(context, candidates, temperature: float = CONTRASTIVE_TEMPERATURE) -> Tensor:
    """
    Mean contrastive loss over masked frames.

    Args:
        context: Context vectors c_t, (M, D).
        candidates: Candidate sets (M, K + 1, D) with the positive last.
        temperature (float): Cosine temperature k > 0.

    Returns:
        Tensor: Scalar loss.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    logits = nx.cosine_similarity(context, candidates) * (1.0 / temperature)
    positives = logits[:, -1]
    return nx.mean(nx.logsumexp(logits, axis=-1) - positives)


def codebook_diversity(codebook: Codebook, temperature: float = CONTRASTIVE_TEMPERATURE) -> Callable[[Tensor], Tensor]:
    """
    Penalty rewarding even use of the codebook, for `ssl_utterance_loss(diversity=...)`.

    Every latent frame is softly assigned to the codewords by a softmax over its cosine similarities
    divided by `temperature`. With p the assignment averaged over frames, the penalty is
    (K - exp(H(p))) / K: 0 when all K codewords are used equally, close to 1 when one codeword takes
    every frame.
    """
    entries = codebook.entries

    def penalty(z) -> Tensor:
        z = nx.as_tensor(z)
        candidates = np.repeat(entries[None, :, :], z.shape[0], axis=0)
        assignment = nx.softmax(nx.cosine_similarity(z, candidates) * (1.0 / temperature), axis=-1)
        usage = nx.mean(assignment, axis=0)
        perplexity = nx.exp(-nx.sum(usage * nx.log(usage)))
        return (codebook.size - perplexity) * (1.0 / codebook.size)

    return penalty


@dataclass
class SslStepResult:
    """Loss of one utterance plus what it was computed on."""
    loss: Tensor
    masked_frames: int
    distractors: int
    clamped: bool


def ssl_utterance_loss(
    x: np.ndarray,
    encoder_cfg: EncoderConfig,
    params: Dict[str, Tensor],
    codebook: Codebook,
    masking: MaskingPolicy,
    cfg: SslConfig,
    rng: np.random.Generator,
    diversity: Optional[Callable[[Tensor], Tensor]] = None,
) -> SslStepResult:
    """
    Contrastive loss of one utterance: mask latent spans, encode, quantize, sample distractors.

    `diversity`, when given, maps the latent frames to an extra scalar penalty added with weight
    `cfg.diversity_weight`.

    Raises:
        NotEnoughFramesError: If the mask selects fewer than two frames.
    """
    z = extract_latents(x, encoder_cfg, params)
    mask = compute_mask(z.shape[0], masking, rng)
    indices = mask.indices
    if indices.size < 2:
        raise NotEnoughFramesError(f"only {indices.size} masked frame(s) in an utterance of {z.shape[0]} frames")
    c = context_network(apply_mask(z, mask, params["encoder.mask_embedding"]), encoder_cfg, params)
    c_masked = nx.linear(c[indices], params["ssl.proj.weight"], params["ssl.proj.bias"])
    targets, _ = quantize(z.data[indices], codebook)
    sample = sample_distractors(targets, cfg.distractors, rng)
    loss = contrastive_loss(c_masked, sample.candidates, cfg.temperature)
    if diversity is not None and cfg.diversity_weight > 0:
        loss = loss + cfg.diversity_weight * diversity(z)
    return SslStepResult(loss, int(indices.size), int(sample.picks.shape[1]), sample.clamped)


def init_ssl_params(model_dim: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """Projection applied to masked context vectors before the cosine comparison."""
    return {
        "ssl.proj.weight": nx.uniform_init(rng, (model_dim, model_dim), model_dim),
        "ssl.proj.bias": np.zeros(model_dim),
    }
