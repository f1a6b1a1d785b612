"""
Joint CTC / attention / language-model beam search.

A hypothesis w is scored as

    score(w) = lambda_b * log P_ctc(w) + (1 - lambda_b) * log P_att(w) + lambda_c * log P_lm(w)

During the search the CTC term of an unfinished prefix is its prefix probability, and the attention
and LM terms are the log-probabilities accumulated so far. Appending eos finishes a hypothesis: the
CTC term becomes the probability of the exact label sequence over all frames, and the attention and LM
terms score eos. There is no length normalisation.

Every term can only decrease when a hypothesis is extended, so the search stops as soon as the best
finished hypothesis scores strictly higher than every live one.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator

from lyric_transfer.lib.config import BEAM_SIZE, DECODE_PROFILES, MAX_BEAM_SIZE
from lyric_transfer.lib.ctc_utils import CtcPrefixScorer, CtcPrefixState, ctc_loss
from lyric_transfer.lib.errors import ConfigError
from lyric_transfer.lib.lm_utils import CharLm, LmState
from lyric_transfer.lib.s2s_decoder import (
    AttentionState,
    DecoderConfig,
    DecoderContext,
    decoder_step,
    initial_state,
    output_mask,
    sequence_log_probability,
)
from lyric_transfer.lib.text_utils import TokenInventory


class DecodeWeights(BaseModel):
    """
    Weights and limits of the joint search.

    Attributes:
        lambda_b (float): Weight of the CTC term; the attention term gets 1 - lambda_b.
        lambda_c (float): Weight of the language-model term.
        beam_size (int): Hypotheses kept per step, clamped to `MAX_BEAM_SIZE`.
        max_length (int): Maximum number of labels (eos not counted).
        nbest (int): Finished hypotheses returned.
        force_final_eos (bool): At `max_length`, only eos may extend a hypothesis.
        early_stop (bool): Stop once the best finished hypothesis beats every live one.
    """
    lambda_b: float = Field(DECODE_PROFILES["dsing"][0], ge=0.0, le=1.0)
    lambda_c: float = Field(DECODE_PROFILES["dsing"][1], ge=0.0)
    beam_size: int = Field(BEAM_SIZE, ge=1)
    max_length: int = Field(200, ge=1)
    nbest: int = Field(1, ge=1)
    force_final_eos: bool = True
    early_stop: bool = True

    @field_validator("beam_size")
    @classmethod
    def _clamp_beam(cls, value: int) -> int:
        if value > MAX_BEAM_SIZE:
            logging.warning(f"Beam size {value} clamped to {MAX_BEAM_SIZE}")
            return MAX_BEAM_SIZE
        return value

    @classmethod
    def from_profile(cls, name: str, **overrides) -> "DecodeWeights":
        """Weights of a named profile (`dsing` or `dali`), with optional overrides."""
        if name not in DECODE_PROFILES:
            raise ConfigError(f"unknown decoding profile {name!r}; choose from {sorted(DECODE_PROFILES)}", key="profile")
        lambda_b, lambda_c = DECODE_PROFILES[name]
        values = {"lambda_b": lambda_b, "lambda_c": lambda_c}
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass
class DecodeModels:
    """
    Everything the search scores with, for one utterance.

    Attributes:
        ctc_log_probs (np.ndarray): (T, V) CTC frame log-probabilities.
        inventory (TokenInventory): Token inventory.
        decoder (Optional[DecoderContext]): Attention decoder context; required when lambda_b < 1.
        decoder_cfg (Optional[DecoderConfig]): Decoder sizes.
        lm (Optional[CharLm]): Language model; required when lambda_c > 0.
    """
    ctc_log_probs: np.ndarray
    inventory: TokenInventory
    decoder: Optional[DecoderContext] = None
    decoder_cfg: Optional[DecoderConfig] = None
    lm: Optional[CharLm] = None


@dataclass(frozen=True)
class Hypothesis:
    """
    A beam candidate.

    `tokens` holds the emitted labels and, for finished hypotheses, the trailing eos. The attention and
    LM states are those reached before feeding `last_token`; they advance lazily when the hypothesis
    is expanded.
    """
    tokens: Tuple[int, ...]
    last_token: int
    ctc_state: CtcPrefixState
    att_state: Optional[AttentionState]
    lm_state: Optional[LmState]
    ctc: float
    s2s: float
    lm: float
    combined: float
    finished: bool

    @property
    def labels(self) -> Tuple[int, ...]:
        return self.tokens[:-1] if self.finished else self.tokens


def combine(weights: DecodeWeights, ctc: float, s2s: float, lm: float) -> float:
    """The log-linear combination of the three component scores."""
    return weights.lambda_b * ctc + (1.0 - weights.lambda_b) * s2s + weights.lambda_c * lm


def _uses_attention(weights: DecodeWeights) -> bool:
    return weights.lambda_b < 1.0


def _uses_lm(weights: DecodeWeights) -> bool:
    return weights.lambda_c > 0.0


class JointSearch:
    """
    Beam search over one utterance.

    Args:
        models (DecodeModels): Scoring models.
        weights (DecodeWeights): Weights and limits.
    """

    def __init__(self, models: DecodeModels, weights: DecodeWeights):
        self.models = models
        self.weights = weights
        self.inventory = models.inventory
        self.scorer = CtcPrefixScorer(models.ctc_log_probs, self.inventory.blank_id, self.inventory.eos_id)
        if _uses_attention(weights) and (models.decoder is None or models.decoder_cfg is None):
            raise ConfigError("lambda_b < 1 needs an attention decoder", key="lambda_b")
        if _uses_lm(weights) and models.lm is None:
            raise ConfigError("lambda_c > 0 needs a language model", key="lambda_c")
        self.att_mask = output_mask(self.inventory)
        self.expansions = 0

    def root(self) -> Hypothesis:
        att_state = initial_state(self.models.decoder, self.models.decoder_cfg) if _uses_attention(self.weights) else None
        lm_state = self.models.lm.zero_state() if _uses_lm(self.weights) else None
        return Hypothesis(
            tokens=(), last_token=self.inventory.bos_id, ctc_state=self.scorer.initial_state(),
            att_state=att_state, lm_state=lm_state, ctc=0.0, s2s=0.0, lm=0.0, combined=0.0, finished=False,
        )

    def allowed_tokens(self, hyp: Hypothesis) -> List[int]:
        if len(hyp.tokens) >= self.weights.max_length:
            return [self.inventory.eos_id] if self.weights.force_final_eos else []
        return self.inventory.emittable_ids

    def expand(self, hyp: Hypothesis) -> List[Hypothesis]:
        """
        One child per allowed token (every label plus eos), with every component score advanced.
        """
        if hyp.finished:
            return []
        tokens = self.allowed_tokens(hyp)
        if not tokens:
            return []
        self.expansions += 1
        att_next, att_state = None, None
        if _uses_attention(self.weights):
            logp, att_state = decoder_step(
                self.models.decoder, hyp.last_token, hyp.att_state, self.models.decoder_cfg, self.att_mask
            )
            att_next = logp.data
        lm_next, lm_state = None, None
        if _uses_lm(self.weights):
            logp, lm_state = self.models.lm.step(hyp.lm_state, hyp.last_token)
            lm_next = logp.data

        children = []
        for token in tokens:
            ctc_state, _ = self.scorer.extend(hyp.ctc_state, token)
            s2s = hyp.s2s + (float(att_next[token]) if att_next is not None else 0.0)
            lm = hyp.lm + (float(lm_next[token]) if lm_next is not None else 0.0)
            children.append(Hypothesis(
                tokens=hyp.tokens + (token,), last_token=token, ctc_state=ctc_state,
                att_state=att_state, lm_state=lm_state, ctc=ctc_state.score, s2s=s2s, lm=lm,
                combined=combine(self.weights, ctc_state.score, s2s, lm),
                finished=token == self.inventory.eos_id,
            ))
        return children


def _rank_key(hyp: Hypothesis):
    return (-hyp.combined, len(hyp.tokens), hyp.tokens)


def prune(hypotheses: Iterable[Hypothesis], beam_size: int) -> List[Hypothesis]:
    """Top `beam_size` by combined score; ties go to the shorter, then lexicographically smaller prefix."""
    return sorted(hypotheses, key=_rank_key)[:beam_size]


@dataclass
class DecodeResult:
    """
    Outcome of decoding one utterance.

    Attributes:
        labels (List[int]): Best label sequence, eos stripped.
        ctc (float): CTC component of the best hypothesis.
        s2s (float): Attention component.
        lm (float): Language-model component.
        combined (float): Combined score.
        finished (bool): False when no hypothesis reached eos and the best unfinished one is returned.
        nbest (List[Hypothesis]): Best finished hypotheses, best first.
        steps (int): Search steps taken.
    """
    labels: List[int]
    ctc: float
    s2s: float
    lm: float
    combined: float
    finished: bool
    nbest: List[Hypothesis] = field(default_factory=list)
    steps: int = 0


def decode(models: DecodeModels, weights: DecodeWeights) -> DecodeResult:
    """
    Finds the highest-scoring finished hypothesis of one utterance.

    Returns the best unfinished hypothesis, flagged `finished=False`, when none reaches eos.
    """
    search = JointSearch(models, weights)
    beam = [search.root()]
    finished: List[Hypothesis] = []
    steps = 0
    while beam:
        steps += 1
        children = [child for hyp in beam for child in search.expand(hyp)]
        if not children:
            break
        kept = prune(children, weights.beam_size)
        finished.extend(h for h in kept if h.finished)
        beam = [h for h in kept if not h.finished]
        if weights.early_stop and finished and beam:
            best_finished = max(h.combined for h in finished)
            if best_finished > max(h.combined for h in beam):
                logging.debug(f"Search stopped early after {steps} steps")
                break

    if finished:
        ranked = prune(finished, len(finished))
        best = ranked[0]
        return DecodeResult(
            labels=list(best.labels), ctc=best.ctc, s2s=best.s2s, lm=best.lm, combined=best.combined,
            finished=True, nbest=ranked[:weights.nbest], steps=steps,
        )
    fallback = prune(beam or [search.root()], 1)[0]
    logging.warning(f"No hypothesis reached eos within {weights.max_length} labels; returning the best unfinished one")
    return DecodeResult(
        labels=list(fallback.labels), ctc=fallback.ctc, s2s=fallback.s2s, lm=fallback.lm,
        combined=fallback.combined, finished=False, nbest=[], steps=steps,
    )


def sequence_score(models: DecodeModels, weights: DecodeWeights, labels: Sequence[int]) -> Tuple[float, float, float, float]:
    """
    Scores a complete label sequence directly, without the search machinery.

    Returns:
        Tuple[float, float, float, float]: (ctc, s2s, lm, combined), eos included in the s2s and lm terms.
    """
    inventory = models.inventory
    ctc = -ctc_loss(models.ctc_log_probs, labels, inventory.blank_id)
    s2s = 0.0
    if _uses_attention(weights):
        s2s = sequence_log_probability(models.decoder, list(labels) + [inventory.eos_id], models.decoder_cfg, inventory)
    lm = models.lm.score(labels) if _uses_lm(weights) else 0.0
    return ctc, s2s, lm, combine(weights, ctc, s2s, lm)


def decode_many(
    build: Callable[[int], DecodeModels],
    count: int,
    weights: DecodeWeights,
    workers: int = 1,
) -> List[DecodeResult]:
    """
    Decodes `count` utterances, building the models of utterance i with `build(i)`.

    Utterances run on a thread pool; results come back in input order whatever the worker count.
    """
    def run(index: int) -> DecodeResult:
        return decode(build(index), weights)

    if workers <= 1:
        return [run(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, range(count)))
