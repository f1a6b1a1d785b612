"""
Connectionist temporal classification: collapse map, loss, gradient and prefix scoring.

All recursions run in the log domain with `np.logaddexp`; no probability-domain rescaling is needed.
Posteriors are a (T, V) array of per-frame log-probabilities over the full inventory, blank included.

### Prefix scoring
For a label prefix h, `CtcPrefixState` keeps two per-frame log-probabilities:

- r_n[t]: all alignments of frames 0..t that collapse to h and end in a non-blank symbol,
- r_b[t]: the same, ending in blank.

Extending h by a label c (c != blank) gives, with phi[t] = r_b[t] + r_n[t] if c differs from the last
label of h and phi[t] = r_b[t] otherwise:

    r_n'[0] = log p(c at 0) if h is empty else -inf,      r_b'[0] = -inf
    r_n'[t] = logaddexp(r_n'[t-1], phi[t-1]) + log p(c at t)
    r_b'[t] = logaddexp(r_b'[t-1], r_n'[t-1]) + log p(blank at t)
    psi(h+c) = logaddexp(r_n'[0], logaddexp_t(phi[t-1] + log p(c at t)))

psi is the prefix probability: the mass of every alignment whose collapsed labelling starts with h+c.
Finalizing h consumes all T frames and gives logaddexp(r_n[T-1], r_b[T-1]) = log P(h), which is
exactly the negated CTC loss of h.
"""
import itertools
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from lyric_transfer.lib.config import LOG_FLOOR
from lyric_transfer.lib.errors import InvalidExtensionError, LengthMismatchError
from lyric_transfer.lib.numerics import Tensor, as_tensor, custom_op


def collapse(alignment: Sequence[int], blank_id: int) -> List[int]:
    """
    Maps a frame-level alignment to its label sequence: merge adjacent repeats, then drop blanks.
    """
    labels: List[int] = []
    previous = None
    for token in alignment:
        token = int(token)
        if token != previous and token != blank_id:
            labels.append(token)
        previous = token
    return labels


def required_frames(target: Sequence[int]) -> int:
    """Minimum number of frames able to emit `target`: one per label plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def is_feasible(target: Sequence[int], frames: int) -> bool:
    return required_frames(target) <= frames


def _extended(target: Sequence[int], blank_id: int) -> Tuple[np.ndarray, np.ndarray]:
    labels = np.full(2 * len(target) + 1, blank_id, dtype=np.int64)
    labels[1::2] = target
    skip = np.zeros(len(labels), dtype=bool)
    if len(target) > 1:
        skip[3::2] = np.asarray(target[1:]) != np.asarray(target[:-1])
    return labels, skip


def _forward(logp: np.ndarray, labels: np.ndarray, skip: np.ndarray) -> np.ndarray:
    frames, states = logp.shape[0], len(labels)
    alpha = np.full((frames, states), -np.inf)
    alpha[0, 0] = logp[0, labels[0]]
    if states > 1:
        alpha[0, 1] = logp[0, labels[1]]
    for t in range(1, frames):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + logp[t, labels]
    return alpha


def _backward(logp: np.ndarray, labels: np.ndarray, skip: np.ndarray) -> np.ndarray:
    frames, states = logp.shape[0], len(labels)
    beta = np.full((frames, states), -np.inf)
    beta[-1, -1] = 0.0
    if states > 1:
        beta[-1, -2] = 0.0
    for t in range(frames - 2, -1, -1):
        nxt = beta[t + 1] + logp[t + 1, labels]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc
    return beta


def _log_likelihood(alpha: np.ndarray) -> float:
    last = alpha[-1]
    return float(last[-1] if len(last) == 1 else np.logaddexp(last[-1], last[-2]))


def _validate(logp: np.ndarray, target: Sequence[int], blank_id: int) -> None:
    if logp.ndim != 2:
        raise LengthMismatchError(f"posteriors must be (T, V), got shape {logp.shape}")
    if blank_id in target:
        raise InvalidExtensionError("the blank token cannot appear in a CTC target")


def ctc_loss(logp: np.ndarray, target: Sequence[int], blank_id: int) -> float:
    """
    Negative log-probability of `target` under frame posteriors `logp` (T, V).

    Returns:
        float: The loss, or `math.inf` when no alignment of `target` fits in T frames. The infeasible
        case is logged as a warning and is not raised.
    """
    logp = np.asarray(logp, dtype=np.float64)
    target = [int(t) for t in target]
    _validate(logp, target, blank_id)
    if not is_feasible(target, logp.shape[0]):
        logging.warning(
            f"CTC target of {len(target)} labels needs {required_frames(target)} frames, "
            f"only {logp.shape[0]} available"
        )
        return math.inf
    labels, skip = _extended(target, blank_id)
    return -_log_likelihood(_forward(logp, labels, skip))


def ctc_gradient(logp: np.ndarray, target: Sequence[int], blank_id: int) -> np.ndarray:
    """
    Gradient of `ctc_loss` with respect to the log-probabilities `logp`.

    Entry (t, v) is minus the posterior occupancy of symbol v at frame t. Infeasible targets give a
    zero gradient.
    """
    logp = np.asarray(logp, dtype=np.float64)
    target = [int(t) for t in target]
    _validate(logp, target, blank_id)
    grad = np.zeros_like(logp)
    if not is_feasible(target, logp.shape[0]):
        return grad
    labels, skip = _extended(target, blank_id)
    alpha = _forward(logp, labels, skip)
    beta = _backward(logp, labels, skip)
    log_total = _log_likelihood(alpha)
    occupancy = np.exp(alpha + beta - log_total)
    for s, label in enumerate(labels):
        grad[:, label] -= occupancy[:, s]
    return grad


def ctc_loss_tensor(log_probs: Tensor, target: Sequence[int], blank_id: int) -> Tuple[Tensor, bool]:
    """
    Differentiable CTC loss over a (T, V) log-probability tensor.

    Returns:
        Tuple[Tensor, bool]: The scalar loss node and whether the target was feasible. An infeasible
        target yields an infinite loss with a zero gradient; callers exclude it from batch means.
    """
    log_probs = as_tensor(log_probs)
    value = ctc_loss(log_probs.data, target, blank_id)
    feasible = math.isfinite(value)

    def rule(g):
        return (g * ctc_gradient(log_probs.data, target, blank_id),)

    return custom_op(np.asarray(value), (log_probs,), rule), feasible


def enumerate_ctc_probability(logp: np.ndarray, target: Sequence[int], blank_id: int) -> float:
    """
    Brute-force log-probability of `target` by summing over all V^T alignments. Tiny inputs only.
    """
    logp = np.asarray(logp, dtype=np.float64)
    frames, vocab = logp.shape
    target = [int(t) for t in target]
    total = -np.inf
    for path in itertools.product(range(vocab), repeat=frames):
        if collapse(path, blank_id) == target:
            total = np.logaddexp(total, float(sum(logp[t, v] for t, v in enumerate(path))))
    return float(total)


def ctc_greedy_decode(logp: np.ndarray, blank_id: int) -> List[int]:
    """Best path decoding: per-frame argmax, then collapse."""
    return collapse(np.argmax(np.asarray(logp), axis=-1).tolist(), blank_id)


# Prefix scoring

@dataclass(frozen=True)
class CtcPrefixState:
    """
    Prefix-scoring state of one label prefix. Immutable, so beam branches can share it.

    Attributes:
        prefix (Tuple[int, ...]): Labels emitted so far.
        r_n (np.ndarray): Per-frame log mass of alignments ending in a non-blank.
        r_b (np.ndarray): Per-frame log mass of alignments ending in blank.
        score (float): Prefix log-probability psi(prefix), floored at `LOG_FLOOR`.
    """
    prefix: Tuple[int, ...]
    r_n: np.ndarray
    r_b: np.ndarray
    score: float


class CtcPrefixScorer:
    """
    Incremental CTC prefix scorer over one utterance's posteriors.

    Args:
        logp (np.ndarray): (T, V) frame log-probabilities.
        blank_id (int): Blank id.
        eos_id (Optional[int]): End-of-sequence id. Extending with it finalizes the prefix.
    """

    def __init__(self, logp: np.ndarray, blank_id: int, eos_id: Optional[int] = None):
        self.logp = np.asarray(logp, dtype=np.float64)
        if self.logp.ndim != 2 or self.logp.shape[0] == 0:
            raise LengthMismatchError(f"posteriors must be (T, V) with T >= 1, got {self.logp.shape}")
        self.blank_id = blank_id
        self.eos_id = eos_id

    @property
    def frames(self) -> int:
        return self.logp.shape[0]

    def initial_state(self) -> CtcPrefixState:
        """State of the empty prefix: only blanks emitted, prefix probability 1."""
        r_b = np.cumsum(self.logp[:, self.blank_id])
        r_n = np.full(self.frames, -np.inf)
        return CtcPrefixState(prefix=(), r_n=r_n, r_b=r_b, score=0.0)

    def finalize(self, state: CtcPrefixState) -> float:
        """log P(prefix) over all T frames, floored at `LOG_FLOOR`."""
        return max(float(np.logaddexp(state.r_n[-1], state.r_b[-1])), LOG_FLOOR)

    def extend(self, state: CtcPrefixState, token: int) -> Tuple[CtcPrefixState, float]:
        """
        Extends a prefix by one token.

        Extending with eos finalizes the prefix: the returned state keeps the prefix arrays and its score
        is log P(prefix).

        Returns:
            Tuple[CtcPrefixState, float]: The new state and the score increment new.score - state.score.

        Raises:
            InvalidExtensionError: If `token` is the blank.
        """
        token = int(token)
        if token == self.blank_id:
            raise InvalidExtensionError("a prefix cannot be extended with the blank token")
        if token == self.eos_id:
            score = self.finalize(state)
            final = CtcPrefixState(state.prefix + (token,), state.r_n, state.r_b, score)
            return final, score - state.score

        emit = self.logp[:, token]
        if state.prefix and state.prefix[-1] == token:
            phi = state.r_b
        else:
            phi = np.logaddexp(state.r_b, state.r_n)
        r_n = np.full(self.frames, -np.inf)
        r_b = np.full(self.frames, -np.inf)
        if not state.prefix:
            r_n[0] = emit[0]
        for t in range(1, self.frames):
            r_n[t] = np.logaddexp(r_n[t - 1], phi[t - 1]) + emit[t]
            r_b[t] = np.logaddexp(r_b[t - 1], r_n[t - 1]) + self.logp[t, self.blank_id]
        psi = np.logaddexp.reduce(np.concatenate(([r_n[0]], phi[:-1] + emit[1:])))
        score = max(float(psi), LOG_FLOOR)
        return CtcPrefixState(state.prefix + (token,), r_n, r_b, score), score - state.score


def prefix_score_init(logp: np.ndarray, blank_id: int) -> CtcPrefixState:
    """Empty-prefix state over `logp`."""
    return CtcPrefixScorer(logp, blank_id).initial_state()


def prefix_score_extend(
    logp: np.ndarray, state: CtcPrefixState, token: int, blank_id: int, eos_id: Optional[int] = None
) -> Tuple[CtcPrefixState, float]:
    """Functional form of `CtcPrefixScorer.extend`."""
    return CtcPrefixScorer(logp, blank_id, eos_id).extend(state, token)


def ctc_label_search(
    logp: np.ndarray,
    blank_id: int,
    labels: Sequence[int],
    max_length: int,
    beam_size: int = 16,
) -> Tuple[List[int], float]:
    """
    Searches label sequences for the highest CTC probability log P(w).

    Prefixes are grown breadth-first and pruned to `beam_size` by prefix probability; every retained
    prefix (the empty one included) is a candidate completion scored by its finalized probability.
    With a beam no smaller than the number of sequences up to `max_length` the search is exhaustive.

    Returns:
        Tuple[List[int], float]: The best label sequence and its log-probability.
    """
    scorer = CtcPrefixScorer(logp, blank_id)
    beam = [scorer.initial_state()]
    best = ((), scorer.finalize(beam[0]))
    for _ in range(max_length):
        children = [scorer.extend(state, token)[0] for state in beam for token in labels]
        children.sort(key=lambda s: (-s.score, len(s.prefix), s.prefix))
        beam = children[:beam_size]
        for state in beam:
            final = scorer.finalize(state)
            if final > best[1] or (final == best[1] and (len(state.prefix), state.prefix) < (len(best[0]), best[0])):
                best = (state.prefix, final)
    return list(best[0]), best[1]
