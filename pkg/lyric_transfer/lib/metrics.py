"""
Word error rate, its character-level variant and the two corpus aggregation conventions.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, List, Optional, Sequence, Tuple


class EditOp(str, Enum):
    MATCH = "match"
    SUBSTITUTION = "sub"
    DELETION = "del"
    INSERTION = "ins"


@dataclass(frozen=True)
class WerBreakdown:
    """
    Edit counts of one reference/hypothesis pair.

    Attributes:
        substitutions (int): Substituted reference words.
        deletions (int): Reference words missing from the hypothesis.
        insertions (int): Hypothesis words absent from the reference.
        reference_words (int): Reference length N.
        wer (float): (S + D + I) / N, or the empty-reference convention when N = 0.
        empty_reference (bool): Whether N = 0.
    """
    substitutions: int
    deletions: int
    insertions: int
    reference_words: int
    wer: float
    empty_reference: bool = False

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions


def align(ref: Sequence[str], hyp: Sequence[str]) -> List[Tuple[EditOp, Optional[str], Optional[str]]]:
    """
    Minimum-edit-distance alignment with unit costs.

    Among alignments of equal cost the back-trace prefers a match or substitution, then a deletion,
    then an insertion, so a substitution always wins over an insertion plus a deletion.

    Returns:
        List[Tuple[EditOp, Optional[str], Optional[str]]]: (operation, reference word, hypothesis word)
        in reading order; the missing side is None.
    """
    n, m = len(ref), len(hyp)
    cost = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        cost[i][0] = i
    for j in range(1, m + 1):
        cost[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            diagonal = cost[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1])
            cost[i][j] = min(diagonal, cost[i - 1][j] + 1, cost[i][j - 1] + 1)

    ops = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i][j] == cost[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            op = EditOp.MATCH if ref[i - 1] == hyp[j - 1] else EditOp.SUBSTITUTION
            ops.append((op, ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and cost[i][j] == cost[i - 1][j] + 1:
            ops.append((EditOp.DELETION, ref[i - 1], None))
            i -= 1
        else:
            ops.append((EditOp.INSERTION, None, hyp[j - 1]))
            j -= 1
    ops.reverse()
    return ops


def _breakdown(ref: Sequence[str], hyp: Sequence[str]) -> WerBreakdown:
    ops = align(ref, hyp)
    subs = sum(op == EditOp.SUBSTITUTION for op, _, _ in ops)
    dels = sum(op == EditOp.DELETION for op, _, _ in ops)
    ins = sum(op == EditOp.INSERTION for op, _, _ in ops)
    if not ref:
        # Empty reference: 0 for an empty hypothesis, 1 for any insertion.
        return WerBreakdown(0, 0, ins, 0, 1.0 if ins else 0.0, empty_reference=True)
    return WerBreakdown(subs, dels, ins, len(ref), (subs + dels + ins) / len(ref))


def _words(value) -> List[str]:
    return value.split() if isinstance(value, str) else list(value)


def wer(ref, hyp) -> WerBreakdown:
    """
    Word error rate of one hypothesis.

    Args:
        ref: Reference words, or a normalized string split on whitespace.
        hyp: Hypothesis words, or a string.

    Returns:
        WerBreakdown: Edit counts and the rate. An empty reference is flagged and scores 0.0 against
        an empty hypothesis and 1.0 otherwise.
    """
    result = _breakdown(_words(ref), _words(hyp))
    if result.empty_reference:
        logging.warning(f"Empty reference scored against {result.insertions} hypothesis word(s)")
    return result


def cer(ref: str, hyp: str) -> WerBreakdown:
    """Character error rate over the characters of two strings, spaces included."""
    return _breakdown(list(ref), list(hyp))


@dataclass(frozen=True)
class CorpusWer:
    """
    Both aggregation conventions over a test set.

    Attributes:
        utterance_averaged (float): Mean of per-utterance rates (primary figure).
        pooled (float): Total errors over total reference words.
        utterances (int): Number of scored pairs.
        per_utterance (Tuple[WerBreakdown, ...]): Individual results in input order.
    """
    utterance_averaged: float
    pooled: float
    utterances: int
    per_utterance: Tuple[WerBreakdown, ...]


def corpus_wer(pairs: Iterable[Tuple[object, object]], character_level: bool = False) -> CorpusWer:
    """
    Scores (reference, hypothesis) pairs and aggregates them both ways.

    Raises:
        ValueError: If `pairs` is empty.
    """
    scorer = cer if character_level else wer
    results = tuple(scorer(ref, hyp) for ref, hyp in pairs)
    if not results:
        raise ValueError("corpus_wer needs at least one pair")
    averaged = sum(r.wer for r in results) / len(results)
    total_words = sum(r.reference_words for r in results)
    total_errors = sum(r.errors for r in results)
    if total_words:
        pooled = total_errors / total_words
    else:
        pooled = 1.0 if total_errors else 0.0
    return CorpusWer(averaged, pooled, len(results), results)
