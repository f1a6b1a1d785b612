import itertools
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import random_log_probs
from lyric_transfer.lib import numerics as nx
from lyric_transfer.lib.ctc_utils import (
    CtcPrefixScorer,
    collapse,
    ctc_gradient,
    ctc_greedy_decode,
    ctc_label_search,
    ctc_loss,
    ctc_loss_tensor,
    enumerate_ctc_probability,
    required_frames,
)
from lyric_transfer.lib.errors import InvalidExtensionError

BLANK = 0


def random_target(rng, vocab, max_len):
    length = int(rng.integers(0, max_len + 1))
    return [int(t) for t in rng.integers(1, vocab, size=length)]


class TestCollapse:
    def test_merges_repeats_then_drops_blanks(self):
        assert collapse([1, 1, 0, 1, 2, 2, 0], BLANK) == [1, 1, 2]
        assert collapse([0, 0, 0], BLANK) == []

    def test_required_frames_counts_repeat_separators(self):
        assert required_frames([1, 1]) == 3
        assert required_frames([1, 2]) == 2
        assert required_frames([]) == 0


class TestLoss:
    def test_hand_derived_value(self):
        logp = np.log(np.full((2, 2), 0.5))
        assert_allclose(ctc_loss(logp, [1], BLANK), -math.log(0.75), atol=1e-12)

    def test_matches_exhaustive_enumeration(self, rng):
        for _ in range(40):
            frames = int(rng.integers(1, 7))
            vocab = int(rng.integers(2, 5))
            logp = random_log_probs(rng, frames, vocab)
            target = random_target(rng, vocab, 3)
            expected = enumerate_ctc_probability(logp, target, BLANK)
            loss = ctc_loss(logp, target, BLANK)
            if math.isinf(expected):
                assert loss == math.inf
            else:
                assert_allclose(-loss, expected, atol=1e-9)

    def test_empty_target_is_all_blank_path(self, rng):
        logp = random_log_probs(rng, 4, 3)
        assert_allclose(ctc_loss(logp, [], BLANK), -logp[:, BLANK].sum(), atol=1e-12)

    def test_infeasible_target_is_infinite_not_raised(self):
        logp = np.log(np.full((2, 3), 1 / 3))
        assert ctc_loss(logp, [1, 1], BLANK) == math.inf
        assert not np.any(ctc_gradient(logp, [1, 1], BLANK))

    def test_blank_in_target_rejected(self):
        with pytest.raises(InvalidExtensionError):
            ctc_loss(np.zeros((3, 2)), [0], BLANK)

    def test_tensor_loss_reports_feasibility(self):
        loss, feasible = ctc_loss_tensor(nx.Tensor(np.log(np.full((1, 2), 0.5))), [1, 1], BLANK)
        assert not feasible
        assert loss.item() == math.inf


class TestGradient:
    def test_finite_differences_through_log_softmax(self, rng):
        for _ in range(10):
            frames, vocab = 5, 4
            target = [1, 2, 2]
            logits = rng.normal(size=(frames, vocab))

            def objective(x):
                loss, _ = ctc_loss_tensor(nx.log_softmax(x, axis=-1), target, BLANK)
                return loss

            assert max(nx.check_gradients(objective, [logits])) < 1e-4

    def test_occupancy_sums_to_one_per_frame(self, rng):
        logp = random_log_probs(rng, 6, 4)
        grad = ctc_gradient(logp, [1, 3], BLANK)
        assert_allclose(-grad.sum(axis=1), 1.0, atol=1e-10)


class TestPrefixScoring:
    def test_finalized_prefix_equals_negated_loss(self, rng):
        for _ in range(200):
            frames = int(rng.integers(1, 9))
            vocab = int(rng.integers(2, 6))
            logp = random_log_probs(rng, frames, vocab)
            target = random_target(rng, vocab, 4)
            scorer = CtcPrefixScorer(logp, BLANK)
            state = scorer.initial_state()
            for token in target:
                state, _ = scorer.extend(state, token)
            loss = ctc_loss(logp, target, BLANK)
            final = scorer.finalize(state)
            if math.isinf(loss):
                assert final < -1e20
            else:
                assert_allclose(final, -loss, atol=1e-9)

    def test_eos_extension_finalizes(self, rng):
        logp = random_log_probs(rng, 5, 4)
        scorer = CtcPrefixScorer(logp, BLANK, eos_id=3)
        state, _ = scorer.extend(scorer.initial_state(), 1)
        final, increment = scorer.extend(state, 3)
        assert_allclose(final.score, -ctc_loss(logp, [1], BLANK), atol=1e-9)
        assert_allclose(increment, final.score - state.score)

    def test_prefix_mass_splits_over_extensions(self, rng):
        logp = random_log_probs(rng, 6, 4)
        scorer = CtcPrefixScorer(logp, BLANK)
        root = scorer.initial_state()
        for prefix_token in (None, 2):
            state = root if prefix_token is None else scorer.extend(root, prefix_token)[0]
            mass = math.exp(scorer.finalize(state))
            mass += sum(math.exp(scorer.extend(state, c)[0].score) for c in (1, 2, 3))
            assert_allclose(mass, math.exp(state.score), rtol=1e-9)

    def test_prefix_bounds_every_completion(self, rng):
        for _ in range(5):
            frames, vocab = 4, 3
            logp = random_log_probs(rng, frames, vocab)
            completed = {}
            for path in itertools.product(range(vocab), repeat=frames):
                labels = tuple(collapse(path, BLANK))
                completed[labels] = completed.get(labels, 0.0) + math.exp(sum(logp[t, v] for t, v in enumerate(path)))
            scorer = CtcPrefixScorer(logp, BLANK)
            for length in range(1, 4):
                for prefix in itertools.product(range(1, vocab), repeat=length):
                    state = scorer.initial_state()
                    for token in prefix:
                        state, _ = scorer.extend(state, token)
                    supersequences = [p for y, p in completed.items() if y[:length] == prefix]
                    for probability in supersequences:
                        assert probability <= math.exp(state.score) * (1 + 1e-9)
                    assert_allclose(math.exp(state.score), sum(supersequences), rtol=1e-9, atol=1e-300)

    def test_blank_extension_rejected(self, rng):
        scorer = CtcPrefixScorer(random_log_probs(rng, 3, 3), BLANK)
        with pytest.raises(InvalidExtensionError):
            scorer.extend(scorer.initial_state(), BLANK)


class TestSearch:
    def test_greedy_decode(self):
        logp = np.log(np.array([
            [0.1, 0.8, 0.1],
            [0.1, 0.8, 0.1],
            [0.8, 0.1, 0.1],
            [0.1, 0.8, 0.1],
            [0.1, 0.1, 0.8],
        ]))
        assert ctc_greedy_decode(logp, BLANK) == [1, 1, 2]

    def test_exhaustive_label_search(self, rng):
        labels = [1, 2]
        for _ in range(10):
            logp = random_log_probs(rng, 4, 3)
            candidates = [list(c) for n in range(4) for c in itertools.product(labels, repeat=n)]
            expected = max(candidates, key=lambda c: -ctc_loss(logp, c, BLANK))
            best, score = ctc_label_search(logp, BLANK, labels, max_length=3, beam_size=len(candidates))
            assert best == expected
            assert_allclose(score, -ctc_loss(logp, expected, BLANK), atol=1e-9)
