import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from lyric_transfer.lib import numerics as nx
from lyric_transfer.lib.encoder import MaskingPolicy, extract_latents, init_encoder_params
from lyric_transfer.lib.errors import DimensionMismatchError, NotEnoughFramesError, ZeroNormVectorError
from lyric_transfer.lib.ssl_objective import (
    Codebook,
    SslConfig,
    codebook_diversity,
    contrastive_loss,
    init_ssl_params,
    kmeans_codebook,
    quantize,
    sample_distractors,
    ssl_utterance_loss,
)


class TestCodebook:
    def test_rejects_duplicates_and_single_codeword(self):
        with pytest.raises(ValueError):
            Codebook(np.array([[1.0, 0.0], [1.0, 0.0]]))
        with pytest.raises(ValueError):
            Codebook(np.array([[1.0, 0.0]]))

    def test_quantize_picks_nearest_by_cosine(self):
        book = Codebook(np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]))
        frames = np.array([[5.0, 1.0], [0.1, 3.0], [-2.0, -0.5]])
        targets, indices = quantize(frames, book)
        assert indices.tolist() == [0, 1, 2]
        assert_allclose(targets, book.entries[[0, 1, 2]])

    def test_quantize_ties_go_to_lowest_index(self):
        book = Codebook(np.array([[1.0, 0.0], [0.0, 1.0]]))
        _, indices = quantize(np.array([[1.0, 1.0]]), book)
        assert indices.tolist() == [0]

    def test_quantize_errors(self):
        book = Codebook(np.eye(3))
        with pytest.raises(DimensionMismatchError):
            quantize(np.ones((2, 2)), book)
        with pytest.raises(ZeroNormVectorError):
            quantize(np.zeros((1, 3)), book)

    def test_kmeans_returns_unit_codewords(self, rng):
        centres = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        vectors = np.concatenate([c + 0.05 * rng.normal(size=(20, 3)) for c in centres])
        book = kmeans_codebook(vectors, 3, rng)
        assert book.size == 3
        assert_allclose(np.linalg.norm(book.entries, axis=1), 1.0)

    def test_kmeans_needs_enough_distinct_vectors(self, rng):
        with pytest.raises(ValueError):
            kmeans_codebook(np.ones((5, 2)), 2, rng)


class TestDistractors:
    def test_never_samples_own_frame(self, rng):
        targets = rng.normal(size=(6, 4))
        sample = sample_distractors(targets, 3, rng)
        assert sample.candidates.shape == (6, 4, 4)
        for i, picks in enumerate(sample.picks):
            assert i not in picks
            assert len(set(picks.tolist())) == 3
        assert_allclose(sample.candidates[:, -1], targets)
        assert not sample.clamped

    def test_count_is_clamped_to_available_frames(self, rng):
        sample = sample_distractors(rng.normal(size=(3, 2)), 100, rng)
        assert sample.picks.shape == (3, 2)
        assert sample.clamped
        assert sample.requested == 100

    def test_single_masked_frame(self, rng):
        with pytest.raises(NotEnoughFramesError):
            sample_distractors(rng.normal(size=(1, 2)), 5, rng)

    def test_distractors_are_uniform_over_other_frames(self):
        frames, draws = 5, 10_000
        rng = np.random.default_rng(7)
        targets = rng.normal(size=(frames, 3))
        offsets = np.zeros(frames, dtype=np.int64)
        for _ in range(draws):
            picks = sample_distractors(targets, 1, rng).picks[:, 0]
            np.add.at(offsets, (picks - np.arange(frames)) % frames, 1)
        assert offsets[0] == 0
        trials, p = draws * frames, 1.0 / (frames - 1)
        sigma = math.sqrt(trials * p * (1.0 - p))
        assert np.all(np.abs(offsets[1:] - trials * p) <= 3.0 * sigma)


class TestContrastiveLoss:
    def test_hand_value(self):
        context = np.array([[1.0, 0.0, 0.0]])
        candidates = np.array([[[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [2.0, 0.0, 0.0]]])
        loss = contrastive_loss(context, candidates, temperature=0.1).item()
        assert_allclose(loss, math.log(math.exp(10.0) + 2.0) - 10.0, rtol=1e-12)

    def test_gradient(self, rng):
        for _ in range(10):
            errors = nx.check_gradients(
                lambda c, q: contrastive_loss(c, q, temperature=0.5),
                [rng.normal(size=(3, 4)), rng.normal(size=(3, 3, 4))],
            )
            assert max(errors) < 1e-4

    def test_temperature_must_be_positive(self):
        with pytest.raises(ValueError):
            contrastive_loss(np.ones((1, 2)), np.ones((1, 2, 2)), temperature=0.0)

    def test_positive_rescaling_leaves_loss_unchanged(self, rng):
        context, candidates = rng.normal(size=(4, 5)), rng.normal(size=(4, 3, 5))
        reference = contrastive_loss(context, candidates, temperature=0.1).item()
        for _ in range(10):
            scaled_context = context * rng.uniform(0.01, 100.0, size=(4, 1))
            scaled_candidates = candidates * rng.uniform(0.01, 100.0, size=(4, 3, 1))
            loss = contrastive_loss(scaled_context, scaled_candidates, temperature=0.1).item()
            assert abs(loss - reference) <= 1e-10


class TestUtteranceLoss:
    def test_finite_loss_over_masked_frames(self, tiny_encoder_config, rng):
        params = {**init_encoder_params(tiny_encoder_config, rng), **init_ssl_params(16, rng)}
        codebook = Codebook(rng.normal(size=(8, 16)))
        result = ssl_utterance_loss(
            rng.normal(size=(20, 16)),
            tiny_encoder_config,
            params,
            codebook,
            MaskingPolicy(span=3, start_probability=0.3, min_spans=2),
            SslConfig(distractors=4),
            rng,
        )
        assert math.isfinite(result.loss.item())
        assert result.masked_frames >= 3
        assert result.distractors == min(4, result.masked_frames - 1)

    def test_too_few_masked_frames(self, tiny_encoder_config, rng):
        params = {**init_encoder_params(tiny_encoder_config, rng), **init_ssl_params(16, rng)}
        with pytest.raises(NotEnoughFramesError):
            ssl_utterance_loss(
                rng.normal(size=(2, 16)),
                tiny_encoder_config,
                params,
                Codebook(rng.normal(size=(4, 16))),
                MaskingPolicy(span=4, start_probability=1.0),
                SslConfig(),
                rng,
            )


class TestCodebookDiversity:
    def test_even_usage_costs_nothing(self):
        book = Codebook(np.eye(4))
        penalty = codebook_diversity(book, temperature=0.01)(np.eye(4) * 3.0)
        assert_allclose(penalty.item(), 0.0, atol=1e-9)

    def test_single_codeword_usage_costs_most(self):
        book = Codebook(np.eye(4))
        frames = np.tile([2.0, 0.0, 0.0, 0.0], (6, 1))
        assert_allclose(codebook_diversity(book, temperature=0.01)(frames).item(), 0.75, atol=1e-9)

    def test_gradient(self, rng):
        book = Codebook(rng.normal(size=(5, 4)))
        errors = nx.check_gradients(codebook_diversity(book, temperature=0.5), [rng.normal(size=(6, 4))])
        assert max(errors) < 1e-4

    def test_weighted_into_utterance_loss(self, tiny_encoder_config, rng):
        params = {**init_encoder_params(tiny_encoder_config, rng), **init_ssl_params(16, rng)}
        codebook = Codebook(rng.normal(size=(8, 16)))
        x = rng.normal(size=(20, 16))
        masking = MaskingPolicy(span=3, start_probability=0.3, min_spans=2)
        diversity = codebook_diversity(codebook)

        def loss(weight):
            cfg = SslConfig(distractors=4, diversity_weight=weight)
            return ssl_utterance_loss(x, tiny_encoder_config, params, codebook, masking, cfg,
                                      np.random.default_rng(3), diversity).loss.item()

        z = extract_latents(x, tiny_encoder_config, params)
        assert_allclose(loss(0.5) - loss(0.0), 0.5 * diversity(z).item(), rtol=1e-7)
