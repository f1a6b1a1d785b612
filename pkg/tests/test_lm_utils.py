import itertools
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from lyric_transfer.lib import numerics as nx
from lyric_transfer.lib.errors import CheckpointMismatchError, EmptyCorpusError, InvalidTokenError
from lyric_transfer.lib.lm_utils import (
    CharLm,
    LmTrainSettings,
    init_lm_params,
    lm_score_step,
    lm_train,
    load_lm,
    perplexity,
    save_lm,
)
from lyric_transfer.lib.text_utils import encode


@pytest.fixture
def lm_arrays(tiny_lm_config, tiny_inventory, rng):
    return init_lm_params(tiny_lm_config, tiny_inventory.size, rng)


@pytest.fixture
def lm(lm_arrays, tiny_lm_config, tiny_inventory):
    return CharLm.from_arrays(lm_arrays, tiny_lm_config, tiny_inventory)


class TestScoring:
    def test_next_token_distribution(self, lm, tiny_inventory):
        logp, state = lm.start()
        probs = np.exp(logp.data)
        assert_allclose(probs.sum(), 1.0, rtol=1e-12)
        assert probs[tiny_inventory.blank_id] == 0.0
        assert probs[tiny_inventory.bos_id] == 0.0
        assert state.step == 1

    def test_score_matches_sequence_loss(self, lm, tiny_inventory):
        ids = encode("ABBA", tiny_inventory)
        loss, count = lm.sequence_loss(ids)
        assert count == 5
        assert_allclose(lm.score(ids), -loss.item(), rtol=1e-12)
        assert lm.score(ids, with_eos=False) > lm.score(ids)

    def test_probabilities_of_short_sequences_stay_below_one(self, lm, tiny_inventory):
        letters = [tiny_inventory.id_of("A"), tiny_inventory.id_of("B")]
        mass = sum(math.exp(lm.score(list(seq))) for n in range(4) for seq in itertools.product(letters, repeat=n))
        assert 0.0 < mass < 1.0

    def test_functional_step_matches_start(self, lm, tiny_inventory):
        logp, state = lm_score_step(lm, None, tiny_inventory.bos_id)
        expected, _ = lm.start()
        assert_allclose(logp, expected.data)
        follow, _ = lm_score_step(lm, state, tiny_inventory.id_of("A"))
        assert follow.shape == (tiny_inventory.size,)

    def test_rejects_blank_and_out_of_range(self, lm, tiny_inventory):
        with pytest.raises(InvalidTokenError):
            lm.step(lm.zero_state(), tiny_inventory.blank_id)
        with pytest.raises(InvalidTokenError):
            lm.step(lm.zero_state(), tiny_inventory.size)

    def test_gradient_through_output_layer(self, lm_arrays, tiny_lm_config, tiny_inventory):
        ids = encode("AB", tiny_inventory)
        name = "lm.out.weight"

        def objective(weight):
            params = {**nx.tensors_from(lm_arrays, requires_grad=False), name: weight}
            return CharLm(params, tiny_lm_config, tiny_inventory).sequence_loss(ids)[0]

        assert max(nx.check_gradients(objective, [lm_arrays[name]])) < 1e-4


class TestTraining:
    def test_perplexity_improves_on_repetitive_corpus(self, tiny_lm_config, tiny_inventory):
        lines = ["ABAB", "ABABAB", "AB", "ABABABAB"] * 3
        settings = LmTrainSettings(learning_rate=0.03, batch_size=4, epochs=6, seed=1)
        result = lm_train(lines, tiny_lm_config, settings, tiny_inventory)
        assert len(result.reports) == 6
        assert result.best_perplexity == min(r.dev_perplexity for r in result.reports)
        corpus = [encode(line, tiny_inventory) for line in lines]
        initial = init_lm_params(tiny_lm_config, tiny_inventory.size, nx.make_rng(1, "lm", "init"))
        assert perplexity(result.params, tiny_lm_config, tiny_inventory, corpus) < perplexity(
            initial, tiny_lm_config, tiny_inventory, corpus
        )

    def test_same_seed_same_parameters(self, tiny_lm_config, tiny_inventory):
        settings = LmTrainSettings(learning_rate=0.01, batch_size=2, epochs=1, seed=4)
        first = lm_train(["AB", "BA", "AAB"], tiny_lm_config, settings, tiny_inventory)
        second = lm_train(["AB", "BA", "AAB"], tiny_lm_config, settings, tiny_inventory)
        for name, value in first.params.items():
            assert np.array_equal(value, second.params[name])

    def test_empty_corpus(self, tiny_lm_config, tiny_inventory):
        with pytest.raises(EmptyCorpusError):
            lm_train(["", "   "], tiny_lm_config, LmTrainSettings(epochs=1), tiny_inventory)


class TestPersistence:
    def test_round_trip_scores_identically(self, lm, lm_arrays, tiny_lm_config, tiny_inventory, tmp_path):
        path = tmp_path / "lm.ckpt"
        save_lm(path, lm_arrays, tiny_lm_config, tiny_inventory)
        loaded = load_lm(path, tiny_inventory)
        ids = encode("BAB", tiny_inventory)
        assert loaded.score(ids) == lm.score(ids)

    def test_other_inventory_rejected(self, lm_arrays, tiny_lm_config, tiny_inventory, inventory, tmp_path):
        path = tmp_path / "lm.ckpt"
        save_lm(path, lm_arrays, tiny_lm_config, tiny_inventory)
        with pytest.raises(CheckpointMismatchError):
            load_lm(path, inventory)

    def test_model_checkpoint_rejected(self, lm_arrays, tiny_inventory, tmp_path):
        path = tmp_path / "model.ckpt"
        nx.save_checkpoint(path, lm_arrays, {"kind": "model", "inventory_hash": tiny_inventory.fingerprint()})
        with pytest.raises(CheckpointMismatchError):
            load_lm(path, tiny_inventory)
