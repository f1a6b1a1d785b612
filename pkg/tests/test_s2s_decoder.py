import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from lyric_transfer.lib import numerics as nx
from lyric_transfer.lib.errors import EmptyTargetError, StateMismatchError
from lyric_transfer.lib.s2s_decoder import (
    AttentionState,
    DecoderConfig,
    DecoderContext,
    attention_weights,
    decoder_step,
    init_decoder_params,
    initial_state,
    output_mask,
    s2s_loss,
    sequence_log_probability,
)

FEATURE_DIM = 5


@pytest.fixture
def decoder_params(tiny_decoder_config, tiny_inventory, rng):
    arrays = init_decoder_params(tiny_decoder_config, FEATURE_DIM, tiny_inventory.size, rng)
    return {name: nx.Tensor(value) for name, value in arrays.items()}


@pytest.fixture
def context(decoder_params, rng):
    return DecoderContext(rng.normal(size=(6, FEATURE_DIM)), decoder_params)


class TestStep:
    def test_distribution_over_emittable_tokens(self, context, tiny_decoder_config, tiny_inventory):
        state = initial_state(context, tiny_decoder_config)
        logp, new_state = decoder_step(context, tiny_inventory.bos_id, state, tiny_decoder_config, output_mask(tiny_inventory))
        probs = np.exp(logp.data)
        assert_allclose(probs.sum(), 1.0, rtol=1e-12)
        assert probs[tiny_inventory.blank_id] == 0.0
        assert probs[tiny_inventory.bos_id] == 0.0
        assert_allclose(new_state.weights.data.sum(), 1.0, rtol=1e-12)
        assert new_state.step == 1

    def test_padded_frames_get_no_attention(self, decoder_params, tiny_decoder_config, rng):
        valid = np.array([True, True, True, False, False])
        context = DecoderContext(rng.normal(size=(5, FEATURE_DIM)), decoder_params, valid=valid)
        state = initial_state(context, tiny_decoder_config)
        assert_allclose(state.weights.data[:3], 1 / 3)
        weights = attention_weights(context, state, tiny_decoder_config).data
        assert np.all(weights[3:] < 1e-12)
        assert_allclose(weights.sum(), 1.0, rtol=1e-12)

    def test_state_from_another_utterance(self, context, tiny_decoder_config, tiny_inventory):
        stale = AttentionState(nx.Tensor(np.full(4, 0.25)), nx.Tensor(np.zeros(tiny_decoder_config.hidden_dim)))
        with pytest.raises(StateMismatchError):
            decoder_step(context, tiny_inventory.bos_id, stale, tiny_decoder_config, output_mask(tiny_inventory))

    def test_location_term_changes_weights(self, context, tiny_decoder_config, tiny_inventory):
        mask = output_mask(tiny_inventory)
        _, state = decoder_step(context, tiny_inventory.bos_id, initial_state(context, tiny_decoder_config),
                                tiny_decoder_config, mask)
        with_location = attention_weights(context, state, tiny_decoder_config, use_location=True).data
        content_only = attention_weights(context, state, tiny_decoder_config, use_location=False).data
        assert not np.allclose(with_location, content_only)

    @pytest.mark.parametrize("zeroed", ["att.loc_conv", "att.w_loc"])
    def test_zero_location_weights_give_content_attention(self, decoder_params, tiny_decoder_config, tiny_inventory,
                                                          rng, zeroed):
        params = {name: nx.Tensor(np.zeros_like(value.data)) if name.endswith(zeroed) else value
                  for name, value in decoder_params.items()}
        context = DecoderContext(rng.normal(size=(6, FEATURE_DIM)), params)
        state = initial_state(context, tiny_decoder_config)
        for token in (tiny_inventory.bos_id, tiny_inventory.id_of("A"), tiny_inventory.id_of("B")):
            _, state = decoder_step(context, token, state, tiny_decoder_config, output_mask(tiny_inventory))
            with_location = attention_weights(context, state, tiny_decoder_config, use_location=True).data
            content_only = attention_weights(context, state, tiny_decoder_config, use_location=False).data
            assert_allclose(with_location, content_only, rtol=0, atol=1e-15)

    def test_even_location_width_rejected(self):
        with pytest.raises(ValueError):
            DecoderConfig(location_width=4)


class TestLoss:
    def test_sum_equals_negated_sequence_log_probability(self, context, tiny_decoder_config, tiny_inventory):
        a, b = tiny_inventory.id_of("A"), tiny_inventory.id_of("B")
        loss = s2s_loss(context, [a, b, a], tiny_decoder_config, tiny_inventory, reduction="sum").item()
        expected = -sequence_log_probability(context, [a, b, a, tiny_inventory.eos_id], tiny_decoder_config, tiny_inventory)
        assert_allclose(loss, expected, rtol=1e-12)
        assert loss > 0

    def test_mean_divides_by_steps_including_eos(self, context, tiny_decoder_config, tiny_inventory):
        target = [tiny_inventory.id_of("A"), tiny_inventory.eos_id]
        total = s2s_loss(context, target, tiny_decoder_config, tiny_inventory, reduction="sum").item()
        mean = s2s_loss(context, target, tiny_decoder_config, tiny_inventory, reduction="mean").item()
        assert_allclose(mean, total / 2, rtol=1e-12)

    def test_empty_target(self, context, tiny_decoder_config, tiny_inventory):
        with pytest.raises(EmptyTargetError):
            s2s_loss(context, [], tiny_decoder_config, tiny_inventory)

    def test_gradient_through_features(self, decoder_params, tiny_decoder_config, tiny_inventory, rng):
        target = [tiny_inventory.id_of("B"), tiny_inventory.id_of("A")]

        def objective(features):
            return s2s_loss(DecoderContext(features, decoder_params), target, tiny_decoder_config, tiny_inventory)

        for _ in range(3):
            assert max(nx.check_gradients(objective, [rng.normal(size=(4, FEATURE_DIM))])) < 1e-4

    def test_gradient_through_output_layer(self, decoder_params, tiny_decoder_config, tiny_inventory, rng):
        features = rng.normal(size=(4, FEATURE_DIM))
        name = "head.dec.out.weight"

        def objective(weight):
            params = {**decoder_params, name: weight}
            return s2s_loss(DecoderContext(features, params), [tiny_inventory.id_of("A")], tiny_decoder_config, tiny_inventory)

        errors = nx.check_gradients(objective, [decoder_params[name].data])
        assert max(errors) < 1e-4
        assert math.isfinite(objective(decoder_params[name]).item())
