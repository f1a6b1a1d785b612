import numpy as np
import pytest
from numpy.testing import assert_allclose

from lyric_transfer.lib import numerics as nx
from lyric_transfer.lib.config import LOG_FLOOR
from lyric_transfer.lib.errors import NonScalarRootError, ShapeMismatchError, ZeroNormVectorError
from lyric_transfer.lib.numerics import AdamState, Tensor, adam_step, check_gradients, make_rng

TOLERANCE = 1e-4


def weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar projection of a tensor so that every output element gets a distinct gradient."""
    return nx.sum(nx.mul(out, weights))


def assert_gradients(fn, inputs):
    errors = check_gradients(fn, inputs)
    assert max(errors) < TOLERANCE, errors


class TestTensorGraph:
    def test_shared_subexpression_accumulates(self):
        x = Tensor(3.0, requires_grad=True)
        y = x * x + x
        y.backward()
        assert_allclose(x.grad, 7.0)

    def test_non_scalar_root(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(NonScalarRootError):
            nx.backward(x * 2.0)

    def test_constants_get_no_gradient(self):
        x = Tensor(2.0, requires_grad=True)
        c = Tensor(5.0)
        grads = nx.backward(x * c)
        assert c not in grads
        assert_allclose(grads[x], 5.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            nx.add(np.ones((2, 3)), np.ones((3, 2)))
        with pytest.raises(ShapeMismatchError):
            nx.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_suffix_broadcast(self):
        out = nx.add(np.ones((4, 3)), np.arange(3.0))
        assert out.shape == (4, 3)


class TestGradients:
    @pytest.mark.parametrize("name", ["add", "sub", "mul", "div"])
    def test_binary(self, name, rng):
        op = getattr(nx, name)
        a = rng.normal(size=(3, 4))
        b = rng.uniform(0.5, 2.0, size=(3, 4))
        w = rng.normal(size=(3, 4))
        assert_gradients(lambda x, y: weighted(op(x, y), w), [a, b])

    @pytest.mark.parametrize("name", ["exp", "tanh", "sigmoid", "gelu", "neg"])
    def test_unary(self, name, rng):
        op = getattr(nx, name)
        w = rng.normal(size=(5,))
        for _ in range(10):
            assert_gradients(lambda x: weighted(op(x), w), [rng.normal(size=(5,))])

    def test_log_and_sqrt_on_positive_inputs(self, rng):
        w = rng.normal(size=(4,))
        x = rng.uniform(0.2, 3.0, size=(4,))
        assert_gradients(lambda t: weighted(nx.log(t), w), [x])
        assert_gradients(lambda t: weighted(nx.sqrt(t), w), [x])

    def test_leaky_relu_away_from_zero(self, rng):
        x = np.array([-2.0, -0.5, 0.7, 1.5])
        w = rng.normal(size=(4,))
        assert_gradients(lambda t: weighted(nx.leaky_relu(t, 0.1), w), [x])

    def test_matmul_shapes(self, rng):
        w = rng.normal(size=(3, 2))
        assert_gradients(lambda a, b: weighted(nx.matmul(a, b), w), [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))])
        v = rng.normal(size=(2,))
        assert_gradients(lambda a, b: weighted(nx.matmul(a, b), v), [rng.normal(size=(4,)), rng.normal(size=(4, 2))])

    @pytest.mark.parametrize("name", ["softmax", "log_softmax"])
    def test_softmax_family(self, name, rng):
        op = getattr(nx, name)
        w = rng.normal(size=(3, 5))
        for _ in range(10):
            assert_gradients(lambda x: weighted(op(x, axis=-1), w), [rng.normal(size=(3, 5))])

    def test_logsumexp(self, rng):
        w = rng.normal(size=(3,))
        assert_gradients(lambda x: weighted(nx.logsumexp(x, axis=-1), w), [rng.normal(size=(3, 4))])

    def test_layer_norm(self, rng):
        w = rng.normal(size=(2, 6))
        assert_gradients(
            lambda x, g, b: weighted(nx.layer_norm(x, g, b), w),
            [rng.normal(size=(2, 6)), rng.normal(size=(6,)), rng.normal(size=(6,))],
        )

    def test_reductions_and_shapes(self, rng):
        x = rng.normal(size=(3, 4))
        w_mean = rng.normal(size=(4,))
        assert_gradients(lambda t: weighted(nx.mean(t, axis=0), w_mean), [x])
        w = rng.normal(size=(4, 3))
        assert_gradients(lambda t: weighted(nx.transpose(t), w), [x])
        w2 = rng.normal(size=(2, 6))
        assert_gradients(lambda t: weighted(nx.reshape(t, (2, 6)), w2), [x])

    def test_indexing_and_concat(self, rng):
        x = rng.normal(size=(5, 3))
        w = rng.normal(size=(4, 3))
        assert_gradients(lambda t: weighted(nx.getitem(t, np.array([0, 2, 2, 4])), w), [x])
        w2 = rng.normal(size=(7, 3))
        assert_gradients(lambda a, b: weighted(nx.concat([a, b], axis=0), w2), [x, rng.normal(size=(2, 3))])

    def test_conv1d(self, rng):
        w_out = rng.normal(size=(4, 3))
        assert_gradients(
            lambda x, k, b: weighted(nx.conv1d(x, k, b, stride=2, padding=1), w_out),
            [rng.normal(size=(8, 2)), rng.normal(size=(3, 2, 3)), rng.normal(size=(3,))],
        )

    def test_where_rows(self, rng):
        mask = np.array([True, False, True, False])
        w = rng.normal(size=(4, 3))
        assert_gradients(lambda x, r: weighted(nx.where_rows(x, mask, r), w), [rng.normal(size=(4, 3)), rng.normal(size=(3,))])

    def test_cosine_similarity(self, rng):
        w = rng.normal(size=(2, 3))
        for _ in range(10):
            assert_gradients(
                lambda c, q: weighted(nx.cosine_similarity(c, q), w),
                [rng.normal(size=(2, 4)), rng.normal(size=(2, 3, 4))],
            )

    def test_recurrent_cells(self, rng):
        hidden, size_in = 3, 2
        w = rng.normal(size=(hidden,))
        assert_gradients(
            lambda x, h, wi, wh, bi, bh: weighted(nx.gru_cell(x, h, wi, wh, bi, bh), w),
            [rng.normal(size=(size_in,)), rng.normal(size=(hidden,)), rng.normal(size=(size_in, 3 * hidden)),
             rng.normal(size=(hidden, 3 * hidden)), rng.normal(size=(3 * hidden,)), rng.normal(size=(3 * hidden,))],
        )
        assert_gradients(
            lambda x, h, c, wi, wh, b: weighted(nx.lstm_cell(x, h, c, wi, wh, b)[0], w),
            [rng.normal(size=(size_in,)), rng.normal(size=(hidden,)), rng.normal(size=(hidden,)),
             rng.normal(size=(size_in, 4 * hidden)), rng.normal(size=(hidden, 4 * hidden)), rng.normal(size=(4 * hidden,))],
        )


class TestLogDomain:
    def test_log_of_zero_is_floored(self):
        out = nx.log(np.array([0.0, 1.0]))
        assert out.data[0] == LOG_FLOOR
        assert np.all(np.isfinite(out.data))

    def test_logsumexp_of_floor_row(self):
        out = nx.logsumexp(np.full((1, 3), LOG_FLOOR), axis=-1)
        assert out.data[0] >= LOG_FLOOR
        assert np.isfinite(out.data[0])

    def test_log_softmax_rows_sum_to_one(self, rng):
        out = nx.log_softmax(rng.normal(size=(4, 6)) * 30.0)
        assert_allclose(np.exp(out.data).sum(axis=1), 1.0, rtol=1e-12)

    def test_zero_norm_cosine(self):
        with pytest.raises(ZeroNormVectorError):
            nx.cosine_similarity(np.zeros((1, 2)), np.ones((1, 2, 2)))


class TestAdam:
    def test_zero_learning_rate_keeps_parameters(self, rng):
        params = {"w": rng.normal(size=(3,))}
        new, state = adam_step(params, {"w": np.ones(3)}, AdamState(), 0.0)
        assert np.array_equal(new["w"], params["w"])
        assert state.step == 1

    def test_first_step_moves_by_learning_rate(self):
        params = {"w": np.array([1.0, -1.0])}
        new, _ = adam_step(params, {"w": np.array([0.5, -2.0])}, AdamState(), 0.1)
        assert_allclose(new["w"], [0.9, -0.9], rtol=1e-6)

    def test_per_name_learning_rates(self):
        params = {"encoder.w": np.zeros(1), "head.w": np.zeros(1)}
        grads = {"encoder.w": np.ones(1), "head.w": np.ones(1)}
        new, _ = adam_step(params, grads, AdamState(), {"encoder.w": 0.0, "head.w": 0.01})
        assert new["encoder.w"][0] == 0.0
        assert new["head.w"][0] < 0.0


class TestRandomStreams:
    def test_same_stream_same_values(self):
        assert np.array_equal(make_rng(3, "a", "b").normal(size=5), make_rng(3, "a", "b").normal(size=5))

    def test_streams_differ(self):
        assert not np.array_equal(make_rng(3, "a").normal(size=5), make_rng(3, "b").normal(size=5))
        assert not np.array_equal(make_rng(3, "a").normal(size=5), make_rng(4, "a").normal(size=5))


class TestCheckpoints:
    def test_round_trip_is_bit_exact(self, rng, tmp_path):
        params = {"b": rng.normal(size=(2, 3)), "a": rng.normal(size=(4,)), "s": np.array(1.5)}
        path = tmp_path / "model.ckpt"
        nx.save_checkpoint(path, params, {"kind": "test"})
        loaded, meta = nx.load_checkpoint(path)
        assert meta["kind"] == "test"
        assert meta["format_version"] == 1
        for name, value in params.items():
            assert np.array_equal(loaded[name], value)
        assert path.read_bytes()[:6] == b"LTCKPT"

    def test_same_params_same_bytes(self, rng, tmp_path):
        params = {"w": rng.normal(size=(3, 3))}
        nx.save_checkpoint(tmp_path / "one.ckpt", params, {})
        nx.save_checkpoint(tmp_path / "two.ckpt", dict(reversed(list(params.items()))), {})
        assert (tmp_path / "one.ckpt").read_bytes() == (tmp_path / "two.ckpt").read_bytes()

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError):
            nx.load_checkpoint(path)
