import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from finegrain import tensor_core as tc
from finegrain.exceptions import ConfigurationError, ContractError, DimensionError
from finegrain.params import Adam, ParamStore, read_checkpoint, save_checkpoint
from finegrain.tensor_core import Tape, Tensor, numerical_gradient, relative_error


def leaf(arr):
    return Tensor(np.array(arr, dtype=float), requires_grad=True)


def check_grads(build, leaves, eps=1e-5, tol=1e-6, seed=0):
    """Compare tape gradients of sum(build() * w) with central differences."""
    probe = np.random.default_rng(seed + 100)
    out_shape = build().shape
    w = probe.normal(size=out_shape)

    def loss_value():
        return float((build().data * w).sum())

    for t in leaves:
        t.grad = None
    with Tape() as tape:
        loss = _weighted(build(), w)
    tape.backward(loss)
    for t in leaves:
        numeric = numerical_gradient(loss_value, t, eps=eps)
        assert relative_error(t.grad, numeric) < tol, t


def _weighted(out, w):
    # random fixed projection to a scalar, so every output element matters
    flat = tc.reshape(out, (1, -1))
    return tc.reshape(tc.linear(flat, Tensor(w.reshape(-1, 1))), ())


class TestMatmul:
    def test_identity(self):
        out = tc.matmul(Tensor(np.eye(2)), Tensor([[1, 2], [3, 4]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_row_times_column(self):
        out = tc.matmul(Tensor([[1, 2]]), Tensor([[3], [4]]))
        np.testing.assert_array_equal(out.data, [[11]])

    def test_gradient(self):
        rng = np.random.default_rng(1)
        a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
        check_grads(lambda: tc.matmul(a, b), [a, b])

    def test_batched_broadcast_gradient(self):
        rng = np.random.default_rng(2)
        a, b = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(4, 2)))
        check_grads(lambda: tc.matmul(a, b), [a, b])

    def test_shape_mismatch_names_both(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            tc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestConv1d:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(1, 5))
        out = tc.conv1d(Tensor(x), Tensor([[[1.0]]]), Tensor([0.0]))
        np.testing.assert_array_equal(out.data, x)

    def test_hand_sum(self):
        out = tc.conv1d(Tensor([[1.0, 2.0, 3.0]]), Tensor(np.ones((1, 1, 3))), Tensor([0.0]), padding=1)
        np.testing.assert_array_equal(out.data, [[3, 6, 5]])

    def test_cross_correlation_not_flipped(self):
        out = tc.conv1d(Tensor([[1.0, 2.0, 3.0]]), Tensor([[[1.0, 0.0, 0.0]]]), None, padding=1)
        np.testing.assert_array_equal(out.data, [[0, 1, 2]])

    def test_output_length(self):
        out = tc.conv1d(Tensor(np.ones((2, 3, 9))), Tensor(np.ones((4, 3, 3))), None, padding=0)
        assert out.shape == (2, 4, 7)

    def test_gradient(self):
        rng = np.random.default_rng(3)
        x = leaf(rng.normal(size=(2, 7)))
        w = leaf(rng.normal(size=(3, 2, 3)))
        b = leaf(rng.normal(size=3))
        check_grads(lambda: tc.conv1d(x, w, b, padding=1), [x, w, b])

    def test_batched_gradient(self):
        rng = np.random.default_rng(4)
        x = leaf(rng.normal(size=(3, 2, 6)))
        w = leaf(rng.normal(size=(4, 2, 1)))
        b = leaf(rng.normal(size=4))
        check_grads(lambda: tc.conv1d(x, w, b), [x, w, b])

    def test_kernel_too_long(self):
        with pytest.raises(ConfigurationError):
            tc.conv1d(Tensor(np.ones((1, 2))), Tensor(np.ones((1, 1, 5))), None, padding=1)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            tc.conv1d(Tensor(np.ones((2, 4))), Tensor(np.ones((1, 3, 1))))


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(tc.softmax(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_constant(self):
        np.testing.assert_allclose(tc.softmax(Tensor([[7.0] * 4])).data, [[0.25] * 4])

    def test_no_overflow(self):
        out = tc.softmax(Tensor([[1000.0, 0.0]])).data
        assert np.isfinite(out).all()
        assert out[0, 0] == pytest.approx(1.0) and out[0, 1] == pytest.approx(0.0)

    def test_mask_gives_exact_zero(self):
        out = tc.softmax(Tensor([[1.0, 2.0, 3.0]]), mask=np.array([[True, True, False]])).data
        assert out[0, 2] == 0.0
        assert out.sum() == pytest.approx(1.0, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=16), st.floats(-100, 100))
    def test_sum_and_shift_invariance(self, xs, c):
        x = np.array([xs])
        y = tc.softmax(Tensor(x)).data
        assert abs(y.sum() - 1.0) < 1e-12
        np.testing.assert_allclose(tc.softmax(Tensor(x + c)).data, y, atol=1e-9)

    def test_gradient(self):
        rng = np.random.default_rng(5)
        x = leaf(rng.normal(size=(3, 5)))
        check_grads(lambda: tc.softmax(x), [x])

    def test_masked_gradient(self):
        rng = np.random.default_rng(6)
        x = leaf(rng.normal(size=(2, 5)))
        mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=bool)
        check_grads(lambda: tc.softmax(x, mask=mask), [x])


class TestNormalize:
    def _affine(self, n):
        return Tensor(np.ones(n)), Tensor(np.zeros(n))

    def test_constant_input_gives_zero(self):
        g, b = self._affine(3)
        out = tc.normalize(Tensor(np.full((2, 3, 4), 5.0)), "batch", g, b,
                           running_mean=np.zeros(3), running_var=np.ones(3), train=True)
        assert np.all(out.data == 0.0)
        g, b = self._affine(4)
        out = tc.normalize(Tensor(np.full((2, 4), 5.0)), "layer", g, b, axis=-1)
        assert np.all(out.data == 0.0)

    def test_layer_norm_hand_value(self):
        g, b = self._affine(3)
        out = tc.layer_norm(Tensor([[1.0, 2.0, 3.0]]), g, b, axis=-1)
        np.testing.assert_allclose(out.data, [[-1.2247, 0.0, 1.2247]], atol=1e-3)

    def test_batch_norm_training_moments(self):
        # variance ~100 so the eps term perturbs the unit variance by < 1e-6
        x = np.random.default_rng(7).normal(3.0, 10.0, size=(8, 4, 16))
        g, b = self._affine(4)
        out = tc.batch_norm(Tensor(x), g, b, np.zeros(4), np.ones(4), train=True).data
        np.testing.assert_allclose(out.mean(axis=(0, 2)), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.var(axis=(0, 2)), 1.0, atol=1e-6)

    def test_layer_norm_moments(self):
        x = np.random.default_rng(8).normal(-2.0, 10.0, size=(5, 6, 3))
        g, b = self._affine(6)
        out = tc.layer_norm(Tensor(x), g, b, axis=1).data
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-6)

    def test_running_stats_update(self):
        x = np.random.default_rng(9).normal(size=(4, 2, 5))
        rm, rv = np.zeros(2), np.ones(2)
        g, b = self._affine(2)
        tc.batch_norm(Tensor(x), g, b, rm, rv, train=True)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2)))
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2), ddof=1))

    def test_eval_uses_running_stats(self):
        g, b = self._affine(1)
        out = tc.batch_norm(Tensor(np.full((1, 1, 2), 3.0)), g, b, np.array([1.0]), np.array([4.0]), train=False)
        np.testing.assert_allclose(out.data, 2.0 / np.sqrt(4.0 + 1e-5))

    def test_layer_gradient(self):
        rng = np.random.default_rng(10)
        x = leaf(rng.normal(size=(4, 6)))
        g, b = leaf(rng.normal(size=6)), leaf(rng.normal(size=6))
        check_grads(lambda: tc.layer_norm(x, g, b, axis=-1), [x, g, b], tol=1e-5)

    def test_batch_gradient(self):
        rng = np.random.default_rng(11)
        x = leaf(rng.normal(size=(4, 3, 6)))
        g, b = leaf(rng.normal(size=3)), leaf(rng.normal(size=3))
        check_grads(lambda: tc.batch_norm(x, g, b, np.zeros(3), np.ones(3), train=True), [x, g, b], tol=1e-5)

    def test_unknown_mode(self):
        with pytest.raises(ConfigurationError):
            tc.normalize(Tensor([[1.0]]), "group", Tensor([1.0]), Tensor([0.0]))


class TestPointwiseAndShape:
    def test_relu(self):
        np.testing.assert_array_equal(tc.pointwise_and_shape("relu", Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_relu_gradient(self):
        x = leaf([[-1.5, 0.3, 2.0, -0.2]])
        check_grads(lambda: tc.relu(x), [x])

    def test_max_pool_routing(self):
        x = leaf([[1.0, 5.0, 3.0], [2.0, 2.0, 2.0]])
        with Tape() as tape:
            out = tc.max_pool_length(x)
            loss = tc.sum_all(out)
        np.testing.assert_array_equal(out.data, [[5, 2]])
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [[0, 1, 0], [1, 0, 0]])

    def test_max_pool_gradient(self):
        x = leaf(np.random.default_rng(12).normal(size=(2, 3, 5)))
        check_grads(lambda: tc.max_pool_length(x), [x])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 10_000))
    def test_max_pool_mass_conserved(self, c, n, seed):
        rng = np.random.default_rng(seed)
        x = leaf(rng.integers(-3, 3, size=(c, n)).astype(float))
        upstream = rng.normal(size=(1, c))
        with Tape() as tape:
            loss = tc.reshape(tc.linear(tc.max_pool_length(x), Tensor(upstream.T)), ())
        tape.backward(loss)
        np.testing.assert_allclose(x.grad.sum(axis=1), upstream[0])
        assert ((x.grad != 0).sum(axis=1) <= 1).all()
        first = x.data.argmax(axis=1)
        for ch in range(c):
            if upstream[0, ch] != 0:
                assert x.grad[ch, first[ch]] == upstream[0, ch]

    def test_replicate(self):
        x = leaf([[2.0], [3.0]])
        with Tape() as tape:
            out = tc.replicate(x, 3, axis=-1)
            loss = tc.sum_all(out)
        np.testing.assert_array_equal(out.data, [[2, 2, 2], [3, 3, 3]])
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [[3], [3]])

    def test_replicate_gradient(self):
        x = leaf(np.random.default_rng(13).normal(size=(2, 1, 4)))
        check_grads(lambda: tc.replicate(x, 5, axis=1), [x])

    def test_concat_gradient(self):
        rng = np.random.default_rng(14)
        a, b = leaf(rng.normal(size=(2, 1, 3))), leaf(rng.normal(size=(2, 1, 4)))
        check_grads(lambda: tc.concat([a, b], axis=2), [a, b])

    def test_add_mismatch(self):
        with pytest.raises(DimensionError):
            tc.add(Tensor(np.ones(3)), Tensor(np.ones(4)))

    def test_dropout_eval_and_zero_rate_identity(self):
        x = Tensor(np.random.default_rng(15).normal(size=(3, 4)))
        assert tc.dropout(x, 0.5, train=False).data is x.data
        out = tc.dropout(x, 0.0, train=True, rng=np.random.default_rng(0))
        np.testing.assert_array_equal(out.data, x.data)

    def test_dropout_inverted_scaling(self):
        x = Tensor(np.ones((200, 50)))
        out = tc.dropout(x, 0.25, train=True, rng=np.random.default_rng(0)).data
        assert set(np.unique(out)) <= {0.0, 1.0 / 0.75}
        assert abs(out.mean() - 1.0) < 0.02

    def test_dropout_rate_one_rejected(self):
        with pytest.raises(ConfigurationError):
            tc.dropout(Tensor(np.ones(2)), 1.0, train=True, rng=np.random.default_rng(0))

    def test_transpose_pad_crop_gradients(self):
        rng = np.random.default_rng(16)
        x = leaf(rng.normal(size=(2, 3, 4)))
        check_grads(lambda: tc.transpose(x), [x])
        check_grads(lambda: tc.pad_length(x, 7), [x])
        check_grads(lambda: tc.crop_length(x, 2), [x])

    def test_embedding_lookup_pad_row_frozen(self):
        table = leaf(np.vstack([np.zeros(3), np.eye(3)]))
        ids = np.array([[2, 3, 0, 0]])
        with Tape() as tape:
            out = tc.embedding_lookup(table, ids)
            loss = tc.sum_all(out)
        np.testing.assert_array_equal(out.data[0][:, 0], [0, 1, 0])
        np.testing.assert_array_equal(out.data[0][:, 2:], 0)
        tape.backward(loss)
        np.testing.assert_array_equal(table.grad[0], 0)
        np.testing.assert_array_equal(table.grad[2], 1)
        np.testing.assert_array_equal(table.grad[1], 0)


class TestBCE:
    def test_zero_logits(self):
        loss = tc.bce_with_logits(Tensor(np.zeros((2, 4))), np.array([[1, 0, 1, 0], [0, 0, 1, 1]]))
        assert float(loss.data) == pytest.approx(np.log(2.0))

    def test_saturation(self):
        loss = tc.bce_with_logits(Tensor(np.full((1, 4), 20.0)), np.ones((1, 4)))
        assert float(loss.data) < 1e-8

    def test_extreme_logits_finite(self):
        loss = tc.bce_with_logits(Tensor([[1e4, -1e4, 1e4, -1e4]]), np.array([[0, 1, 1, 0]]))
        assert np.isfinite(loss.data)

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(17)
        z = rng.normal(size=(3, 4))
        t = rng.integers(0, 2, size=(3, 4))
        s = 1 / (1 + np.exp(-z))
        direct = -(t * np.log(s) + (1 - t) * np.log(1 - s)).mean()
        assert float(tc.bce_with_logits(Tensor(z), t).data) == pytest.approx(direct, rel=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(18)
        z = leaf(rng.normal(size=(3, 4)))
        t = rng.integers(0, 2, size=(3, 4))
        with Tape() as tape:
            loss = tc.bce_with_logits(z, t)
        tape.backward(loss)
        numeric = numerical_gradient(lambda: float(tc.bce_with_logits(z, t).data), z)
        assert relative_error(z.grad, numeric) < 1e-5


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf(np.arange(6.0).reshape(2, 3))
        with Tape() as tape:
            loss = tc.sum_all(x)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_non_scalar_rejected(self):
        x = leaf(np.ones((2, 2)))
        with Tape() as tape:
            y = tc.relu(x)
        with pytest.raises(ContractError):
            tape.backward(y)

    def test_accumulates(self):
        rng = np.random.default_rng(19)
        a, b = leaf(rng.normal(size=(2, 3))), leaf(rng.normal(size=(3, 1)))
        with Tape() as tape:
            loss = tc.sum_all(tc.matmul(a, b))
        tape.backward(loss)
        first = a.grad.copy()
        tape.backward(loss)
        np.testing.assert_array_equal(a.grad, 2 * first)

    def test_tape_is_topological(self):
        x = leaf([[1.0, -2.0]])
        with Tape() as tape:
            y = tc.relu(x)
            z = tc.add(y, y)
            tc.sum_all(z)
        seen = {id(x)}
        for node in tape.nodes:
            assert all(id(t) in seen for t in node.inputs)
            seen.add(id(node.output))

    def test_no_tape_no_recording(self):
        x = leaf([1.0])
        with Tape() as tape:
            pass
        tc.relu(x)
        assert tape.nodes == []

    def test_forward_bit_identical(self):
        def run():
            rng = np.random.default_rng(3)
            x = Tensor(rng.normal(size=(2, 3, 8)))
            w = Tensor(rng.normal(size=(4, 3, 3)))
            h = tc.conv1d(x, w, None, padding=1)
            return tc.dropout(h, 0.3, train=True, rng=rng).data
        np.testing.assert_array_equal(run(), run())


class TestParamsAndCheckpoint:
    def test_duplicate_names_rejected(self):
        store = ParamStore()
        store.add("w", np.zeros(2))
        with pytest.raises(ConfigurationError):
            store.add("w", np.zeros(2))

    def test_adam_first_step_is_lr_sized(self):
        store = ParamStore()
        w = store.add("w", np.array([1.0, -1.0]))
        w.grad = np.array([0.5, -3.0])
        Adam(store, lr=0.01).step()
        np.testing.assert_allclose(w.data, [0.99, -0.99], atol=1e-9)

    def test_checkpoint_round_trip(self, tmp_path):
        store = ParamStore()
        store.add("a.w", np.arange(6.0).reshape(2, 3) / 7)
        store.add_buffer("a.running_mean", np.array([0.25, 0.5]))
        save_checkpoint(tmp_path / "m.ckpt", store, {"C": 2})
        header, state = read_checkpoint(tmp_path / "m.ckpt")
        assert header["config"] == {"C": 2}
        assert [e["name"] for e in header["manifest"]] == ["a.w", "a.running_mean"]
        assert header["manifest"][1]["offset"] == 24
        np.testing.assert_allclose(state["a.w"], np.float32(np.arange(6.0).reshape(2, 3) / 7))
        raw = (tmp_path / "m.ckpt").read_bytes()
        assert raw[-8:] == np.array([0.25, 0.5], dtype="<f4").tobytes()
