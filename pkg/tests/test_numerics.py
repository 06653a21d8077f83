import math

import numpy as np
import pytest

from errors import ArgumentError, DimensionError, TapeStateError, VersionError
from layers import MLP, EdgeAttention, EdgeSet, GraphAttention
from numerics import (
    DenseArray, ParamStore, TapeContext, backward, concat, conv2d, div, exp, forward_linear, gather_rows, getitem,
    gradient_check, huber, log, log_softmax, loss_cross_entropy, loss_huber, read_array_blob, reduce_mean, reduce_sum,
    scatter_add, segment_softmax, sigmoid, silu, softmax, sqrt, stack, tanh, transpose, write_array_blob,
)

from conftest import attention_oracle, mlp_oracle


class TestForwardLinear:
    def test_worked_example(self):
        y = forward_linear(np.array([[1.0, 2.0]]), np.array([[1.0, 0.0, -1.0], [0.5, 2.0, 1.0]]), np.array([0.0, 1.0, 0.0]))
        np.testing.assert_allclose(y.data, [[2.0, 5.0, 1.0]])

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((3, 4, 5))
        w = rng.standard_normal((5, 6))
        b = rng.standard_normal(6)
        expected = np.zeros((3, 4, 6))
        for i in range(3):
            for j in range(4):
                for o in range(6):
                    expected[i, j, o] = sum(x[i, j, c] * w[c, o] for c in range(5)) + b[o]
        np.testing.assert_allclose(forward_linear(x, w, b).data, expected, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            forward_linear(np.zeros((2, 3)), np.zeros((4, 5)))


class TestSoftmax:
    def test_examples(self):
        np.testing.assert_allclose(softmax(np.array([0.0, 0.0])).data, [0.5, 0.5])
        np.testing.assert_allclose(softmax(np.array([1000.0, 0.0])).data, [1.0, 0.0], atol=1e-300)

    def test_rows_sum_to_one(self):
        x = np.random.default_rng(1).uniform(-50, 50, size=(20, 7))
        np.testing.assert_allclose(softmax(x, axis=-1).data.sum(axis=-1), 1.0, atol=1e-12)

    def test_segment_softmax_per_segment(self):
        scores = np.array([[1.0], [2.0], [3.0], [0.5]])
        segments = np.array([0, 0, 1, 1])
        a = segment_softmax(scores, segments, 3).data[:, 0]
        np.testing.assert_allclose(a[:2], softmax(np.array([1.0, 2.0])).data)
        np.testing.assert_allclose(a[2:], softmax(np.array([3.0, 0.5])).data)


class TestConv2d:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 3, 7, 4))
        w = rng.standard_normal((5, 3, 3, 2))
        b = rng.standard_normal(5)
        out = conv2d(x, w, b).data
        assert out.shape == (2, 5, 5, 3)
        expected = np.zeros_like(out)
        for n in range(2):
            for o in range(5):
                for i in range(5):
                    for j in range(3):
                        expected[n, o, i, j] = b[o] + np.sum(w[o] * x[n, :, i:i + 3, j:j + 2])
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_unbatched_input(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 4, 3))
        w = rng.standard_normal((1, 2, 4, 1))
        out = conv2d(x, w).data
        assert out.shape == (1, 1, 3)
        np.testing.assert_allclose(out[0, 0], np.einsum("cl,clw->w", w[0, :, :, 0], x), atol=1e-12)

    def test_kernel_larger_than_input(self):
        with pytest.raises(DimensionError):
            conv2d(np.zeros((1, 2, 2)), np.zeros((1, 1, 3, 1)))


class TestLosses:
    def test_huber_regions(self):
        value = huber(np.array([0.5, 3.0, -2.0]), np.zeros(3), delta=1.0).data
        np.testing.assert_allclose(value, [0.125, 2.5, 1.5])

    def test_huber_mean(self):
        assert loss_huber(np.array([0.5, 3.0, -2.0]), np.zeros(3)).item() == pytest.approx((0.125 + 2.5 + 1.5) / 3)

    def test_uniform_cross_entropy(self):
        assert loss_cross_entropy(np.zeros(6), 2).item() == pytest.approx(math.log(6))

    def test_cross_entropy_target_range(self):
        with pytest.raises(ArgumentError):
            loss_cross_entropy(np.zeros(3), 3)


class TestTape:
    def test_gradient_of_composite(self):
        store = ParamStore()
        w = store.add("w", np.array([[1.0, -2.0], [0.5, 3.0]]))
        x = np.array([[0.3, -0.7]])
        with TapeContext():
            loss = reduce_sum(silu(forward_linear(x, w)))
        backward(loss, store)
        z = x @ w.data
        s = 1.0 / (1.0 + np.exp(-z))
        np.testing.assert_allclose(store.grad("w"), x.T @ (s * (1.0 + z * (1.0 - s))), atol=1e-12)

    def test_backward_twice(self):
        store = ParamStore()
        w = store.add("w", np.ones(3))
        with TapeContext():
            loss = reduce_sum(w * w)
        backward(loss, store)
        with pytest.raises(TapeStateError):
            backward(loss, store)

    def test_untaped_loss(self):
        store = ParamStore()
        w = store.add("w", np.ones(3))
        with pytest.raises(TapeStateError):
            backward(reduce_sum(w), store)

    def test_threads_keep_separate_tapes(self):
        from concurrent.futures import ThreadPoolExecutor

        store = ParamStore()
        w = store.add("w", np.array([2.0]))

        def run(scale):
            with TapeContext() as tape:
                loss = reduce_sum(w * w * scale)
            return len(tape), loss.tape is tape

        with ThreadPoolExecutor(max_workers=4) as pool:
            results = list(pool.map(run, [1.0, 2.0, 3.0, 4.0]))
        assert all(ok for _, ok in results)
        assert len({count for count, _ in results}) == 1

    def test_gradient_check_on_mlp(self):
        rng = np.random.default_rng(4)
        store = ParamStore()
        mlp = MLP(store, "mlp", 3, 5, 2, rng)
        x = rng.standard_normal((4, 3))
        worst = gradient_check(lambda: reduce_sum(mlp(x) * mlp(x)), store)
        assert max(worst.values()) < 1e-6


def _positive(rng, *shape):
    return rng.uniform(0.5, 2.0, size=shape)


def _signed(rng, *shape):
    return rng.uniform(-1.5, 1.5, size=shape)


# (name, op over the parameter arrays, input factory)
OPERATOR_CASES = [
    ("exp", lambda x: exp(x), lambda rng: [_signed(rng, 3, 4)]),
    ("log", lambda x: log(x), lambda rng: [_positive(rng, 3, 4)]),
    ("sqrt", lambda x: sqrt(x), lambda rng: [_positive(rng, 3, 4)]),
    ("div", lambda a, b: div(a, b), lambda rng: [_positive(rng, 3, 4), _positive(rng, 3, 4)]),
    ("div_broadcast", lambda a, b: div(a, b), lambda rng: [_positive(rng, 3, 4), _positive(rng, 4)]),
    ("tanh", lambda x: tanh(x), lambda rng: [_signed(rng, 3, 4)]),
    ("sigmoid", lambda x: sigmoid(x), lambda rng: [_signed(rng, 3, 4)]),
    ("silu", lambda x: silu(x), lambda rng: [_signed(rng, 3, 4)]),
    ("product", lambda a, b: a * b - a, lambda rng: [_positive(rng, 2, 3), _positive(rng, 3)]),
    ("getitem_slice", lambda x: getitem(x, (slice(1, None), slice(None, None, 2))), lambda rng: [_signed(rng, 3, 4)]),
    ("getitem_fancy", lambda x: getitem(x, (np.array([0, 2, 2]), np.array([1, 3, 3]))),
     lambda rng: [_signed(rng, 3, 4)]),
    ("gather_rows", lambda x: gather_rows(x, np.array([2, 0, 2, 1])), lambda rng: [_signed(rng, 3, 4)]),
    ("scatter_add", lambda x: scatter_add(x, np.array([1, 0, 1, 3, 1]), 4), lambda rng: [_signed(rng, 5, 2)]),
    ("concat", lambda a, b: concat([a, b], axis=0), lambda rng: [_signed(rng, 2, 3), _signed(rng, 1, 3)]),
    ("stack", lambda a, b: stack([a, b], axis=1), lambda rng: [_signed(rng, 2, 3), _signed(rng, 2, 3)]),
    ("transpose", lambda x: transpose(x, (1, 0, 2)), lambda rng: [_signed(rng, 2, 3, 2)]),
    ("reduce_mean", lambda x: reduce_mean(x, axis=1, keepdims=True), lambda rng: [_signed(rng, 3, 4)]),
    ("softmax", lambda x: softmax(x), lambda rng: [_signed(rng, 3, 4)]),
    ("log_softmax", lambda x: log_softmax(x, axis=0), lambda rng: [_signed(rng, 3, 4)]),
    ("segment_softmax", lambda x: segment_softmax(x, np.array([0, 1, 0, 2, 1, 0]), 3),
     lambda rng: [_signed(rng, 6, 2)]),
    ("forward_linear", lambda x, w, b: forward_linear(x, w, b),
     lambda rng: [_signed(rng, 4, 3), _signed(rng, 3, 2), _signed(rng, 2)]),
    ("conv2d", lambda x, w, b: conv2d(x, w, b),
     lambda rng: [_positive(rng, 2, 2, 4, 3), _positive(rng, 3, 2, 2, 2), _signed(rng, 3)]),
    ("conv2d_unbatched", lambda x, w: conv2d(x, w), lambda rng: [_positive(rng, 2, 5, 3), _positive(rng, 2, 2, 3, 1)]),
]


class TestOperatorGradients:
    @pytest.mark.parametrize("name,op,make_inputs", OPERATOR_CASES, ids=[case[0] for case in OPERATOR_CASES])
    def test_every_entry_matches_central_differences(self, name, op, make_inputs):
        rng = np.random.default_rng(len(name))
        store = ParamStore()
        params = [store.add(f"{name}.{i}", value) for i, value in enumerate(make_inputs(rng))]
        weights = rng.uniform(0.5, 1.5, size=op(*params).shape)
        worst = gradient_check(lambda: reduce_sum(op(*params) * weights), store, full=True, floor=1e-8)
        assert max(worst.values()) < 1e-6, worst


class TestParamStore:
    def test_duplicate_name(self):
        store = ParamStore()
        store.add("a", np.zeros(2))
        with pytest.raises(ArgumentError):
            store.add("a", np.zeros(2))

    def test_blob_round_trip_is_exact(self, tmp_path):
        rng = np.random.default_rng(5)
        arrays = {"a.weight": rng.standard_normal((3, 4)), "a.bias": rng.standard_normal(4) * 1e-300}
        write_array_blob(arrays, tmp_path / "p.manifest", tmp_path / "p.bin")
        loaded = read_array_blob(tmp_path / "p.manifest", tmp_path / "p.bin")
        assert list(loaded) == list(arrays)
        for name in arrays:
            assert np.array_equal(loaded[name], arrays[name])

    def test_load_arrays_shape_mismatch(self):
        store = ParamStore()
        store.add("a", np.zeros((2, 2)))
        with pytest.raises(VersionError):
            store.load_arrays({"a": np.zeros(3)})

    def test_bad_blob_header(self, tmp_path):
        (tmp_path / "p.manifest").write_text("something else\n")
        (tmp_path / "p.bin").write_bytes(b"")
        with pytest.raises(VersionError):
            read_array_blob(tmp_path / "p.manifest", tmp_path / "p.bin")


class TestAttention:
    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(6)
        store = ParamStore()
        layer = EdgeAttention(store, "attn_test", 8, 2, 5, rng)
        queries = rng.standard_normal((4, 8))
        sources = rng.standard_normal((3, 8))
        edges = EdgeSet(np.array([0, 1, 2, 0]), np.array([0, 0, 2, 3]), rng.standard_normal((4, 5)))
        out = layer(queries, sources, edges).data
        edge_emb = mlp_oracle(store, "attn_test.edge", edges.features)
        expected = attention_oracle(store, "attn_test.attn", queries, sources, edges.src, edges.dst, 2, edge_emb)
        np.testing.assert_allclose(out, expected, atol=1e-10)
        np.testing.assert_array_equal(out[1], queries[1])

    def test_no_edges_returns_queries(self):
        store = ParamStore()
        layer = GraphAttention(store, "g", 4, 2, np.random.default_rng(0))
        q = DenseArray(np.ones((3, 4)))
        assert layer(q, None, np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)) is q
