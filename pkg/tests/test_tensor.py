import unittest

import numpy as np
import pytest

from app.tensor import (
    Tape,
    Tensor,
    add,
    backward,
    causal_attention,
    embedding,
    gelu,
    get_default_dtype,
    layernorm,
    matmul,
    mul,
    reduce_mean,
    reduce_sum,
    set_default_dtype,
    softmax,
    softmax_cross_entropy,
    transpose,
)
from app.utils.errors import ContractError, DimensionError
from app.utils.types import Precision

STEP = 1e-5
TOLERANCE = 1e-6


def _weighted_sum(out, rng):
    weights = Tensor(rng.normal(size=out.shape))
    return reduce_sum(mul(out, weights))


def _mlp_graph(rng):
    b, t, d, h = rng.integers(1, 3), rng.integers(1, 4), rng.integers(2, 5), rng.integers(2, 5)
    leaves = {
        "x": rng.normal(size=(b, t, d)),
        "w": rng.normal(size=(h, d)),
        "bias": rng.normal(size=(h,)),
        "gamma": rng.normal(size=(h,)),
        "beta": rng.normal(size=(h,)),
    }

    def build(p):
        hidden = gelu(add(matmul(p["x"], transpose(p["w"])), p["bias"]))
        return layernorm(hidden, p["gamma"], p["beta"])

    return leaves, build


def _attention_graph(rng):
    heads = int(rng.integers(1, 3))
    d = heads * int(rng.integers(1, 3))
    t = int(rng.integers(2, 5))
    shape = (t, d) if rng.random() < 0.3 else (int(rng.integers(1, 3)), t, d)
    leaves = {"x": rng.normal(size=shape)}
    for name in ("wq", "wk", "wv"):
        leaves[name] = rng.normal(size=(d, d))

    def build(p):
        q = matmul(p["x"], transpose(p["wq"]))
        k = matmul(p["x"], transpose(p["wk"]))
        v = matmul(p["x"], transpose(p["wv"]))
        return causal_attention(q, k, v, heads)

    return leaves, build


def _embedding_ce_graph(rng):
    vocab, d, classes = int(rng.integers(3, 7)), int(rng.integers(2, 5)), int(rng.integers(2, 5))
    b, t = int(rng.integers(1, 3)), int(rng.integers(1, 4))
    ids = rng.integers(0, vocab, size=(b, t))
    targets = rng.integers(0, classes, size=(b, t))
    mask = (rng.random(size=(b, t)) < 0.7).astype(float)
    mask.flat[0] = 1.0
    leaves = {"table": rng.normal(size=(vocab, d)), "head": rng.normal(size=(classes, d))}

    def build(p):
        logits = matmul(embedding(p["table"], ids), transpose(p["head"]))
        return softmax_cross_entropy(logits, targets, mask)

    return leaves, build


def _reduction_graph(rng):
    m, n = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    axis = int(rng.integers(0, 2))
    leaves = {"a": rng.normal(size=(m, n)), "b": rng.normal(size=(n, m))}

    def build(p):
        return reduce_mean(mul(transpose(p["a"]), p["b"]), axis=axis)

    return leaves, build


def _block_graph(rng):
    heads = int(rng.integers(1, 3))
    d = 2 * heads
    t, classes = int(rng.integers(2, 4)), int(rng.integers(2, 4))
    targets = rng.integers(0, classes, size=(1, t))
    leaves = {
        "x": rng.normal(size=(1, t, d)),
        "g1": 1.0 + 0.1 * rng.normal(size=(d,)),
        "b1": 0.1 * rng.normal(size=(d,)),
        "wq": rng.normal(size=(d, d)),
        "wk": rng.normal(size=(d, d)),
        "wv": rng.normal(size=(d, d)),
        "fc": rng.normal(size=(2 * d, d)),
        "proj": rng.normal(size=(d, 2 * d)),
        "head": rng.normal(size=(classes, d)),
    }

    def build(p):
        h = layernorm(p["x"], p["g1"], p["b1"])
        q = matmul(h, transpose(p["wq"]))
        k = matmul(h, transpose(p["wk"]))
        v = matmul(h, transpose(p["wv"]))
        x = add(p["x"], causal_attention(q, k, v, heads))
        x = add(x, matmul(gelu(matmul(x, transpose(p["fc"]))), transpose(p["proj"])))
        return softmax_cross_entropy(matmul(x, transpose(p["head"])), targets)

    return leaves, build


GRAPHS = [_mlp_graph, _attention_graph, _embedding_ce_graph, _reduction_graph, _block_graph]


def _scalar(build, arrays, rng_seed):
    tensors = {name: a if isinstance(a, Tensor) else Tensor(a) for name, a in arrays.items()}
    out = build(tensors)
    if out.ndim:
        out = _weighted_sum(out, np.random.default_rng(rng_seed))
    return out


@pytest.mark.unit
@pytest.mark.parametrize("index", range(120))
def test_gradients_match_central_differences(index):
    rng = np.random.default_rng(1000 + index)
    arrays, build = GRAPHS[index % len(GRAPHS)](rng)

    leaves = {name: Tensor(a, requires_grad=True) for name, a in arrays.items()}
    with Tape() as tape:
        loss = _scalar(build, leaves, index)
    backward(tape, loss)

    for name, leaf in leaves.items():
        picks = rng.choice(leaf.data.size, size=min(4, leaf.data.size), replace=False)
        for flat in picks:
            pos = np.unravel_index(flat, leaf.shape)
            plus = {k: v.copy() for k, v in arrays.items()}
            minus = {k: v.copy() for k, v in arrays.items()}
            plus[name][pos] += STEP
            minus[name][pos] -= STEP
            numeric = (_scalar(build, plus, index).item() - _scalar(build, minus, index).item()) / (
                2 * STEP
            )
            analytic = leaf.grad[pos]
            rel = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-2)
            assert rel <= TOLERANCE, (index, name, pos, analytic, numeric)


def test_shared_input_gradients_accumulate():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    with Tape() as tape:
        loss = reduce_sum(add(mul(x, x), x))
    backward(tape, loss)
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_reductions_stay_zero_dimensional():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    with Tape() as tape:
        loss = reduce_sum(mul(x, x))
    assert loss.data.ndim == 0
    assert loss.shape == ()
    assert reduce_mean(x).ndim == 0
    backward(tape, loss)
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_unused_leaf_gets_zero_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = reduce_sum(mul(x, x))
        transpose(unused)
    backward(tape, loss)
    np.testing.assert_array_equal(unused.grad, np.zeros((2, 2)))


def test_ops_outside_a_tape_record_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    out = mul(x, x)
    with Tape() as tape:
        pass
    assert tape.nodes == []
    with pytest.raises(ContractError):
        backward(tape, reduce_sum(out))


def test_untracked_inputs_are_not_recorded():
    with Tape() as tape:
        out = reduce_sum(mul(Tensor(np.ones(2)), Tensor(np.ones(2))))
    assert tape.nodes == []
    assert not out.requires_grad


class TestTensorContracts(unittest.TestCase):
    def test_zero_extent_rejected(self):
        with self.assertRaises(ContractError):
            Tensor(np.zeros((0, 3)))

    def test_data_is_read_only_copy(self):
        source = np.ones(3)
        t = Tensor(source)
        source[0] = 5.0
        self.assertEqual(t.data[0], 1.0)
        with self.assertRaises(ValueError):
            t.data[0] = 2.0

    def test_matmul_mismatch_names_both_shapes(self):
        with self.assertRaises(DimensionError) as ctx:
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
        self.assertIn("(2, 3)", str(ctx.exception))
        self.assertIn("(4, 5)", str(ctx.exception))

    def test_backward_rejects_non_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            out = mul(x, x)
        with self.assertRaises(ContractError):
            backward(tape, out)

    def test_cross_entropy_rejects_bad_targets(self):
        logits = Tensor(np.zeros((2, 3)))
        with self.assertRaises(ContractError):
            softmax_cross_entropy(logits, np.array([0, 3]))
        with self.assertRaises(ContractError):
            softmax_cross_entropy(logits, np.array([0, 1]), mask=np.zeros(2))

    def test_cross_entropy_of_uniform_logits(self):
        loss = softmax_cross_entropy(Tensor(np.zeros((4, 5))), np.array([0, 1, 2, 3]))
        self.assertAlmostEqual(loss.item(), np.log(5.0))

    def test_softmax_rows_sum_to_one(self):
        probs = softmax(np.random.default_rng(0).normal(size=(3, 7)) * 50)
        np.testing.assert_allclose(probs.sum(axis=-1), np.ones(3))

    def test_attention_is_causal(self):
        rng = np.random.default_rng(3)
        q, k, v = (rng.normal(size=(5, 4)) for _ in range(3))
        base = causal_attention(Tensor(q), Tensor(k), Tensor(v), 2).data
        k2, v2 = k.copy(), v.copy()
        k2[4] += 10.0
        v2[4] -= 10.0
        changed = causal_attention(Tensor(q), Tensor(k2), Tensor(v2), 2).data
        np.testing.assert_array_equal(base[:4], changed[:4])

    def test_first_position_attends_only_to_itself(self):
        rng = np.random.default_rng(4)
        q, k, v = (rng.normal(size=(1, 3, 2)) for _ in range(3))
        out = causal_attention(Tensor(q), Tensor(k), Tensor(v), 1).data
        np.testing.assert_allclose(out[0, 0], v[0, 0])


def test_precision_switch_applies_to_new_tensors():
    set_default_dtype("f32")
    assert get_default_dtype() is np.float32
    assert Tensor([1, 2]).data.dtype == np.float32
    assert Tensor(np.ones(2)).data.dtype == np.float64
    set_default_dtype(Precision.F64)
    assert Tensor([1, 2]).data.dtype == np.float64
    with pytest.raises(ValueError):
        set_default_dtype("f16")


if __name__ == "__main__":
    unittest.main()
