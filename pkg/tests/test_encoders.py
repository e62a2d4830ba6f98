import math

import numpy as np
import pytest

from duet import autodiff as ad
from duet.autodiff import Tape, Tensor
from duet.encoders import (
    SemanticLayer,
    SemanticScorer,
    StructuralLayer,
    bias_exchange,
    scaled_dot_attention,
    semantic_encode,
    semantic_logit,
    structural_encode,
)
from duet.errors import ContractError

# ---------------------------------------------------------------------------
# loop-based dense oracles (no shared code with the implementation)


def oracle_softmax(row):
    m = max(row)
    es = [math.exp(r - m) for r in row]
    s = sum(es)
    return [e / s for e in es]


def oracle_attention(q, k, v, bias=None):
    n, h = len(q), len(q[0])
    logits = []
    for i in range(n):
        row = []
        for j in range(n):
            dot = 0.0
            for t in range(h):
                dot += q[i][t] * k[j][t]
            row.append(dot / math.sqrt(h) + (bias[i][j] if bias is not None else 0.0))
        logits.append(row)
    scores = [oracle_softmax(r) for r in logits]
    out = [[sum(scores[i][j] * v[j][t] for j in range(n)) for t in range(h)] for i in range(n)]
    return out, scores, logits


def oracle_affine(x, w, b):
    rows, inner, cols = len(x), len(w), len(w[0])
    return [[sum(x[i][t] * w[t][j] for t in range(inner)) + b[0][j] for j in range(cols)] for i in range(rows)]


def oracle_layer_norm(x, g, b, eps=1e-5):
    out = []
    for row in x:
        d = len(row)
        mu = sum(row) / d
        var = sum((r - mu) ** 2 for r in row) / d
        inv = 1.0 / math.sqrt(var + eps)
        out.append([(r - mu) * inv * g[0][j] + b[0][j] for j, r in enumerate(row)])
    return out


def oracle_structural_block(x, params, heads, kv_extra=None, bias=None):
    p = {k: v.values.tolist() for k, v in params.items()}
    n, hidden = len(x), len(x[0])
    xkv = x if kv_extra is None else [[a + b for a, b in zip(xr, er)] for xr, er in zip(x, kv_extra)]
    q = oracle_affine(x, p["attn.wq"], p["attn.bq"])
    k = oracle_affine(xkv, p["attn.wk"], p["attn.bk"])
    v = oracle_affine(xkv, p["attn.wv"], p["attn.bv"])
    dh = hidden // heads
    merged = [[0.0] * hidden for _ in range(n)]
    for h in range(heads):
        qs = [row[h * dh : (h + 1) * dh] for row in q]
        ks = [row[h * dh : (h + 1) * dh] for row in k]
        vs = [row[h * dh : (h + 1) * dh] for row in v]
        out, _, _ = oracle_attention(qs, ks, vs, bias)
        for i in range(n):
            for t in range(dh):
                merged[i][h * dh + t] = out[i][t]
    attn_out = oracle_affine(merged, p["attn.wo"], p["attn.bo"])
    h1 = oracle_layer_norm(
        [[a + b for a, b in zip(xr, ar)] for xr, ar in zip(x, attn_out)], p["ln1_g"], p["ln1_b"]
    )
    ff_mid = [[max(0.0, u) for u in row] for row in oracle_affine(h1, p["ff_w1"], p["ff_b1"])]
    ff = oracle_affine(ff_mid, p["ff_w2"], p["ff_b2"])
    return oracle_layer_norm([[a + b for a, b in zip(hr, fr)] for hr, fr in zip(h1, ff)], p["ln2_g"], p["ln2_b"])


def oracle_semantic_block(x, layer, bias=None):
    p = {k: v.values.tolist() for k, v in layer.params.items()}
    n, hidden = len(x), len(x[0])
    ws, bs = p["scorer.ws"], p["scorer.bs"]
    heads = len(ws)
    dh = hidden // heads
    v = oracle_affine(x, p["wv"], p["bv"])
    merged = [[0.0] * hidden for _ in range(n)]
    for h in range(heads):
        logits = []
        for i in range(n):
            row = []
            for j in range(n):
                z = sum(ws[h][t] * (x[i][t] - x[j][t]) for t in range(hidden)) + bs[0][h]
                row.append(z + (bias[i][j] if bias is not None else 0.0))
            logits.append(row)
        scores = [oracle_softmax(r) for r in logits]
        for i in range(n):
            for t in range(dh):
                merged[i][h * dh + t] = sum(scores[i][j] * v[j][h * dh + t] for j in range(n))
    attn_out = oracle_affine(merged, p["wo"], p["bo"])
    h1 = oracle_layer_norm([[a + b for a, b in zip(xr, ar)] for xr, ar in zip(x, attn_out)], p["ln1_g"], p["ln1_b"])
    ff_mid = [[max(0.0, u) for u in row] for row in oracle_affine(h1, p["ff_w1"], p["ff_b1"])]
    ff = oracle_affine(ff_mid, p["ff_w2"], p["ff_b2"])
    return oracle_layer_norm([[a + b for a, b in zip(hr, fr)] for hr, fr in zip(h1, ff)], p["ln2_g"], p["ln2_b"])


# ---------------------------------------------------------------------------


class TestScaledDotAttention:
    def test_single_row(self):
        rng = np.random.default_rng(0)
        q, k, v = (Tensor(rng.normal(size=(1, 4))) for _ in range(3))
        out, scores, _ = scaled_dot_attention(q, k, v)
        np.testing.assert_array_equal(scores.values, [[1.0]])
        np.testing.assert_allclose(out.values, v.values, rtol=1e-15)

    def test_zero_query_gives_uniform_scores(self):
        rng = np.random.default_rng(1)
        n = 5
        q = Tensor(np.zeros((n, 4)))
        k = Tensor(rng.normal(size=(n, 4)))
        v = Tensor(rng.normal(size=(n, 4)))
        out, scores, _ = scaled_dot_attention(q, k, v)
        np.testing.assert_allclose(scores.values, np.full((n, n), 1 / n), atol=1e-12)
        np.testing.assert_allclose(out.values, np.tile(v.values.mean(axis=0), (n, 1)), atol=1e-12)

    def test_against_loop_oracle(self):
        for seed in range(50):
            rng = np.random.default_rng(seed)
            n = 5
            q = Tensor(rng.normal(size=(n, 3)))
            k = Tensor(rng.normal(size=(n, 3)))
            v = Tensor(rng.normal(size=(n, 3)))
            bias = rng.normal(size=(n, n))
            out, scores, logits = scaled_dot_attention(q, k, v, bias=Tensor(bias))
            o_out, o_scores, o_logits = oracle_attention(
                q.values.tolist(), k.values.tolist(), v.values.tolist(), bias.tolist()
            )
            np.testing.assert_allclose(out.values, o_out, atol=1e-10)
            np.testing.assert_allclose(scores.values, o_scores, atol=1e-10)
            np.testing.assert_allclose(logits.values, o_logits, atol=1e-10)


class TestStructuralEncode:
    def test_zero_bias_identical_to_no_bias(self):
        rng = np.random.default_rng(2)
        layer = StructuralLayer(hidden=8, heads=2, ff_mult=2, rng=rng)
        x = Tensor(rng.normal(size=(4, 8)))
        plain, _ = structural_encode(layer, x)
        biased, _ = structural_encode(layer, x, semantic_bias=Tensor(np.zeros((4, 4))))
        np.testing.assert_array_equal(plain.values, biased.values)

    def test_size_one_context_ignores_query_key_params(self):
        rng = np.random.default_rng(3)
        layer = StructuralLayer(hidden=6, heads=1, ff_mult=2, rng=rng)
        x = Tensor(rng.normal(size=(1, 6)))
        before, _ = structural_encode(layer, x)
        layer.params["attn.wq"].values += 1.0
        layer.params["attn.wk"].values -= 0.5
        after, _ = structural_encode(layer, x)
        np.testing.assert_array_equal(before.values, after.values)

    def test_against_block_oracle(self):
        for seed in range(10):
            rng = np.random.default_rng(100 + seed)
            layer = StructuralLayer(hidden=6, heads=2, ff_mult=2, rng=rng)
            x = rng.normal(size=(6, 6))
            extra = rng.normal(size=(6, 6))
            bias = rng.normal(size=(6, 6))
            got, _ = structural_encode(layer, Tensor(x), semantic_bias=Tensor(bias), kv_extra=Tensor(extra))
            want = oracle_structural_block(x.tolist(), layer.params, heads=2, kv_extra=extra.tolist(), bias=bias.tolist())
            np.testing.assert_allclose(got.values, [want[0]], atol=1e-10)

    def test_score_rows_sum_to_one_under_bias(self):
        rng = np.random.default_rng(4)
        layer = StructuralLayer(hidden=8, heads=2, ff_mult=2, rng=rng)
        for _ in range(20):
            x = Tensor(rng.normal(size=(5, 8)) * 2)
            bias = Tensor(rng.normal(size=(5, 5)) * 4)
            res = layer.forward(x, bias=bias)
            for s in res.scores:
                np.testing.assert_allclose(s.values.sum(axis=1), np.ones(5), atol=1e-6)

    def test_permuting_non_center_rows_with_bias_keeps_center_output(self):
        rng = np.random.default_rng(5)
        layer = StructuralLayer(hidden=6, heads=1, ff_mult=2, rng=rng)
        x = rng.normal(size=(5, 6))
        extra = rng.normal(size=(5, 6))
        bias = rng.normal(size=(5, 5))
        base, _ = structural_encode(layer, Tensor(x), semantic_bias=Tensor(bias), kv_extra=Tensor(extra))
        perm = [0, 3, 1, 4, 2]
        pm = np.ix_(perm, perm)
        permuted, _ = structural_encode(
            layer, Tensor(x[perm]), semantic_bias=Tensor(bias[pm]), kv_extra=Tensor(extra[perm])
        )
        np.testing.assert_allclose(base.values, permuted.values, atol=1e-10)

    def test_bias_shape_contract(self):
        rng = np.random.default_rng(6)
        layer = StructuralLayer(hidden=6, heads=1, ff_mult=2, rng=rng)
        with pytest.raises(ContractError):
            layer.forward(Tensor(rng.normal(size=(3, 6))), bias=Tensor(np.zeros((2, 2))))


class TestSemanticScorer:
    def test_equal_inputs_give_bias_logit(self):
        scorer = SemanticScorer(hidden=3, weight=[[0.5, -1.0, 2.0]], bias=[[0.7]])
        x = Tensor([[1.0, 2.0, 3.0]])
        z = semantic_logit(scorer, x, x)
        np.testing.assert_allclose(z.values, [[0.7]])
        np.testing.assert_allclose(scorer.score(x, x).values, 1 / (1 + math.exp(-0.7)))

    def test_zero_bias_scores_sum_to_one(self):
        rng = np.random.default_rng(7)
        scorer = SemanticScorer(hidden=4, weight=rng.normal(size=(1, 4)), bias=[[0.0]])
        for _ in range(10):
            a = Tensor(rng.normal(size=(1, 4)))
            b = Tensor(rng.normal(size=(1, 4)))
            total = scorer.score(a, b).item() + scorer.score(b, a).item()
            assert abs(total - 1.0) <= 1e-12

    def test_worked_example(self):
        scorer = SemanticScorer(hidden=2, weight=[[1.0, 0.0]], bias=[[0.0]])
        z = semantic_logit(scorer, Tensor([[2.0, 5.0]]), Tensor([[1.0, 5.0]]))
        assert z.item() == 1.0
        np.testing.assert_allclose(scorer.score(Tensor([[2.0, 5.0]]), Tensor([[1.0, 5.0]])).item(), 0.7310586, atol=1e-7)

    def test_antisymmetry_identity(self):
        rng = np.random.default_rng(8)
        # Exact negation with zero bias; 2*b_s identity within float rounding otherwise.
        scorer0 = SemanticScorer(hidden=5, weight=rng.normal(size=(1, 5)), bias=[[0.0]])
        a, b = Tensor(rng.normal(size=(1, 5))), Tensor(rng.normal(size=(1, 5)))
        assert semantic_logit(scorer0, a, b).item() == -semantic_logit(scorer0, b, a).item()
        scorer = SemanticScorer(hidden=5, weight=scorer0.params["ws"].values, bias=[[0.31]])
        z_ab = semantic_logit(scorer, a, b).item()
        z_ba = semantic_logit(scorer, b, a).item()
        assert abs(z_ab + z_ba - 2 * 0.31) < 1e-12


class TestSemanticEncode:
    def test_identical_inputs_uniform_attention(self):
        rng = np.random.default_rng(9)
        layer = SemanticLayer(hidden=6, scorer_heads=1, ff_mult=2, rng=rng)
        layer.scorer.params["bs"].values[:] = 0.0
        x = Tensor(np.tile(rng.normal(size=(1, 6)), (4, 1)))
        res = layer.forward(x)
        np.testing.assert_allclose(res.scores[0].values, np.full((4, 4), 0.25), atol=1e-12)

    def test_zero_structural_bias_identity(self):
        rng = np.random.default_rng(10)
        layer = SemanticLayer(hidden=6, scorer_heads=1, ff_mult=2, rng=rng)
        x = Tensor(rng.normal(size=(5, 6)))
        plain, _ = semantic_encode(layer, x)
        biased, _ = semantic_encode(layer, x, structural_bias=Tensor(np.zeros((5, 5))))
        np.testing.assert_array_equal(plain.values, biased.values)

    def test_against_loop_oracle(self):
        for seed in range(10):
            rng = np.random.default_rng(200 + seed)
            layer = SemanticLayer(hidden=6, scorer_heads=1, ff_mult=2, rng=rng)
            x = rng.normal(size=(4, 6))  # center + k=3 neighbors
            bias = rng.normal(size=(4, 4))
            got, _ = semantic_encode(layer, Tensor(x), structural_bias=Tensor(bias))
            want = oracle_semantic_block(x.tolist(), layer, bias=bias.tolist())
            np.testing.assert_allclose(got.values, [want[0]], atol=1e-10)

    def test_multi_head_matches_oracle(self):
        rng = np.random.default_rng(11)
        layer = SemanticLayer(hidden=6, scorer_heads=2, ff_mult=2, rng=rng)
        x = rng.normal(size=(5, 6))
        got, _ = semantic_encode(layer, Tensor(x))
        want = oracle_semantic_block(x.tolist(), layer)
        np.testing.assert_allclose(got.values, [want[0]], atol=1e-10)

    def test_score_rows_sum_to_one(self):
        rng = np.random.default_rng(12)
        layer = SemanticLayer(hidden=6, scorer_heads=1, ff_mult=2, rng=rng)
        for _ in range(20):
            x = Tensor(rng.normal(size=(5, 6)) * 3)
            bias = Tensor(rng.normal(size=(5, 5)) * 2)
            res = layer.forward(x, bias=bias)
            np.testing.assert_allclose(res.scores[0].values.sum(axis=1), np.ones(5), atol=1e-6)


class TestBiasExchange:
    def test_lambda_zero_gives_zero_matrix(self):
        logits = Tensor(np.arange(16.0).reshape(4, 4))
        out = bias_exchange(logits, [0, 1, 2, 3], [0, 1, 2], lam=0.0)
        np.testing.assert_array_equal(out.values, np.zeros((3, 3)))

    def test_identical_lists_identity_copy(self):
        logits = Tensor(np.arange(9.0).reshape(3, 3))
        out = bias_exchange(logits, [4, 5, 6], [4, 5, 6], lam=1.0)
        np.testing.assert_array_equal(out.values, logits.values)
        assert out.requires_grad is False

    def test_two_node_overlap_has_exactly_four_nonzeros(self):
        # source context [5, 7, 9, 11]; target context [7, 3, 9].
        logits = np.arange(1.0, 17.0).reshape(4, 4)
        out = bias_exchange(Tensor(logits), [5, 7, 9, 11], [7, 3, 9], lam=2.0).values
        assert np.count_nonzero(out) == 4
        assert out[0, 0] == 2.0 * logits[1, 1]
        assert out[0, 2] == 2.0 * logits[1, 2]
        assert out[2, 0] == 2.0 * logits[2, 1]
        assert out[2, 2] == 2.0 * logits[2, 2]

    def test_disjoint_sets_zero(self):
        out = bias_exchange(Tensor(np.ones((2, 2))), [0, 1], [5, 6], lam=1.0)
        np.testing.assert_array_equal(out.values, np.zeros((2, 2)))

    def test_detached_from_tape(self):
        x = ad.parameter(np.ones((2, 2)))
        with Tape():
            logits = ad.mul(x, x)
            out = bias_exchange(logits, [0, 1], [0, 1], lam=1.0)
            assert out.requires_grad is False


def test_gradients_flow_through_structural_block():
    from duet.gradcheck import check_loss_gradients

    rng = np.random.default_rng(13)
    layer = StructuralLayer(hidden=4, heads=2, ff_mult=2, rng=rng)
    x = ad.constant(rng.normal(size=(3, 4)))
    w = rng.normal(size=(1, 4))

    def make_loss():
        center, _ = structural_encode(layer, x)
        return ad.reduce_sum(ad.mul(center, ad.constant(w)))

    errs = check_loss_gradients(make_loss, layer.params)
    assert max(errs.values()) < 1e-6


def test_gradients_flow_through_semantic_block():
    from duet.gradcheck import check_loss_gradients

    rng = np.random.default_rng(14)
    layer = SemanticLayer(hidden=4, scorer_heads=2, ff_mult=2, rng=rng)
    x = ad.constant(rng.normal(size=(4, 4)))
    w = rng.normal(size=(1, 4))

    def make_loss():
        center, _ = semantic_encode(layer, x)
        return ad.reduce_sum(ad.mul(center, ad.constant(w)))

    errs = check_loss_gradients(make_loss, layer.params)
    assert max(errs.values()) < 1e-6
