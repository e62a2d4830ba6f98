import numpy as np
import pytest

from duet import autodiff as ad
from duet.autodiff import Tape, Tensor
from duet.embeddings import (
    AtomTransformer,
    CentralityTable,
    SpdTable,
    centrality_embedding,
    edge_type_encoding,
    spd_embedding,
)
from duet.errors import ContractError, VocabularyError
from duet.graph import UNREACHABLE


class TestCentralityTable:
    def test_row_zero_for_degree_zero(self):
        t = CentralityTable(hidden=4, max_degree=5, rng=np.random.default_rng(0))
        np.testing.assert_array_equal(centrality_embedding(t, 0).values, t.table.values[0:1])

    def test_equal_degrees_equal_embeddings(self):
        t = CentralityTable(hidden=4, max_degree=5, rng=np.random.default_rng(1))
        np.testing.assert_array_equal(centrality_embedding(t, 3).values, centrality_embedding(t, 3).values)

    def test_overflow_bucket_shared(self):
        t = CentralityTable(hidden=4, max_degree=5, rng=np.random.default_rng(2))
        a = centrality_embedding(t, 6).values
        b = centrality_embedding(t, 60).values
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(a, t.table.values[6:7])

    def test_negative_degree_rejected(self):
        t = CentralityTable(hidden=4, max_degree=5, rng=np.random.default_rng(3))
        with pytest.raises(ContractError):
            centrality_embedding(t, -1)


class TestSpdTable:
    def test_distance_zero(self):
        t = SpdTable(hidden=4, max_distance=3, rng=np.random.default_rng(4))
        np.testing.assert_array_equal(spd_embedding(t, 0).values, t.table.values[0:1])

    def test_one_hop_row(self):
        t = SpdTable(hidden=4, max_distance=3, rng=np.random.default_rng(5))
        np.testing.assert_array_equal(spd_embedding(t, 1).values, t.table.values[1:2])

    def test_clipping(self):
        t = SpdTable(hidden=4, max_distance=3, rng=np.random.default_rng(6))
        np.testing.assert_array_equal(spd_embedding(t, 9).values, t.table.values[3:4])

    def test_unreachable_dedicated_row(self):
        t = SpdTable(hidden=4, max_distance=3, rng=np.random.default_rng(7))
        np.testing.assert_array_equal(spd_embedding(t, UNREACHABLE).values, t.table.values[4:5])


class TestAtomTransformer:
    def make(self, layers=1, seed=8, relations=3, hidden=6):
        rng = np.random.default_rng(seed)
        rel = ad.parameter(rng.normal(size=(relations, hidden)))
        return AtomTransformer(hidden=hidden, relation_table=rel, layers=layers, rng=rng)

    def test_output_shape(self):
        at = self.make()
        rng = np.random.default_rng(9)
        for r in range(3):
            out = edge_type_encoding(at, Tensor(rng.normal(size=(1, 6))), r, Tensor(rng.normal(size=(1, 6))))
            assert out.shape == (1, 6)

    def test_unknown_relation_rejected(self):
        at = self.make()
        x = Tensor(np.zeros((1, 6)))
        with pytest.raises(VocabularyError):
            edge_type_encoding(at, x, 3, x)

    def test_swapping_endpoints_changes_encoding(self):
        for seed in range(20):
            at = self.make(seed=seed + 100)
            rng = np.random.default_rng(seed)
            a = Tensor(rng.normal(size=(1, 6)))
            b = Tensor(rng.normal(size=(1, 6)))
            fwd = edge_type_encoding(at, a, 1, b).values
            rev = edge_type_encoding(at, b, 1, a).values
            assert not np.allclose(fwd, rev)

    def test_zero_layer_degenerate(self):
        at = self.make(layers=0)
        rng = np.random.default_rng(10)
        out = edge_type_encoding(at, Tensor(rng.normal(size=(1, 6))), 0, Tensor(rng.normal(size=(1, 6))))
        want = at.virtual_token.values + at.slot_embed.values[0:1]
        np.testing.assert_array_equal(out.values, want)


def test_gradients_only_touch_looked_up_rows():
    rng = np.random.default_rng(11)
    cent = CentralityTable(hidden=4, max_degree=6, rng=rng)
    spd = SpdTable(hidden=4, max_distance=4, rng=rng)
    rel = ad.parameter(rng.normal(size=(3, 4)))
    at = AtomTransformer(hidden=4, relation_table=rel, layers=1, rng=rng)

    before = {
        "cent": cent.table.values.copy(),
        "spd": spd.table.values.copy(),
        "rel": rel.values.copy(),
    }
    with Tape():
        x = ad.add(cent.embed([2, 2, 5]), spd.embed([1, 0, UNREACHABLE]))
        fused = at.encode(ad.take_row(x, 0), 1, ad.take_row(x, 2))
        loss = ad.reduce_sum(ad.mul(ad.concat_rows([x, fused]), ad.concat_rows([x, fused])))
        ad.backward(loss)

    # One plain gradient step must change exactly the looked-up rows.
    for table, key, touched in ((cent.table, "cent", {2, 5}), (spd.table, "spd", {0, 1, 5}), (rel, "rel", {1})):
        assert table.grad is not None
        table.values -= 0.1 * table.grad
        for row in range(table.values.shape[0]):
            if row in touched:
                assert not np.array_equal(table.values[row], before[key][row])
            else:
                np.testing.assert_array_equal(table.values[row], before[key][row])
