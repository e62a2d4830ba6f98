"""Structural position encodings: degree-centrality and shortest-path-distance
embedding tables, plus the atom transformer that fuses (node, relation, node)
triples into a single edge-aware token."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import StructuralLayer, glorot
from .errors import ContractError, VocabularyError
from .graph import UNREACHABLE


class CentralityTable:
    """Embedding rows for clipped node degrees 0..max_degree plus an
    overflow bucket shared by every larger degree."""

    def __init__(self, hidden: int, max_degree: int = 64, rng: np.random.Generator | None = None,
                 table: np.ndarray | None = None):
        if table is None:
            table = glorot(rng, max_degree + 2, hidden)
        self.max_degree = max_degree
        self.table = ad.parameter(np.asarray(table, dtype=float))

    def row_index(self, degree: int) -> int:
        if degree < 0:
            raise ContractError("degree must be non-negative")
        return min(int(degree), self.max_degree + 1)

    def embed(self, degrees) -> Tensor:
        idx = [self.row_index(d) for d in degrees]
        return ad.embedding_lookup(self.table, idx)


class SpdTable:
    """Embedding rows for shortest-path distances 0..max_distance (larger
    distances clip to the top bucket) plus a dedicated UNREACHABLE row."""

    def __init__(self, hidden: int, max_distance: int = 8, rng: np.random.Generator | None = None,
                 table: np.ndarray | None = None):
        if table is None:
            table = glorot(rng, max_distance + 2, hidden)
        self.max_distance = max_distance
        self.table = ad.parameter(np.asarray(table, dtype=float))

    def row_index(self, distance) -> int:
        if distance is UNREACHABLE:
            return self.max_distance + 1
        if distance < 0:
            raise ContractError("distance must be non-negative or UNREACHABLE")
        return min(int(distance), self.max_distance)

    def embed(self, distances) -> Tensor:
        idx = [self.row_index(d) for d in distances]
        return ad.embedding_lookup(self.table, idx)


class AtomTransformer:
    """A small transformer over the 4-token sequence [virtual, head, relation, tail].

    The virtual token's output row is the fused edge encoding. Slot-position
    embeddings distinguish head from tail so the encoding is asymmetric. A
    zero-layer stack degenerates to virtual-token + slot-0 embedding.
    """

    SLOTS = 4

    def __init__(self, hidden: int, relation_table: Tensor, layers: int = 1, heads: int = 1,
                 ff_mult: int = 2, rng: np.random.Generator | None = None):
        self.hidden = hidden
        self.relation_table = relation_table
        self.virtual_token = ad.parameter(glorot(rng, 1, hidden))
        self.slot_embed = ad.parameter(glorot(rng, self.SLOTS, hidden))
        self.blocks = [StructuralLayer(hidden, heads, ff_mult, rng) for _ in range(layers)]
        self.params = {"virtual_token": self.virtual_token, "slot_embed": self.slot_embed}
        for i, b in enumerate(self.blocks):
            self.params.update({f"block{i}.{k}": v for k, v in b.params.items()})

    @property
    def relation_count(self) -> int:
        return self.relation_table.shape[0]

    def relation_embedding(self, relation: int) -> Tensor:
        if not 0 <= int(relation) < self.relation_count:
            raise VocabularyError(f"relation id {relation} outside vocabulary of {self.relation_count}")
        return ad.embedding_lookup(self.relation_table, [int(relation)])

    def encode(self, x_i: Tensor, relation: int, x_j: Tensor) -> Tensor:
        """Fused edge token e_ij, shape (1, hidden)."""
        r = self.relation_embedding(relation)
        seq = ad.concat_rows([self.virtual_token, x_i, r, x_j])
        seq = ad.add(seq, self.slot_embed)
        for block in self.blocks:
            seq = block.forward(seq).out
        return ad.take_row(seq, 0)


def centrality_embedding(table: CentralityTable, degree: int) -> Tensor:
    """Single-degree lookup, shape (1, hidden)."""
    return table.embed([degree])


def spd_embedding(table: SpdTable, distance) -> Tensor:
    """Single-distance lookup (int or UNREACHABLE), shape (1, hidden)."""
    return table.embed([distance])


def edge_type_encoding(at: AtomTransformer, x_i: Tensor, relation: int, x_j: Tensor) -> Tensor:
    return at.encode(x_i, relation, x_j)
