"""The full dual-encoder stack: layered structural and semantic encoders with
bias exchange, convex output combination, a virtual-node graph readout, and
task heads, plus checkpoint serialization.

Three operating modes:

* ``whole-graph``: dense dual attention over all nodes plus a virtual
  context node whose output row is the graph representation. The semantic
  encoder attends over all nodes directly, so no neighbor index is needed.
* ``ego-node``: per layer, every node is re-encoded from its one-hop ego
  context (structural branch) and its fetched semantic neighbors (semantic
  branch); the combined output feeds the next layer.
* ``kg``: per query (head, relation), a fixed token sequence built from the
  head's ego context with relation-fused neighbor tokens; the combined
  center row feeds both branches' next layer.
"""

from __future__ import annotations

import json
import struct
from contextlib import contextmanager
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .embeddings import AtomTransformer, CentralityTable, SpdTable
from .encoders import SemanticLayer, StructuralLayer, bias_exchange, glorot
from .errors import CheckpointError, ContractError, ModeError, VocabularyError
from .graph import Graph
from .neighbors import SemanticNeighborIndex, refresh_index

MODES = ("whole-graph", "ego-node", "kg")
HEADS = ("regression", "classification", "entity")
CHECKPOINT_MAGIC = b"DET1"


@dataclass
class ModelConfig:
    mode: str
    head: str
    hidden: int = 32
    layers: int = 2
    struct_heads: int = 2
    scorer_heads: int = 1
    ff_mult: int = 2
    tau: float = 0.15
    lam: float = 1.0
    max_degree: int = 64
    max_distance: int = 8
    feature_dim: int | None = None
    entity_count: int | None = None
    relation_count: int | None = None  # after inverse doubling
    class_count: int | None = None
    multilabel: bool = False
    atom_layers: int = 1
    node_cap: int = 256
    combine: str = "layerwise"  # or "final"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}")
        if self.head not in HEADS:
            raise ContractError(f"head must be one of {HEADS}")
        if not 0.0 <= self.tau <= 1.0:
            raise ContractError("tau must lie in [0, 1]")
        if self.layers < 1:
            raise ContractError("layer count must be >= 1")
        if self.combine not in ("layerwise", "final"):
            raise ContractError("combine must be 'layerwise' or 'final'")
        if self.feature_dim is None and self.entity_count is None and self.mode != "whole-graph":
            raise ContractError("either feature_dim or entity_count is required")
        if self.mode == "kg" and (self.entity_count is None or self.relation_count is None):
            raise ContractError("kg mode needs entity_count and relation_count")
        if self.head == "classification" and self.class_count is None:
            raise ContractError("classification head needs class_count")


@dataclass
class NodeForward:
    combined: Tensor       # (n, hidden) final combined representations
    structural: Tensor     # (n, hidden) final structural branch rows
    semantic: Tensor       # (n, hidden) final semantic branch rows


class DuetModel:
    """Parameter container and forward passes for every operating mode."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        c = config
        h = c.hidden
        self.params: dict[str, Tensor] = {}

        if c.feature_dim is not None:
            self._register("input.proj", glorot(rng, c.feature_dim, h))
            self._register("input.bias", np.zeros((1, h)))
        if c.entity_count is not None:
            self._register("embed.node", glorot(rng, c.entity_count, h))
        if c.feature_dim is None and c.entity_count is None:
            # Featureless graphs (graph-set files): one shared learned token,
            # nodes are distinguished by centrality and attention structure.
            self._register("input.token", glorot(rng, 1, h))

        self.centrality = CentralityTable(h, max_degree=c.max_degree, rng=rng)
        self.params["centrality.table"] = self.centrality.table
        self.spd = SpdTable(h, max_distance=c.max_distance, rng=rng)
        self.params["spd.table"] = self.spd.table

        self.structural_layers = []
        self.semantic_layers = []
        for i in range(c.layers):
            st = StructuralLayer(h, c.struct_heads, c.ff_mult, rng)
            se = SemanticLayer(h, c.scorer_heads, c.ff_mult, rng)
            self.structural_layers.append(st)
            self.semantic_layers.append(se)
            self.params.update({f"st{i}.{k}": v for k, v in st.params.items()})
            self.params.update({f"se{i}.{k}": v for k, v in se.params.items()})

        if c.mode == "whole-graph":
            self._register("virtual.node", glorot(rng, 1, h))
            self._register("virtual.spd", glorot(rng, 1, h))

        self.atom: AtomTransformer | None = None
        if c.mode == "kg":
            self._register("embed.relation", glorot(rng, c.relation_count, h))
            self.atom = AtomTransformer(
                h, self.params["embed.relation"], layers=c.atom_layers, heads=1, ff_mult=c.ff_mult, rng=rng
            )
            self.params.update({f"atom.{k}": v for k, v in self.atom.params.items()})
            self._register("kg.mask_token", glorot(rng, 1, h))

        if c.head == "regression":
            self._register("head.w", glorot(rng, h, 1))
            self._register("head.b", np.zeros((1, 1)))
        elif c.head == "classification":
            self._register("head.w", glorot(rng, h, c.class_count))
            self._register("head.b", np.zeros((1, c.class_count)))
        else:  # entity
            self._register("head.entity_bias", np.zeros((1, c.entity_count)))

        self.training = False
        self._bias_replay: list | None = None
        self._bias_replay_pos = 0

    def _register(self, name: str, values: np.ndarray) -> Tensor:
        t = ad.parameter(values)
        self.params[name] = t
        return t

    # -- parameter plumbing ------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.values.copy() for k, v in self.params.items()}

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            v.values = state[k].astype(v.values.dtype, copy=True)

    @property
    def first_scorer(self):
        return self.semantic_layers[0].scorer

    # -- shared input assembly ----------------------------------------------

    def base_inputs(self, g: Graph) -> Tensor:
        """Layer-0 node representations: raw embedding plus centrality."""
        n = g.node_count
        if self.config.feature_dim is not None:
            if g.node_features is None:
                raise ContractError("model expects node features but the graph has none")
            feats = ad.constant(g.node_features.astype(ad.default_dtype()))
            raw = ad.affine(feats, self.params["input.proj"], self.params["input.bias"])
        elif self.config.entity_count is not None:
            if n > self.config.entity_count:
                raise VocabularyError("graph has more nodes than the embedding table")
            raw = ad.embedding_lookup(self.params["embed.node"], list(range(n)))
        else:
            raw = ad.take_rows(self.params["input.token"], [0] * n)
        cent = self.centrality.embed([g.degree(v) for v in range(n)])
        return ad.add(raw, cent)

    def base_input_values(self, g: Graph) -> np.ndarray:
        if ad._active_tape() is not None:
            raise ContractError("base_input_values must run outside a tape")
        return self.base_inputs(g).values

    def refresh_semantic_index(
        self, g: Graph, k: int, candidate_count: int, rng: np.random.Generator,
        epoch: int = 0, workers: int = 1,
    ) -> SemanticNeighborIndex:
        """Rebuild the top-k index with the current embeddings and the
        first-layer scorer."""
        return refresh_index(
            self.base_input_values(g), self.first_scorer, g, k=k,
            candidate_count=candidate_count, rng=rng, epoch=epoch, workers=workers,
        )

    # -- combination ---------------------------------------------------------

    def _combine(self, st: Tensor, se: Tensor) -> Tensor:
        tau = self.config.tau
        return ad.add(ad.scalar_mul(st, tau), ad.scalar_mul(se, 1.0 - tau))

    @contextmanager
    def frozen_bias_exchange(self):
        """Record exchanged biases on the first forward and replay them on
        later forwards (rewind with `rewind_bias_replay`).

        The exchange is gradient-detached, so the loss backward computes is
        a function of the parameters with the biases held fixed; a
        finite-difference oracle must hold them fixed too. Verification
        only; training never uses this.
        """
        self._bias_replay = []
        self._bias_replay_pos = 0
        try:
            yield
        finally:
            self._bias_replay = None

    def rewind_bias_replay(self) -> None:
        self._bias_replay_pos = 0

    def _exchange_pair(
        self,
        st_layer: StructuralLayer,
        se_layer: SemanticLayer,
        st_values: np.ndarray,
        se_values: np.ndarray,
        st_nodes: list[int],
        se_nodes: list[int],
        st_kv_values: np.ndarray | None,
    ) -> tuple[Tensor | None, Tensor | None]:
        """Detached raw logits from each branch, re-indexed onto the other."""
        lam = self.config.lam
        if lam == 0.0:
            return None, None
        if self._bias_replay is not None and self._bias_replay_pos < len(self._bias_replay):
            pair = self._bias_replay[self._bias_replay_pos]
            self._bias_replay_pos += 1
            return pair
        raw_st = st_layer.raw_logits(st_values, st_kv_values)
        raw_se = se_layer.raw_logits(se_values)
        st_bias = bias_exchange(raw_se, se_nodes, st_nodes, lam)
        se_bias = bias_exchange(raw_st, st_nodes, se_nodes, lam)
        if self._bias_replay is not None:
            self._bias_replay.append((st_bias, se_bias))
            self._bias_replay_pos += 1
        return st_bias, se_bias

    # -- ego-node mode --------------------------------------------------------

    def forward_all_nodes(
        self,
        g: Graph,
        index: SemanticNeighborIndex,
        epoch: int | None = None,
        refresh_interval: int | None = None,
        strict: bool = False,
        dropout: float = 0.0,
        rng: np.random.Generator | None = None,
    ) -> NodeForward:
        """One full sweep: re-encode every node per layer, combining branches."""
        if self.config.mode != "ego-node":
            raise ModeError("forward_all_nodes requires ego-node mode")
        if epoch is not None and refresh_interval is not None:
            index.check_fresh(epoch, refresh_interval, strict=strict)
        n = g.node_count
        contexts = [g.ego_graph(v)[0] for v in range(n)]
        sem_lists = [[v] + index.neighbors(v) for v in range(n)]
        layerwise = self.config.combine == "layerwise"
        drop = dropout if self.training else 0.0

        X = self.base_inputs(g)
        X_st, X_se = X, X
        st_final: list[Tensor] = []
        se_final: list[Tensor] = []
        for li in range(self.config.layers):
            st_layer = self.structural_layers[li]
            se_layer = self.semantic_layers[li]
            last = li == self.config.layers - 1
            new_combined: list[Tensor] = []
            new_st: list[Tensor] = []
            new_se: list[Tensor] = []
            for v in range(n):
                ctx = contexts[v]
                sem = sem_lists[v]
                x_ctx = ad.take_rows(X_st if not layerwise else X, ctx)
                x_sem = ad.take_rows(X_se if not layerwise else X, sem)
                kv_extra = self.spd.embed([0] + [1] * (len(ctx) - 1))
                st_bias, se_bias = self._exchange_pair(
                    st_layer, se_layer, x_ctx.values, x_sem.values, ctx, sem, kv_extra.values
                )
                st_out = st_layer.forward(x_ctx, kv_extra=kv_extra, bias=st_bias, dropout=drop, rng=rng)
                se_out = se_layer.forward(x_sem, bias=se_bias, dropout=drop, rng=rng)
                st_row = ad.take_row(st_out.out, 0)
                se_row = ad.take_row(se_out.out, 0)
                new_st.append(st_row)
                new_se.append(se_row)
                if layerwise:
                    new_combined.append(self._combine(st_row, se_row))
            if layerwise:
                X = ad.concat_rows(new_combined)
            else:
                X_st = ad.concat_rows(new_st)
                X_se = ad.concat_rows(new_se)
            if last:
                st_final = new_st
                se_final = new_se
        structural = ad.concat_rows(st_final)
        semantic = ad.concat_rows(se_final)
        combined = X if layerwise else self._combine(structural, semantic)
        return NodeForward(combined=combined, structural=structural, semantic=semantic)

    def forward_node(
        self,
        g: Graph,
        v: int,
        index: SemanticNeighborIndex,
        epoch: int | None = None,
        refresh_interval: int | None = None,
        strict: bool = False,
    ) -> tuple[Tensor, Tensor, Tensor]:
        """Final (combined, structural, semantic) rows for one node."""
        g.check_node(v)
        fw = self.forward_all_nodes(g, index, epoch=epoch, refresh_interval=refresh_interval, strict=strict)
        return ad.take_row(fw.combined, v), ad.take_row(fw.structural, v), ad.take_row(fw.semantic, v)

    # -- whole-graph mode -------------------------------------------------------

    def forward_graph(
        self, g: Graph, dropout: float = 0.0, rng: np.random.Generator | None = None
    ) -> tuple[Tensor, Tensor, Tensor]:
        """Graph embedding: the virtual context node's output row.

        Returns (combined, structural, semantic) readout rows.
        """
        if self.config.mode != "whole-graph":
            raise ModeError("forward_graph requires whole-graph mode")
        n = g.node_count
        if n > self.config.node_cap:
            raise ModeError(
                f"graph has {n} nodes, above the dense-attention cap "
                f"{self.config.node_cap}; use ego-node mode"
            )
        drop = dropout if self.training else 0.0
        base = self.base_inputs(g)
        X = ad.concat_rows([self.params["virtual.node"], base])
        # Distance encoding relative to the readout center: row 0 is the
        # center itself, every real node sits in the dedicated virtual bucket.
        kv_extra = ad.concat_rows(
            [self.spd.embed([0]), ad.take_rows(self.params["virtual.spd"], [0] * n)]
        )
        tokens = list(range(n + 1))
        layerwise = self.config.combine == "layerwise"
        X_st = X_se = X
        st_row = se_row = None
        for li in range(self.config.layers):
            st_layer = self.structural_layers[li]
            se_layer = self.semantic_layers[li]
            st_in = X if layerwise else X_st
            se_in = X if layerwise else X_se
            st_bias, se_bias = self._exchange_pair(
                st_layer, se_layer, st_in.values, se_in.values, tokens, tokens, kv_extra.values
            )
            st_out = st_layer.forward(st_in, kv_extra=kv_extra, bias=st_bias, dropout=drop, rng=rng).out
            se_out = se_layer.forward(se_in, bias=se_bias, dropout=drop, rng=rng).out
            if layerwise:
                X = self._combine(st_out, se_out)
            else:
                X_st, X_se = st_out, se_out
            st_row, se_row = st_out, se_out
        st_read = ad.take_row(st_row, 0)
        se_read = ad.take_row(se_row, 0)
        combined = ad.take_row(X, 0) if layerwise else self._combine(st_read, se_read)
        return combined, st_read, se_read

    # -- kg mode -------------------------------------------------------------

    def _kg_relation_of(self, g: Graph, center: int, neighbor: int) -> int:
        """Relation id seen from the center; inverse offset for incoming edges.

        When several edges connect the pair, the outgoing edge with the
        smallest relation id wins (deterministic choice).
        """
        rel_map = getattr(g, "_duet_rel_map", None)
        if rel_map is None:
            rel_map = {}
            for (u, w), r in zip(g._pairs, g.edge_types or []):
                key = (u, w)
                if key not in rel_map or r < rel_map[key]:
                    rel_map[key] = r
            g._duet_rel_map = rel_map
        base_count = self.config.relation_count // 2
        if (center, neighbor) in rel_map:
            return rel_map[(center, neighbor)]
        if (neighbor, center) in rel_map:
            return rel_map[(neighbor, center)] + base_count
        raise ContractError(f"no edge between {center} and {neighbor}")

    def score_entities(
        self,
        g: Graph,
        head: int,
        relation: int,
        index: SemanticNeighborIndex,
        max_context_neighbors: int = 32,
    ) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        """Scores over all entities for a (head, relation, ?) query.

        Returns (scores row, combined, structural, semantic). Relation ids
        include the inverse block, so tail and head prediction share this
        path. Higher score is better.
        """
        if self.config.mode != "kg":
            raise ModeError("score_entities requires kg mode")
        g.check_node(head)
        if not 0 <= relation < self.config.relation_count:
            raise VocabularyError(f"relation id {relation} outside vocabulary of {self.config.relation_count}")
        base = self.base_inputs(g)
        x_head = ad.take_row(base, head)
        query = self.atom.encode(x_head, relation, self.params["kg.mask_token"])

        neighbors = list(g.one_hop_neighbors(head).members)
        if len(neighbors) > max_context_neighbors:
            # Deterministic cap keyed by the query so runs are reproducible.
            sub_rng = np.random.default_rng((head * 1_000_003 + relation) % (2**63))
            picked = sub_rng.choice(len(neighbors), size=max_context_neighbors, replace=False)
            neighbors = [neighbors[i] for i in sorted(picked)]
        fused = [
            self.atom.encode(x_head, self._kg_relation_of(g, head, u), ad.take_row(base, u))
            for u in neighbors
        ]
        st_nodes = [head] + neighbors
        sem_nodes = [head] + index.neighbors(head)
        X_st = ad.concat_rows([query] + fused) if fused else query
        X_se = (
            ad.concat_rows([query, ad.take_rows(base, sem_nodes[1:])])
            if len(sem_nodes) > 1
            else query
        )
        kv_extra = self.spd.embed([0] + [1] * len(neighbors))
        layerwise = self.config.combine == "layerwise"
        combined = None
        st_row = se_row = None
        for li in range(self.config.layers):
            st_layer = self.structural_layers[li]
            se_layer = self.semantic_layers[li]
            st_bias, se_bias = self._exchange_pair(
                st_layer, se_layer, X_st.values, X_se.values, st_nodes, sem_nodes, kv_extra.values
            )
            st_out = st_layer.forward(X_st, kv_extra=kv_extra, bias=st_bias).out
            se_out = se_layer.forward(X_se, bias=se_bias).out
            st_row = ad.take_row(st_out, 0)
            se_row = ad.take_row(se_out, 0)
            if layerwise:
                combined = self._combine(st_row, se_row)
                X_st = ad.concat_rows([combined, ad.slice_rows(st_out, 1, len(st_nodes))]) \
                    if len(st_nodes) > 1 else combined
                X_se = ad.concat_rows([combined, ad.slice_rows(se_out, 1, len(sem_nodes))]) \
                    if len(sem_nodes) > 1 else combined
            else:
                X_st, X_se = st_out, se_out
        if not layerwise:
            combined = self._combine(st_row, se_row)
        scores = ad.add(
            ad.matmul(combined, ad.transpose(self.params["embed.node"])),
            self.params["head.entity_bias"],
        )
        return scores, combined, st_row, se_row

    # -- task heads -----------------------------------------------------------

    def node_logits(self, rows: Tensor) -> Tensor:
        if self.config.head != "classification":
            raise ModeError("node_logits requires a classification head")
        return ad.affine(rows, self.params["head.w"], self.params["head.b"])

    def regression_value(self, row: Tensor) -> Tensor:
        if self.config.head != "regression":
            raise ModeError("regression_value requires a regression head")
        return ad.affine(row, self.params["head.w"], self.params["head.b"])

    # -- checkpoints ------------------------------------------------------------

    def save(self, path) -> None:
        manifest = {
            "version": 1,
            "config": asdict(self.config),
            "params": [[name, list(t.values.shape)] for name, t in self.params.items()],
        }
        blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            for _, t in self.params.items():
                f.write(np.ascontiguousarray(t.values, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "DuetModel":
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != CHECKPOINT_MAGIC:
                raise CheckpointError(f"bad magic {magic!r}")
            (length,) = struct.unpack("<I", f.read(4))
            try:
                manifest = json.loads(f.read(length).decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as e:
                raise CheckpointError(f"unreadable manifest: {e}") from None
            if manifest.get("version") != 1:
                raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')}")
            config = ModelConfig(**manifest["config"])
            model = cls(config, np.random.default_rng(0))
            names = [n for n, _ in manifest["params"]]
            if names != list(model.params.keys()):
                raise CheckpointError("parameter names in manifest do not match the model")
            for name, shape in manifest["params"]:
                t = model.params[name]
                if list(t.values.shape) != shape:
                    raise CheckpointError(f"shape mismatch for {name}: {shape} vs {list(t.values.shape)}")
                count = int(np.prod(shape))
                raw = f.read(count * 4)
                if len(raw) != count * 4:
                    raise CheckpointError(f"truncated blob for {name}")
                t.values = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(ad.default_dtype())
            if f.read(1):
                raise CheckpointError("trailing bytes after parameter blobs")
        return model
