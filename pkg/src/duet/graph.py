"""Graph storage and structural queries.

Immutable adjacency structure with the neighborhood, shortest-path and
sampling primitives the encoders are built on. All queries are safe to run
concurrently; randomized operations take an explicit RNG.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, IntegrityError, InvalidNodeError, SamplingError


class _Unreachable:
    """Sentinel for node pairs with no connecting path.

    Deliberately not an integer so it can never leak into arithmetic;
    embedding lookups translate it to a dedicated table row.
    """

    __slots__ = ()

    def __repr__(self) -> str:
        return "UNREACHABLE"


UNREACHABLE = _Unreachable()


@dataclass(frozen=True)
class NeighborSet:
    """A center node together with a sorted, duplicate-free set of other nodes."""

    center: int
    members: tuple[int, ...]

    def __post_init__(self):
        if self.center in self.members:
            raise ContractError("NeighborSet members must exclude the center")
        if list(self.members) != sorted(set(self.members)):
            raise ContractError("NeighborSet members must be sorted and unique")

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(self.members)


@dataclass(eq=False)
class Graph:
    """A fixed graph: `node_count` nodes and a list of (u, v[, type]) edges.

    Edges are stored as given. Neighborhood queries default to the
    symmetric view (an edge in either direction makes two nodes neighbors),
    which is also the view used for shortest paths. Optional per-node
    features and labels ride along for the learning tasks.
    """

    node_count: int
    edges: list[tuple]
    directed: bool = False
    node_features: np.ndarray | None = None
    node_labels: np.ndarray | None = None
    allow_self_loops: bool = False

    edge_types: list[int] | None = field(init=False, default=None)

    def __post_init__(self):
        n = self.node_count
        if n < 0:
            raise ContractError("node_count must be non-negative")
        typed_flags = {len(e) == 3 for e in self.edges}
        if len(typed_flags) > 1:
            raise IntegrityError("edge_type must be present on all edges or none")
        pairs: list[tuple[int, int]] = []
        types: list[int] = []
        seen: set[tuple] = set()
        for e in self.edges:
            u, v = int(e[0]), int(e[1])
            if not (0 <= u < n and 0 <= v < n):
                raise InvalidNodeError(f"edge ({u}, {v}) references a node >= {n}")
            if u == v and not self.allow_self_loops:
                raise IntegrityError(f"self-loop at node {u} rejected")
            key = (u, v, e[2] if len(e) == 3 else None)
            if key in seen:
                raise IntegrityError(f"duplicate edge {key[:2]} rejected")
            seen.add(key)
            pairs.append((u, v))
            if len(e) == 3:
                types.append(int(e[2]))
        if types:
            self.edge_types = types
        if self.node_features is not None:
            self.node_features = np.asarray(self.node_features, dtype=np.float64)
            if self.node_features.shape[0] != n:
                raise IntegrityError("feature row count must equal node_count")
        if self.node_labels is not None:
            self.node_labels = np.asarray(self.node_labels)
            if self.node_labels.shape[0] != n:
                raise IntegrityError("label count must equal node_count")

        self._pairs = pairs
        out_adj: list[set[int]] = [set() for _ in range(n)]
        in_adj: list[set[int]] = [set() for _ in range(n)]
        self._deg_in = [0] * n
        self._deg_out = [0] * n
        for u, v in pairs:
            out_adj[u].add(v)
            in_adj[v].add(u)
            self._deg_out[u] += 1
            self._deg_in[v] += 1
        self._out = [tuple(sorted(s)) for s in out_adj]
        self._in = [tuple(sorted(s)) for s in in_adj]
        self._sym = [tuple(sorted(a | b)) for a, b in zip(out_adj, in_adj)]
        self._bfs_cache: dict[int, list] = {}

    # -- basic accessors -------------------------------------------------

    @property
    def edge_count(self) -> int:
        return len(self._pairs)

    @property
    def has_edge_types(self) -> bool:
        return self.edge_types is not None

    def check_node(self, v: int) -> int:
        v = int(v)
        if not 0 <= v < self.node_count:
            raise InvalidNodeError(f"node {v} out of range [0, {self.node_count})")
        return v

    # -- neighborhood ----------------------------------------------------

    def one_hop_neighbors(self, v: int, symmetric: bool = True) -> NeighborSet:
        """All nodes sharing an edge with `v` (either direction by default)."""
        v = self.check_node(v)
        adj = self._sym if symmetric or not self.directed else self._out
        members = tuple(u for u in adj[v] if u != v)
        return NeighborSet(center=v, members=members)

    def ego_graph(self, v: int) -> tuple[list[int], list[tuple[int, int]]]:
        """The center-first node list of the one-hop ego graph and its induced edges."""
        v = self.check_node(v)
        nodes = [v] + list(self.one_hop_neighbors(v).members)
        node_set = set(nodes)
        induced = [(u, w) for u, w in self._pairs if u in node_set and w in node_set]
        return nodes, induced

    def degree(self, v: int, mode: str = "total") -> int:
        """Count of incident edges; `mode` is one of total, in, out."""
        v = self.check_node(v)
        if mode == "in":
            return self._deg_in[v]
        if mode == "out":
            return self._deg_out[v]
        if mode == "total":
            return self._deg_in[v] + self._deg_out[v]
        raise ContractError(f"unknown degree mode {mode!r}")

    # -- distances -------------------------------------------------------

    def _distances_from(self, v: int) -> list:
        """BFS distances from v over the symmetric view; cached per source."""
        cached = self._bfs_cache.get(v)
        if cached is not None:
            return cached
        dist: list = [UNREACHABLE] * self.node_count
        dist[v] = 0
        queue = deque([v])
        while queue:
            u = queue.popleft()
            d = dist[u] + 1
            for w in self._sym[u]:
                if dist[w] is UNREACHABLE:
                    dist[w] = d
                    queue.append(w)
        self._bfs_cache[v] = dist
        return dist

    def shortest_path_distance(self, u: int, v: int):
        """Hop count of the shortest path between u and v, or UNREACHABLE."""
        u = self.check_node(u)
        v = self.check_node(v)
        return self._distances_from(u)[v]

    def hop_statistics(self, max_hop: int) -> list[float]:
        """Mean exact-shell size per hop: entry k-1 is the average, over all
        nodes, of how many nodes sit at shortest-path distance exactly k."""
        if max_hop < 1:
            raise ContractError("max_hop must be >= 1")
        n = self.node_count
        if n == 0:
            return [0.0] * max_hop
        counts = np.zeros(max_hop, dtype=np.float64)
        for v in range(n):
            for d in self._distances_from(v):
                if d is not UNREACHABLE and 1 <= d <= max_hop:
                    counts[d - 1] += 1
        return list(counts / n)

    # -- sampling ----------------------------------------------------------

    def distant_pool(self, v: int) -> list[int]:
        """Nodes outside the closed one-hop neighborhood of v, ascending."""
        v = self.check_node(v)
        excluded = set(self._sym[v]) | {v}
        return [u for u in range(self.node_count) if u not in excluded]

    def sample_distant_negatives(self, v: int, count: int, rng: np.random.Generator) -> NeighborSet:
        """Uniform sample without replacement from the distant pool of v.

        Returns the whole pool when it is smaller than `count`; raises
        SamplingError when the pool is empty.
        """
        v = self.check_node(v)
        if count < 1:
            raise ContractError("count must be >= 1")
        pool = self.distant_pool(v)
        if not pool:
            raise SamplingError(f"node {v} has no distant nodes to sample from")
        if count >= len(pool):
            chosen = pool
        else:
            chosen = rng.choice(len(pool), size=count, replace=False)
            chosen = [pool[i] for i in chosen]
        return NeighborSet(center=v, members=tuple(sorted(int(c) for c in chosen)))
