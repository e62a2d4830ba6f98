"""Dataset bundles, file formats, synthetic generators, and run configs.

File formats (all plain text, '#' starts a comment line):

* edge list   one edge per line: ``u<TAB>v`` or ``u<TAB>v<TAB>type`` (ints)
* features    one node per line, space-separated decimal reals
* labels      ``node_id<TAB>label`` (one line per node)
* splits      one id per line (node id, triple line number, or graph index)
* triples     ``head<TAB>relation<TAB>tail`` as raw strings
* graph set   blocks separated by blank lines; each block starts with
              ``N <target>`` and is followed by local edge lines
* run config  ``key = value`` lines; unknown keys are rejected

Directory layout: a node-task dataset holds ``edges.tsv``, ``features.txt``,
``labels.tsv`` and ``splits/{train,valid,test}.txt``; a KG dataset holds
``train.tsv``, ``valid.tsv``, ``test.tsv``; a graph-set dataset holds
``graphs.txt`` plus the same splits directory.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, IntegrityError, ParseError
from .graph import Graph
from .training import TrainConfig

SYNTHETIC_KINDS = ("planted-cluster", "block-citation", "toy-kg", "toy-regression")


# ---------------------------------------------------------------------------
# bundles


@dataclass
class NodeTaskBundle:
    graph: Graph
    train_nodes: list[int]
    valid_nodes: list[int]
    test_nodes: list[int]
    extra: dict = field(default_factory=dict)
    kind: str = "node"


@dataclass
class KgBundle:
    entities: list[str]
    relations: list[str]
    train: list[tuple[int, int, int]]
    valid: list[tuple[int, int, int]]
    test: list[tuple[int, int, int]]
    kind: str = "kg"

    def __post_init__(self):
        self._graph: Graph | None = None

    def graph(self) -> Graph:
        """Typed directed graph over the training triples (message structure)."""
        if self._graph is None:
            seen = set()
            edges = []
            for h, r, t in self.train:
                if (h, t, r) not in seen and h != t:
                    seen.add((h, t, r))
                    edges.append((h, t, r))
            self._graph = Graph(len(self.entities), edges, directed=True)
        return self._graph

    def queries(self, split: str) -> list[tuple[int, int, int]]:
        """(head, relation, answer) pairs; tail prediction uses the base
        relation id, head prediction the inverse block id."""
        triples = {"train": self.train, "valid": self.valid, "test": self.test}[split]
        base = len(self.relations)
        out = []
        for h, r, t in triples:
            out.append((h, r, t))
            out.append((t, r + base, h))
        return out

    def known_targets(self) -> dict[tuple[int, int], set[int]]:
        """All true answers per query over every split (filtered protocol)."""
        known: dict[tuple[int, int], set[int]] = {}
        base = len(self.relations)
        for triples in (self.train, self.valid, self.test):
            for h, r, t in triples:
                known.setdefault((h, r), set()).add(t)
                known.setdefault((t, r + base), set()).add(h)
        return known


@dataclass
class GraphSetBundle:
    graphs: list[tuple[Graph, float]]
    train_indices: list[int]
    valid_indices: list[int]
    test_indices: list[int]
    kind: str = "graph-set"


# ---------------------------------------------------------------------------
# low-level parsing


def _data_lines(path) -> list[tuple[int, str]]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for no, line in enumerate(f, start=1):
            stripped = line.rstrip("\n")
            if not stripped.strip() or stripped.lstrip().startswith("#"):
                continue
            out.append((no, stripped))
    return out


def _parse_int(token: str, line_no: int, what: str) -> int:
    try:
        return int(token)
    except ValueError:
        raise ParseError(f"expected integer {what}, got {token!r}", line_no) from None


def load_edge_list(path) -> Graph:
    """Parse an edge-list file into a Graph (n inferred from the max id)."""
    edges = parse_edges(_data_lines(path))
    n = 1 + max((max(e[0], e[1]) for e in edges), default=-1)
    return Graph(n, edges)


def parse_edges(lines: list[tuple[int, str]]) -> list[tuple]:
    edges: list[tuple] = []
    seen: set[tuple] = set()
    typed: bool | None = None
    for no, line in lines:
        parts = line.split("\t")
        if len(parts) not in (2, 3):
            raise ParseError(f"expected 'u<TAB>v' or 'u<TAB>v<TAB>type', got {line!r}", no)
        u = _parse_int(parts[0], no, "source node")
        v = _parse_int(parts[1], no, "target node")
        if typed is None:
            typed = len(parts) == 3
        elif typed != (len(parts) == 3):
            raise ParseError("edge type must be present on all edges or none", no)
        edge = (u, v, _parse_int(parts[2], no, "edge type")) if typed else (u, v)
        if edge in seen:
            raise ParseError(f"duplicate edge {edge}", no)
        seen.add(edge)
        edges.append(edge)
    return edges


def load_features(path) -> np.ndarray:
    rows = []
    width = None
    for no, line in _data_lines(path):
        try:
            row = [float(tok) for tok in line.split()]
        except ValueError:
            raise ParseError(f"malformed feature row {line!r}", no) from None
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise ParseError(f"feature row has {len(row)} values, expected {width}", no)
        rows.append(row)
    if not rows:
        raise ParseError("empty feature file", None)
    return np.asarray(rows, dtype=np.float64)


def load_labels(path, node_count: int) -> np.ndarray:
    labels = np.full(node_count, -1, dtype=np.int64)
    for no, line in _data_lines(path):
        parts = line.split("\t")
        if len(parts) != 2:
            raise ParseError(f"expected 'node<TAB>label', got {line!r}", no)
        v = _parse_int(parts[0], no, "node id")
        if not 0 <= v < node_count:
            raise IntegrityError(f"label references unknown node {v}")
        labels[v] = _parse_int(parts[1], no, "label")
    if np.any(labels < 0):
        raise IntegrityError("some nodes have no label")
    return labels


def load_split_file(path, limit: int) -> list[int]:
    ids = []
    for no, line in _data_lines(path):
        v = _parse_int(line.strip(), no, "id")
        if not 0 <= v < limit:
            raise IntegrityError(f"split references out-of-range id {v}")
        ids.append(v)
    return ids


def load_triples(path) -> list[tuple[str, str, str]]:
    triples = []
    for no, line in _data_lines(path):
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(f"expected 'head<TAB>relation<TAB>tail', got {line!r}", no)
        triples.append((parts[0], parts[1], parts[2]))
    return triples


def load_graph_set_file(path) -> list[tuple[Graph, float]]:
    graphs = []
    block: list[tuple[int, str]] = []

    def flush(block_lines):
        if not block_lines:
            return
        no, header = block_lines[0]
        parts = header.split()
        if len(parts) != 2:
            raise ParseError(f"graph block must start with 'N <target>', got {header!r}", no)
        n = _parse_int(parts[0], no, "node count")
        try:
            target = float(parts[1])
        except ValueError:
            raise ParseError(f"malformed target {parts[1]!r}", no) from None
        edges = parse_edges(block_lines[1:])
        for e in edges:
            if e[0] >= n or e[1] >= n:
                raise IntegrityError(f"edge {e[:2]} references a node >= {n}")
        graphs.append((Graph(n, edges), target))

    with open(path, "r", encoding="utf-8") as f:
        for no, raw in enumerate(f, start=1):
            line = raw.rstrip("\n")
            if line.lstrip().startswith("#"):
                continue
            if not line.strip():
                flush(block)
                block = []
            else:
                block.append((no, line))
    flush(block)
    if not graphs:
        raise ParseError("empty graph-set file", None)
    return graphs


# ---------------------------------------------------------------------------
# bundle loading


def load_node_bundle(root) -> NodeTaskBundle:
    root = Path(root)
    features = load_features(root / "features.txt")
    n = features.shape[0]
    edges = parse_edges(_data_lines(root / "edges.tsv"))
    for e in edges:
        if e[0] >= n or e[1] >= n:
            raise IntegrityError(f"edge {e[:2]} references a node >= {n}")
    labels = load_labels(root / "labels.tsv", n)
    graph = Graph(n, edges, node_features=features, node_labels=labels)
    splits = {name: load_split_file(root / "splits" / f"{name}.txt", n) for name in ("train", "valid", "test")}
    _check_disjoint(splits)
    return NodeTaskBundle(graph=graph, train_nodes=splits["train"],
                          valid_nodes=splits["valid"], test_nodes=splits["test"])


def _check_disjoint(splits: dict[str, list[int]]) -> None:
    names = list(splits)
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            overlap = set(splits[a]) & set(splits[b])
            if overlap:
                raise IntegrityError(f"splits {a} and {b} overlap: {sorted(overlap)[:5]}")


def load_kg_bundle(root) -> KgBundle:
    root = Path(root)
    raw = {name: load_triples(root / f"{name}.tsv") for name in ("train", "valid", "test")}
    entities: dict[str, int] = {}
    relations: dict[str, int] = {}
    for split in ("train", "valid", "test"):
        for h, r, t in raw[split]:
            for e in (h, t):
                if e not in entities:
                    entities[e] = len(entities)
            if r not in relations:
                relations[r] = len(relations)
    ids = {
        split: [(entities[h], relations[r], entities[t]) for h, r, t in raw[split]]
        for split in raw
    }
    return KgBundle(entities=list(entities), relations=list(relations),
                    train=ids["train"], valid=ids["valid"], test=ids["test"])


def load_graph_set_bundle(root) -> GraphSetBundle:
    root = Path(root)
    graphs = load_graph_set_file(root / "graphs.txt")
    splits = {
        name: load_split_file(root / "splits" / f"{name}.txt", len(graphs))
        for name in ("train", "valid", "test")
    }
    _check_disjoint(splits)
    return GraphSetBundle(graphs=graphs, train_indices=splits["train"],
                          valid_indices=splits["valid"], test_indices=splits["test"])


def load_dataset(root) -> NodeTaskBundle | KgBundle | GraphSetBundle:
    """Sniff the bundle kind from the directory layout."""
    root = Path(root)
    if (root / "train.tsv").exists():
        return load_kg_bundle(root)
    if (root / "graphs.txt").exists():
        return load_graph_set_bundle(root)
    if (root / "edges.tsv").exists():
        return load_node_bundle(root)
    raise ContractError(f"no recognizable dataset at {root}")


# ---------------------------------------------------------------------------
# bundle saving


def _write_lines(path, lines) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for line in lines:
            f.write(line + "\n")


def save_bundle(bundle, root) -> None:
    root = Path(root)
    if bundle.kind == "node":
        g = bundle.graph
        typed = g.edge_types is not None
        _write_lines(root / "edges.tsv", (
            f"{u}\t{v}\t{g.edge_types[i]}" if typed else f"{u}\t{v}"
            for i, (u, v) in enumerate(g._pairs)
        ))
        _write_lines(root / "features.txt", (" ".join(repr(float(x)) for x in row) for row in g.node_features))
        _write_lines(root / "labels.tsv", (f"{v}\t{int(g.node_labels[v])}" for v in range(g.node_count)))
        for name, ids in (("train", bundle.train_nodes), ("valid", bundle.valid_nodes), ("test", bundle.test_nodes)):
            _write_lines(root / "splits" / f"{name}.txt", (str(v) for v in ids))
    elif bundle.kind == "kg":
        for name, triples in (("train", bundle.train), ("valid", bundle.valid), ("test", bundle.test)):
            _write_lines(root / f"{name}.tsv", (
                f"{bundle.entities[h]}\t{bundle.relations[r]}\t{bundle.entities[t]}" for h, r, t in triples
            ))
    elif bundle.kind == "graph-set":
        lines: list[str] = []
        for g, target in bundle.graphs:
            lines.append(f"{g.node_count} {target!r}")
            lines.extend(f"{u}\t{v}" for u, v in g._pairs)
            lines.append("")
        _write_lines(root / "graphs.txt", lines[:-1])
        for name, ids in (("train", bundle.train_indices), ("valid", bundle.valid_indices), ("test", bundle.test_indices)):
            _write_lines(root / "splits" / f"{name}.txt", (str(v) for v in ids))
    else:
        raise ContractError(f"unknown bundle kind {bundle.kind}")


# ---------------------------------------------------------------------------
# synthetic datasets


def generate_synthetic(kind: str, params: dict | None = None, seed: int = 0):
    """Deterministic synthetic bundles for the directional experiments."""
    params = dict(params or {})
    if kind == "planted-cluster":
        return _planted_cluster(seed=seed, **params)
    if kind == "block-citation":
        return _block_citation(seed=seed, **params)
    if kind == "toy-kg":
        return _toy_kg(seed=seed, **params)
    if kind == "toy-regression":
        return _toy_regression(seed=seed, **params)
    raise ContractError(f"unknown synthetic kind {kind!r}; choose from {SYNTHETIC_KINDS}")


def _split_ids(ids: list[int], rng: np.random.Generator, frac=(0.6, 0.2)) -> tuple[list, list, list]:
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]
    a = int(len(ids) * frac[0])
    b = a + int(len(ids) * frac[1])
    return shuffled[:a], shuffled[a:b], shuffled[b:]


def _planted_cluster(
    seed: int = 0,
    nodes: int = 200,
    clusters: int = 4,
    feature_dim: int = 8,
    intra_degree: int = 4,
    cross_edges: int = 10,
    feature_noise: float = 0.3,
) -> NodeTaskBundle:
    """Clusters with correlated features; edges stay mostly inside a cluster,
    so same-cluster nodes beyond one hop are the ground-truth semantic
    neighbors."""
    if nodes // clusters < 2:
        raise ContractError("cluster size must be at least 2")
    rng = np.random.default_rng(seed)
    size = nodes // clusters
    labels = np.array([min(v // size, clusters - 1) for v in range(nodes)])
    prototypes = rng.normal(0.0, 1.0, size=(clusters, feature_dim)) * 2.0
    features = prototypes[labels] + rng.normal(0.0, feature_noise, size=(nodes, feature_dim))

    members = [list(np.where(labels == c)[0]) for c in range(clusters)]
    edges: set[tuple[int, int]] = set()

    def add_edge(u, v):
        if u == v:
            return
        edges.add((min(u, v), max(u, v)))

    for group in members:
        for i, v in enumerate(group):
            add_edge(v, group[(i + 1) % len(group)])  # ring keeps clusters connected
        target_extra = max(0, (intra_degree - 2) * len(group) // 2)
        for _ in range(target_extra):
            u, v = rng.choice(group, size=2, replace=False)
            add_edge(int(u), int(v))
    for _ in range(cross_edges):
        a, b = rng.choice(clusters, size=2, replace=False)
        add_edge(int(rng.choice(members[a])), int(rng.choice(members[b])))

    g = Graph(nodes, sorted(edges), node_features=features, node_labels=labels)
    train, valid, test = _split_ids(list(range(nodes)), rng)
    return NodeTaskBundle(graph=g, train_nodes=train, valid_nodes=valid, test_nodes=test,
                          extra={"clusters": labels.tolist(), "cross_edges": cross_edges})


def _block_citation(
    seed: int = 0,
    nodes: int = 120,
    blocks: int = 3,
    feature_dim: int = 8,
    p_in: float = 0.06,
    p_out: float = 0.02,
    feature_noise: float = 0.8,
    train_per_class: int = 20,
) -> NodeTaskBundle:
    """Stochastic-block graph with label-correlated features. Features carry
    most of the signal (citation-style); edges are mildly homophilous."""
    rng = np.random.default_rng(seed)
    labels = np.array([v % blocks for v in range(nodes)])
    prototypes = np.eye(blocks, feature_dim) * 3.0
    features = prototypes[labels] + rng.normal(0.0, feature_noise, size=(nodes, feature_dim))
    edges = []
    for u in range(nodes):
        for v in range(u + 1, nodes):
            p = p_in if labels[u] == labels[v] else p_out
            if rng.random() < p:
                edges.append((u, v))
    g = Graph(nodes, edges, node_features=features, node_labels=labels)
    train: list[int] = []
    for c in range(blocks):
        pool = [v for v in range(nodes) if labels[v] == c]
        picked = rng.choice(len(pool), size=min(train_per_class, len(pool)), replace=False)
        train.extend(pool[i] for i in sorted(picked))
    rest = [v for v in range(nodes) if v not in set(train)]
    order = rng.permutation(len(rest))
    half = len(rest) // 2
    valid = [rest[i] for i in order[:half]]
    test = [rest[i] for i in order[half:]]
    return NodeTaskBundle(graph=g, train_nodes=sorted(train), valid_nodes=sorted(valid),
                          test_nodes=sorted(test), extra={"blocks": blocks})


def _toy_kg(
    seed: int = 0,
    clusters: int = 10,
    cluster_size: int = 10,
    same_per_entity: int = 4,
    next_triples: int = 300,
) -> KgBundle:
    """~100 entities in clusters; 'same_cluster' links entities within a
    cluster, 'next_cluster' links a cluster ring. Held-out triples stay
    inferable from the remaining pattern instances."""
    rng = np.random.default_rng(seed)
    n = clusters * cluster_size
    entities = [f"e{i}" for i in range(n)]
    relations = ["same_cluster", "next_cluster"]
    triples: set[tuple[int, int, int]] = set()
    for v in range(n):
        c = v // cluster_size
        mates = [u for u in range(c * cluster_size, (c + 1) * cluster_size) if u != v]
        picked = rng.choice(len(mates), size=min(same_per_entity, len(mates)), replace=False)
        for i in picked:
            triples.add((v, 0, mates[i]))
    for _ in range(next_triples):
        c = int(rng.integers(0, clusters))
        h = int(rng.integers(0, cluster_size)) + c * cluster_size
        t = int(rng.integers(0, cluster_size)) + ((c + 1) % clusters) * cluster_size
        triples.add((h, 1, t))
    ordered = sorted(triples)
    order = rng.permutation(len(ordered))
    shuffled = [ordered[i] for i in order]
    a = int(len(shuffled) * 0.8)
    b = a + int(len(shuffled) * 0.1)
    return KgBundle(entities=entities, relations=relations,
                    train=shuffled[:a], valid=shuffled[a:b], test=shuffled[b:])


def _toy_regression(
    seed: int = 0,
    count: int = 60,
    min_nodes: int = 8,
    max_nodes: int = 14,
) -> GraphSetBundle:
    """Small random graphs; the target mixes edge density with triangle
    density, so it is inferable from structure alone."""
    rng = np.random.default_rng(seed)
    graphs = []
    for _ in range(count):
        n = int(rng.integers(min_nodes, max_nodes + 1))
        p = rng.uniform(0.25, 0.55)
        edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
        g = Graph(n, edges)
        adj = np.zeros((n, n), dtype=np.int64)
        for u, v in edges:
            adj[u, v] = adj[v, u] = 1
        triangles = int(np.trace(adj @ adj @ adj) // 6)
        density = len(edges) / (n * (n - 1) / 2)
        tri_density = triangles / (n * (n - 1) * (n - 2) / 6)
        graphs.append((g, float(density + 2.0 * tri_density)))
    train, valid, test = _split_ids(list(range(count)), rng, frac=(0.7, 0.15))
    return GraphSetBundle(graphs=graphs, train_indices=train, valid_indices=valid, test_indices=test)


# ---------------------------------------------------------------------------
# run configuration files


_CONFIG_EXTRA_KEYS = ("data", "out")


def parse_config_file(path) -> dict[str, str]:
    out: dict[str, str] = {}
    for no, line in _data_lines(path):
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {line!r}", no)
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key or not value:
            raise ParseError(f"expected 'key = value', got {line!r}", no)
        if key in out:
            raise ParseError(f"duplicate key {key!r}", no)
        out[key] = value
    return out


def _convert(value: str, target_type, key: str):
    if target_type is bool:
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ContractError(f"config key {key!r} expects a boolean, got {value!r}")
    try:
        return target_type(value)
    except ValueError:
        raise ContractError(f"config key {key!r} expects {target_type.__name__}, got {value!r}") from None


def run_config_from_file(path, seed_override: int | None = None) -> tuple[TrainConfig, str, str]:
    """Build (TrainConfig, data path, out path) from a key = value file.

    Unknown keys are errors. Relative data paths resolve against
    $DUET_DATA_ROOT when it is set.
    """
    raw = parse_config_file(path)
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    kwargs = {}
    data = out = None
    for key, value in raw.items():
        if key == "data":
            data = value
        elif key == "out":
            out = value
        elif key in fields:
            ftype = fields[key].type
            target = {"int": int, "float": float, "str": str, "bool": bool}.get(str(ftype), str)
            kwargs[key] = _convert(value, target, key)
        else:
            known = sorted(list(fields) + list(_CONFIG_EXTRA_KEYS))
            raise ContractError(f"unknown config key {key!r}; known keys: {', '.join(known)}")
    if "task" not in kwargs:
        raise ContractError("config file must set 'task'")
    if data is None:
        raise ContractError("config file must set 'data'")
    if seed_override is not None:
        kwargs["seed"] = seed_override
    task = kwargs.pop("task")
    config = TrainConfig.for_task(task, **kwargs)
    root = os.environ.get("DUET_DATA_ROOT")
    if root and not os.path.isabs(data):
        data = os.path.join(root, data)
    return config, data, out or "."
