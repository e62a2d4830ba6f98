"""Finite-difference verification of analytic gradients.

The oracle never touches the tape: it re-runs the forward computation with
perturbed values and forms central differences. Used by the test suite and
by the `gradcheck` CLI subcommand.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err < self.tolerance


def fd_gradient(f: Callable[[], float], t: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f() w.r.t. every element of t."""
    flat = t.values.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + step
        up = f()
        flat[i] = saved - step
        down = f()
        flat[i] = saved
        grad[i] = (up - down) / (2.0 * step)
    return grad.reshape(t.values.shape)


def max_rel_err(analytic: np.ndarray, fd: np.ndarray, floor: float = 1e-2) -> float:
    denom = np.maximum(floor, np.maximum(np.abs(analytic), np.abs(fd)))
    return float(np.max(np.abs(analytic - fd) / denom)) if analytic.size else 0.0


def check_loss_gradients(
    make_loss: Callable[[], Tensor],
    params: dict[str, Tensor],
    step: float = 1e-5,
    floor: float = 1e-3,
) -> dict[str, float]:
    """Backward-vs-finite-difference relative error per named parameter.

    `make_loss` must rebuild the scalar loss from the current parameter
    values each time it is called.
    """
    with Tape():
        loss = make_loss()
        ad.backward(loss)
    analytic = {}
    for name, p in params.items():
        analytic[name] = np.zeros_like(p.values) if p.grad is None else p.grad.copy()
        p.grad = None

    def forward_only() -> float:
        return make_loss().item()

    errs = {}
    for name, p in params.items():
        fd = fd_gradient(forward_only, p, step=step)
        errs[name] = max_rel_err(analytic[name], fd, floor=floor)
    return errs


# ---------------------------------------------------------------------------
# randomized op-level suite


def _away_from(rng: np.random.Generator, shape, margin: float = 0.15) -> np.ndarray:
    """Values bounded away from zero so kinked ops are FD-safe."""
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _op_cases(rng: np.random.Generator):
    """One randomized configuration per differentiable op."""
    n = int(rng.integers(2, 5))
    m = int(rng.integers(2, 5))
    k = int(rng.integers(2, 5))
    a = ad.parameter(rng.normal(size=(n, m)))
    b = ad.parameter(rng.normal(size=(n, m)))
    row = ad.parameter(rng.normal(size=(1, m)))
    cell = ad.parameter(rng.normal(size=(1, 1)))

    yield "add", lambda: ad.add(a, b), [a, b]
    yield "add_broadcast_row", lambda: ad.add(a, row), [a, row]
    yield "add_broadcast_cell", lambda: ad.add(a, cell), [a, cell]
    yield "sub", lambda: ad.sub(a, b), [a, b]
    yield "mul", lambda: ad.mul(a, b), [a, b]
    yield "scalar_mul", lambda: ad.scalar_mul(a, 0.7), [a]

    w = ad.parameter(rng.normal(size=(m, k)))
    yield "matmul", lambda: ad.matmul(a, w), [a, w]
    yield "transpose", lambda: ad.transpose(a), [a]

    shifted = ad.parameter(_away_from(rng, (n, m)))
    yield "relu", lambda: ad.relu(shifted), [shifted]
    yield "absolute", lambda: ad.absolute(shifted), [shifted]
    yield "sigmoid", lambda: ad.sigmoid(a), [a]

    pos = ad.parameter(rng.uniform(0.2, 2.0, size=(n, m)))
    yield "natural_log", lambda: ad.natural_log(pos), [pos]
    yield "clamp", lambda: ad.clamp(shifted, -0.9, 0.9), [shifted]
    yield "reduce_sum", lambda: ad.reduce_sum(a), [a]
    yield "reduce_mean", lambda: ad.reduce_mean(a), [a]

    bias = ad.parameter(rng.normal(size=(n, n)))
    sq = ad.parameter(rng.normal(size=(n, n)))
    yield "row_softmax", lambda: ad.row_softmax(sq), [sq]
    yield "row_softmax_bias", lambda: ad.row_softmax(sq, bias=bias), [sq, bias]
    mask = rng.random((n, n)) < 0.3
    mask[:, 0] = False  # keep every row alive
    yield "row_softmax_mask", lambda: ad.row_softmax(sq, bias=bias, mask=mask), [sq, bias]

    gain = ad.parameter(rng.normal(size=(1, m)) + 1.0)
    shiftp = ad.parameter(rng.normal(size=(1, m)))
    # Keep per-row variance away from zero: central differences on layer_norm
    # are ill-conditioned there (truncation ~ 1/var^(5/2)).
    ln_vals = rng.normal(size=(n, m))
    ln_vals[:, 0] += 2.0
    ln_vals[:, 1] -= 2.0
    ln_x = ad.parameter(ln_vals)
    yield "layer_norm", lambda: ad.layer_norm(ln_x, gain, shiftp), [ln_x, gain, shiftp]
    wb = ad.parameter(rng.normal(size=(1, k)))
    yield "affine", lambda: ad.affine(a, w, wb), [a, w, wb]

    table = ad.parameter(rng.normal(size=(6, m)))
    idx = rng.integers(0, 6, size=4)
    yield "embedding_lookup", lambda: ad.embedding_lookup(table, idx), [table]
    yield "concat_rows", lambda: ad.concat_rows([a, b]), [a, b]
    yield "concat_cols", lambda: ad.concat_cols([a, b]), [a, b]
    yield "slice_rows", lambda: ad.slice_rows(a, 0, max(1, n - 1)), [a]
    yield "slice_cols", lambda: ad.slice_cols(a, 0, max(1, m - 1)), [a]
    yield "take_row", lambda: ad.take_row(a, n - 1), [a]
    cols = rng.integers(0, m, size=n)
    yield "gather_rows", lambda: ad.gather_rows(a, cols), [a]


def _model_scenarios(seed: int, quick: bool):
    """Full-stack losses over a 10-node graph in each operating mode."""
    from .graph import Graph
    from .model import DuetModel, ModelConfig
    from .neighbors import batch_fetching_loss

    rng = np.random.default_rng(seed)

    def small_graph(n, p, typed=False, features=None, labels=None, rng=rng):
        # Path backbone keeps every node attached, random chords on top.
        edges = {(i, i + 1) for i in range(n - 1)}
        for i in range(n):
            for j in range(i + 2, n):
                if rng.random() < p:
                    edges.add((i, j))
        ordered = sorted(edges)
        if typed:
            ordered = [(u, v, int(rng.integers(0, 2))) for u, v in ordered]
        return Graph(n, ordered, directed=typed, node_features=features, node_labels=labels)

    def cross_entropy(logits: Tensor, labels) -> Tensor:
        probs = ad.row_softmax(logits)
        picked = ad.gather_rows(probs, labels)
        return ad.scalar_mul(ad.reduce_mean(ad.natural_log(ad.clamp(picked, 1e-7, 1 - 1e-7))), -1.0)

    # -- ego-node: dual stack + task head + fetching loss over a 10-node graph
    n = 10
    g = small_graph(n, 0.3, features=rng.normal(size=(n, 3)), labels=rng.integers(0, 2, size=n))
    config = ModelConfig(
        mode="ego-node", head="classification", hidden=8, layers=1 if quick else 2,
        struct_heads=2, scorer_heads=1, tau=0.35, lam=1.0, max_degree=8, max_distance=3,
        feature_dim=3, class_count=2,
    )
    model = DuetModel(config, rng)
    index = model.refresh_semantic_index(g, k=3, candidate_count=16, rng=np.random.default_rng(seed + 1))
    batch = [0, 2, 5, 9]
    labels = [int(g.node_labels[v]) for v in batch]

    def ego_loss() -> Tensor:
        model.rewind_bias_replay()
        fw = model.forward_all_nodes(g, index)
        l_main = cross_entropy(model.node_logits(ad.take_rows(fw.combined, batch)), labels)
        l_sn = batch_fetching_loss(
            model.base_inputs(g), model.first_scorer, g, batch, rng=np.random.default_rng(seed + 2)
        )
        return ad.add(l_main, l_sn)

    yield "ego-node-dual-loss", ego_loss, model

    # -- whole-graph: virtual-node readout + regression head
    g2 = small_graph(7, 0.4, rng=np.random.default_rng(seed + 3))
    config2 = ModelConfig(
        mode="whole-graph", head="regression", hidden=6, layers=1, struct_heads=2,
        scorer_heads=1, tau=0.5, lam=0.7, max_degree=6, max_distance=3,
    )
    model2 = DuetModel(config2, np.random.default_rng(seed + 4))

    def graph_loss() -> Tensor:
        model2.rewind_bias_replay()
        h, _, _ = model2.forward_graph(g2)
        pred = model2.regression_value(h)
        return ad.reduce_mean(ad.absolute(ad.sub(pred, ad.constant(np.array([[0.37]])))))

    yield "whole-graph-regression-loss", graph_loss, model2

    if quick:
        return

    # -- kg: atom-transformer tokens + entity scoring
    ents = 12
    g3 = small_graph(ents, 0.25, typed=True, rng=np.random.default_rng(seed + 5))
    config3 = ModelConfig(
        mode="kg", head="entity", hidden=6, layers=1, struct_heads=1, scorer_heads=1,
        tau=0.3, lam=1.0, max_degree=8, max_distance=3,
        entity_count=ents, relation_count=4, atom_layers=1,
    )
    model3 = DuetModel(config3, np.random.default_rng(seed + 6))
    index3 = model3.refresh_semantic_index(g3, k=3, candidate_count=8, rng=np.random.default_rng(seed + 7))
    queries = [(0, 1, 3), (4, 2, 1), (7, 0, 2)]

    def kg_loss() -> Tensor:
        parts = []
        for head, rel, target in queries:
            scores, _, _, _ = model3.score_entities(g3, head, rel, index3)
            probs = ad.row_softmax(scores)
            picked = ad.gather_rows(probs, [target])
            parts.append(ad.natural_log(ad.clamp(picked, 1e-7, 1 - 1e-7)))
        l_main = ad.scalar_mul(ad.reduce_mean(ad.concat_rows(parts)), -1.0)
        l_sn = batch_fetching_loss(
            model3.base_inputs(g3), model3.first_scorer, g3, [q[0] for q in queries],
            rng=np.random.default_rng(seed + 8),
        )
        return ad.add(l_main, l_sn)

    yield "kg-entity-loss", kg_loss, model3.params


def run_model_suite(seed: int = 0, tolerance: float = 1e-4, quick: bool = False) -> list[CheckResult]:
    """Finite-difference check of every parameter of full dual-encoder losses."""
    results = []
    for name, make_loss, params in _model_scenarios(seed, quick):
        errs = check_loss_gradients(make_loss, params, step=1e-5, floor=1e-3)
        results.append(CheckResult(name=name, max_rel_err=max(errs.values()), tolerance=tolerance))
    return results


def run_op_suite(cases: int = 200, seed: int = 0, tolerance: float = 1e-7) -> list[CheckResult]:
    """Randomized finite-difference check across the op catalog.

    Each case wraps the op output in a random weighted sum so upstream
    gradients are non-uniform. Must run at float64.
    """
    results = []
    case_rng = np.random.default_rng(seed)
    produced = 0
    while produced < cases:
        rng = np.random.default_rng(case_rng.integers(0, 2**63))
        for name, build, tensors in _op_cases(rng):
            if produced >= cases:
                break
            weights = None

            def make_loss():
                nonlocal weights
                out = build()
                if weights is None:
                    weights = np.random.default_rng(7).normal(size=out.values.shape)
                return ad.reduce_sum(ad.mul(out, ad.constant(weights)))

            errs = check_loss_gradients(make_loss, {str(i): t for i, t in enumerate(tensors)}, floor=1e-2)
            results.append(CheckResult(name=name, max_rel_err=max(errs.values()), tolerance=tolerance))
            produced += 1
    return results
