"""Training loop, task losses, optimizers wiring, and evaluation metrics.

One epoch follows the same skeleton for every task: refresh the semantic
neighbor index at refresh boundaries, then for each batch run both encoders
with bias exchange, combine, add the weighted fetching loss to the task
loss, backprop, and step the optimizer. Early stopping watches the primary
validation metric and the returned model is the best snapshot seen.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ContractError, DivergenceError
from .model import DuetModel, ModelConfig
from .neighbors import batch_fetching_loss
from .optim import OPTIMIZERS, Optimizer

log = logging.getLogger(__name__)

TASKS = ("graph-regression", "node-classification", "kg-completion")
CLAMP_EPS = 1e-7


@dataclass
class TrainConfig:
    """Every knob of a training run; defaults follow the per-task anchors."""

    task: str
    epochs: int = 50
    batch_size: int = 0  # 0 = full batch
    learning_rate: float = 0.005
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    tau: float = 0.15
    lam: float = 1.0
    alpha: float = 1.0
    k: int = 16
    candidate_count: int = 1024
    refresh_interval: int = 1
    seed: int = 0
    layers: int = 2
    hidden: int = 16
    struct_heads: int = 2
    scorer_heads: int = 1
    ff_mult: int = 2
    dropout: float = 0.0
    patience: int = 20
    max_degree: int = 64
    max_distance: int = 8
    atom_layers: int = 1
    combine: str = "layerwise"
    strict_staleness: bool = False
    max_context_neighbors: int = 32
    negatives_per_node: int = 0  # 0 = match positives, capped at 16
    node_cap: int = 256
    dtype: str = "float32"
    threads: int = 1

    def __post_init__(self):
        if self.task not in TASKS:
            raise ContractError(f"task must be one of {TASKS}")
        if self.optimizer not in OPTIMIZERS:
            raise ContractError(f"optimizer must be one of {OPTIMIZERS}")
        for name in ("learning_rate", "beta1", "beta2", "eps"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be non-negative")
        if self.refresh_interval < 1:
            raise ContractError("refresh_interval must be >= 1")
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ContractError("dtype must be float32 or float64")

    @classmethod
    def for_task(cls, task: str, **overrides) -> "TrainConfig":
        """Task-anchored defaults: node classification trains with Adam at
        0.005 on a two-layer stack; KG completion uses Adamax at 0.01 with
        16 semantic neighbors refreshed every 10 epochs."""
        base: dict = {"task": task}
        if task == "node-classification":
            base.update(learning_rate=0.005, optimizer="adam", layers=2, batch_size=0, refresh_interval=1)
        elif task == "kg-completion":
            base.update(learning_rate=0.01, optimizer="adamax", layers=1, hidden=32,
                        batch_size=256, refresh_interval=10, k=16)
        elif task == "graph-regression":
            base.update(learning_rate=0.005, optimizer="adam", layers=2, hidden=24,
                        batch_size=256, alpha=0.0)
        base.update(overrides)
        return cls(**base)

    def model_config(self, bundle) -> ModelConfig:
        common = dict(
            hidden=self.hidden, layers=self.layers, struct_heads=self.struct_heads,
            scorer_heads=self.scorer_heads, ff_mult=self.ff_mult, tau=self.tau, lam=self.lam,
            max_degree=self.max_degree, max_distance=self.max_distance,
            atom_layers=self.atom_layers, node_cap=self.node_cap, combine=self.combine,
        )
        if self.task == "node-classification":
            g = bundle.graph
            class_count = int(np.max(g.node_labels)) + 1
            return ModelConfig(mode="ego-node", head="classification",
                               feature_dim=g.node_features.shape[1], class_count=class_count, **common)
        if self.task == "kg-completion":
            return ModelConfig(mode="kg", head="entity", entity_count=len(bundle.entities),
                               relation_count=2 * len(bundle.relations), **common)
        return ModelConfig(mode="whole-graph", head="regression", **common)


@dataclass
class MetricRow:
    epoch: int
    split: str
    metric: str
    value: float
    wall_clock: float


class MetricReport:
    """Append-only table of per-epoch metrics.

    Wall-clock is kept on the in-memory rows for progress logging but is
    excluded from the persisted CSV so identical runs serialize identically.
    """

    def __init__(self):
        self.rows: list[MetricRow] = []

    def append(self, epoch: int, split: str, metric: str, value: float) -> None:
        self.rows.append(MetricRow(epoch, split, metric, float(value), time.monotonic()))

    def values(self, split: str, metric: str) -> list[tuple[int, float]]:
        return [(r.epoch, r.value) for r in self.rows if r.split == split and r.metric == metric]

    def last(self, split: str, metric: str) -> float:
        seq = self.values(split, metric)
        if not seq:
            raise KeyError(f"no rows for {split}/{metric}")
        return seq[-1][1]

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("epoch,split,metric,value\n")
            for r in self.rows:
                f.write(f"{r.epoch},{r.split},{r.metric},{r.value!r}\n")


PRIMARY_METRIC = {
    "node-classification": ("accuracy", max),
    "kg-completion": ("mrr", max),
    "graph-regression": ("mae", min),
}


def _cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    probs = ad.row_softmax(logits)
    picked = ad.gather_rows(probs, labels)
    return ad.scalar_mul(ad.reduce_mean(ad.natural_log(ad.clamp(picked, CLAMP_EPS, 1.0 - CLAMP_EPS))), -1.0)


def _binary_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    p = ad.clamp(ad.sigmoid(logits), CLAMP_EPS, 1.0 - CLAMP_EPS)
    t = ad.constant(targets.astype(ad.default_dtype()))
    pos = ad.mul(t, ad.natural_log(p))
    neg = ad.mul(ad.sub(ad.constant(np.ones_like(targets, dtype=ad.default_dtype())), t),
                 ad.natural_log(ad.sub(ad.constant(np.ones(logits.shape, dtype=ad.default_dtype())), p)))
    return ad.scalar_mul(ad.reduce_mean(ad.add(pos, neg)), -1.0)


class _Trainer:
    def __init__(self, config: TrainConfig, bundle, model: DuetModel):
        self.config = config
        self.bundle = bundle
        self.model = model
        self.rng = np.random.default_rng(config.seed)
        self.optimizer = Optimizer(config.optimizer, config.learning_rate,
                                   beta1=config.beta1, beta2=config.beta2, eps=config.eps)
        self.index = None
        if config.task == "kg-completion":
            self.kg_graph = bundle.graph()
            self.train_queries = bundle.queries("train")

    # -- index ----------------------------------------------------------------

    def maybe_refresh(self, epoch: int) -> None:
        if self.config.task == "graph-regression":
            return
        if epoch % self.config.refresh_interval == 0 or self.index is None:
            g = self.kg_graph if self.config.task == "kg-completion" else self.bundle.graph
            self.index = self.model.refresh_semantic_index(
                g, k=self.config.k, candidate_count=self.config.candidate_count,
                rng=np.random.default_rng(self.rng.integers(0, 2**63)),
                epoch=epoch, workers=self.config.threads,
            )

    # -- per-task batches and losses -------------------------------------------

    def batches(self, epoch: int) -> list:
        c = self.config
        if c.task == "node-classification":
            nodes = list(self.bundle.train_nodes)
            if c.batch_size and c.batch_size < len(nodes):
                order = self.rng.permutation(len(nodes))
                nodes = [nodes[i] for i in order]
                return [nodes[i : i + c.batch_size] for i in range(0, len(nodes), c.batch_size)]
            return [nodes]
        if c.task == "kg-completion":
            queries = list(self.train_queries)
            order = self.rng.permutation(len(queries))
            queries = [queries[i] for i in order]
            size = c.batch_size or len(queries)
            return [queries[i : i + size] for i in range(0, len(queries), size)]
        graphs = list(self.bundle.train_indices)
        order = self.rng.permutation(len(graphs))
        graphs = [graphs[i] for i in order]
        size = c.batch_size or len(graphs)
        return [graphs[i : i + size] for i in range(0, len(graphs), size)]

    def batch_losses(self, batch, epoch: int, step_rng: np.random.Generator) -> tuple[Tensor, Tensor]:
        c = self.config
        if c.task == "node-classification":
            g = self.bundle.graph
            fw = self.model.forward_all_nodes(
                g, self.index, epoch=epoch, refresh_interval=c.refresh_interval,
                strict=c.strict_staleness, dropout=c.dropout, rng=step_rng,
            )
            logits = self.model.node_logits(ad.take_rows(fw.combined, batch))
            labels = np.asarray([int(g.node_labels[v]) for v in batch])
            l_main = _cross_entropy(logits, labels)
            l_sn = self._fetching(g, batch, step_rng)
            return l_main, l_sn
        if c.task == "kg-completion":
            g = self.kg_graph
            log_probs = []
            for head, rel, target in batch:
                scores, _, _, _ = self.model.score_entities(
                    g, head, rel, self.index, max_context_neighbors=c.max_context_neighbors
                )
                probs = ad.row_softmax(scores)
                picked = ad.gather_rows(probs, [target])
                log_probs.append(ad.natural_log(ad.clamp(picked, CLAMP_EPS, 1.0 - CLAMP_EPS)))
            l_main = ad.scalar_mul(ad.reduce_mean(ad.concat_rows(log_probs)), -1.0)
            l_sn = self._fetching(g, [q[0] for q in batch], step_rng)
            return l_main, l_sn
        # graph-regression
        preds, targets = [], []
        for gi in batch:
            g, target = self.bundle.graphs[gi]
            h, _, _ = self.model.forward_graph(g, dropout=c.dropout, rng=step_rng)
            preds.append(self.model.regression_value(h))
            targets.append(target)
        pred = ad.concat_rows(preds)
        want = ad.constant(np.asarray(targets, dtype=ad.default_dtype()).reshape(-1, 1))
        l_main = ad.reduce_mean(ad.absolute(ad.sub(pred, want)))
        return l_main, ad.constant(np.zeros(()))

    def _fetching(self, g, node_batch, step_rng: np.random.Generator) -> Tensor:
        if self.config.alpha == 0.0:
            return ad.constant(np.zeros(()))
        negatives = self.config.negatives_per_node or None
        inputs = self.model.base_inputs(g)
        return batch_fetching_loss(inputs, self.model.first_scorer, g, list(node_batch),
                                   rng=step_rng, negatives_per_node=negatives)


def build_model(config: TrainConfig, bundle, rng: np.random.Generator | None = None) -> DuetModel:
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    return DuetModel(config.model_config(bundle), rng)


def train(config: TrainConfig, bundle, model: DuetModel | None = None) -> tuple[DuetModel, MetricReport]:
    """Run the full training loop and return (best model, metric report)."""
    with ad.precision(np.dtype(config.dtype), finite_checks=config.dtype == "float64"):
        if model is None:
            model = build_model(config, bundle)
        trainer = _Trainer(config, bundle, model)
        report = MetricReport()
        metric_name, better = PRIMARY_METRIC[config.task]
        best_value: float | None = None
        best_epoch = -1
        best_state: dict | None = None
        alpha = 0.0 if config.task == "graph-regression" else config.alpha
        if config.task == "graph-regression" and config.alpha != 0.0:
            log.info("whole-graph task: fetching loss removed (alpha forced to 0)")
        step_count = 0

        for epoch in range(config.epochs):
            trainer.maybe_refresh(epoch)
            model.training = True
            sum_total = sum_main = sum_sn = 0.0
            batches = trainer.batches(epoch)
            for batch in batches:
                step_rng = np.random.default_rng(trainer.rng.integers(0, 2**63))
                with Tape():
                    l_main, l_sn = trainer.batch_losses(batch, epoch, step_rng)
                    loss = ad.add(l_main, ad.scalar_mul(l_sn, alpha)) if alpha != 0.0 else l_main
                    main_v, sn_v = l_main.item(), l_sn.item()
                    if not (np.isfinite(main_v) and np.isfinite(sn_v)):
                        raise DivergenceError(
                            f"non-finite loss at epoch {epoch} step {step_count}: "
                            f"main={main_v} sn={sn_v}"
                        )
                    ad.backward(loss)
                trainer.optimizer.step(model.params)
                trainer.optimizer.zero_grad(model.params)
                # Reported total is main + alpha*sn by construction.
                sum_total += main_v + alpha * sn_v
                sum_main += main_v
                sum_sn += sn_v
                step_count += 1
            model.training = False
            nb = max(1, len(batches))
            report.append(epoch, "train", "loss", sum_total / nb)
            report.append(epoch, "train", "loss_main", sum_main / nb)
            report.append(epoch, "train", "loss_sn", sum_sn / nb)
            report.append(epoch, "train", "steps", float(step_count))

            metrics = evaluate(config.task, model, bundle, "valid", index=trainer.index)
            for name, value in metrics.items():
                report.append(epoch, "valid", name, value)
            current = metrics[metric_name]
            improved = best_value is None or (better(best_value, current) == current and current != best_value)
            if improved:
                best_value = current
                best_epoch = epoch
                best_state = model.state_arrays()
            log.info("epoch %d: train loss %.5f, valid %s %.5f", epoch, sum_total / nb, metric_name, current)
            if epoch - best_epoch >= config.patience:
                log.info("early stop at epoch %d (best %s %.5f at epoch %d)",
                         epoch, metric_name, best_value, best_epoch)
                break

        if best_state is not None:
            model.load_state_arrays(best_state)
        report.append(best_epoch, "valid", f"best_{metric_name}", best_value)
        return model, report


# ---------------------------------------------------------------------------
# evaluation


def evaluate(task: str, model: DuetModel, bundle, split: str, index=None) -> dict[str, float]:
    """Inference-mode metrics for one split. No tape is used."""
    if task not in TASKS:
        raise ContractError(f"unknown task {task}")
    model.training = False
    if task == "node-classification":
        return _evaluate_nodes(model, bundle, split, index)
    if task == "kg-completion":
        return _evaluate_kg(model, bundle, split, index)
    return _evaluate_regression(model, bundle, split)


def _split_nodes(bundle, split: str) -> list[int]:
    return {"train": bundle.train_nodes, "valid": bundle.valid_nodes, "test": bundle.test_nodes}[split]


def _evaluate_nodes(model, bundle, split, index) -> dict[str, float]:
    g = bundle.graph
    if index is None:
        index = model.refresh_semantic_index(g, k=16, candidate_count=1024, rng=np.random.default_rng(0))
    nodes = _split_nodes(bundle, split)
    fw = model.forward_all_nodes(g, index)
    logits = model.node_logits(ad.take_rows(fw.combined, nodes)).values
    labels = np.asarray([g.node_labels[v] for v in nodes])
    if labels.ndim == 2:  # multi-label: micro-averaged F1 at threshold 0.5
        preds = (1.0 / (1.0 + np.exp(-logits))) >= 0.5
        tp = float(np.sum(preds & (labels > 0)))
        fp = float(np.sum(preds & (labels == 0)))
        fn = float(np.sum(~preds & (labels > 0)))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        return {"micro_f1": f1}
    preds = logits.argmax(axis=1)
    return {"accuracy": float(np.mean(preds == labels))}


def _evaluate_regression(model, bundle, split) -> dict[str, float]:
    indices = {"train": bundle.train_indices, "valid": bundle.valid_indices, "test": bundle.test_indices}[split]
    errors = []
    for gi in indices:
        g, target = bundle.graphs[gi]
        h, _, _ = model.forward_graph(g)
        pred = model.regression_value(h).item()
        errors.append(abs(pred - target))
    return {"mae": float(np.mean(errors))}


def filtered_rank(scores: np.ndarray, target: int, known_targets: set[int]) -> tuple[int, int]:
    """(raw, filtered) rank of the target, 1-based, higher score = better.

    Filtering removes other known-true targets from the competition.
    """
    target_score = scores[target]
    raw = 1 + int(np.sum(scores > target_score))
    filtered_mask = np.ones(len(scores), dtype=bool)
    for t in known_targets:
        if t != target:
            filtered_mask[t] = False
    filtered = 1 + int(np.sum(scores[filtered_mask] > target_score))
    return raw, filtered


def _evaluate_kg(model, bundle, split, index) -> dict[str, float]:
    g = bundle.graph()
    if index is None:
        index = model.refresh_semantic_index(g, k=16, candidate_count=1024, rng=np.random.default_rng(0))
    queries = bundle.queries(split)
    known = bundle.known_targets()
    ranks = []
    for head, rel, target in queries:
        scores, _, _, _ = model.score_entities(g, head, rel, index)
        raw, filt = filtered_rank(scores.values[0], target, known.get((head, rel), {target}))
        if filt > raw:
            raise ContractError("filtered rank exceeded raw rank")
        ranks.append(filt)
    ranks = np.asarray(ranks, dtype=np.float64)
    return {
        "mrr": float(np.mean(1.0 / ranks)),
        "mr": float(np.mean(ranks)),
        "hits1": float(np.mean(ranks <= 1)),
        "hits3": float(np.mean(ranks <= 3)),
        "hits10": float(np.mean(ranks <= 10)),
    }


def resolved_config_lines(config: TrainConfig) -> list[str]:
    """Full key=value dump for run logs, defaults included."""
    return [f"{k} = {v}" for k, v in asdict(config).items()]
