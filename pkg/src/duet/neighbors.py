"""Self-supervised semantic neighbor discovery.

The fetching loss pushes the difference scorer toward high similarity on
one-hop neighbors and low similarity on sampled distant nodes. A
periodically refreshed index keeps, for every node, the top-k distant
nodes by learned score; between refreshes it is read-only.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import SemanticScorer
from .errors import ContractError, StaleIndexError
from .graph import Graph

log = logging.getLogger(__name__)

CLAMP_EPS = 1e-7
MAX_NEGATIVES = 16


@dataclass
class SemanticNeighborIndex:
    """Per-node top-k semantically closest distant nodes with their scores."""

    k: int
    epoch_stamp: int
    entries: dict[int, list[tuple[int, float]]] = field(default_factory=dict)

    def neighbors(self, v: int) -> list[int]:
        return [node for node, _ in self.entries.get(v, [])]

    def scored(self, v: int) -> list[tuple[int, float]]:
        return list(self.entries.get(v, []))

    def check_fresh(self, epoch: int, refresh_interval: int, strict: bool = False) -> bool:
        """True when the index was refreshed within the current window."""
        if epoch - self.epoch_stamp < refresh_interval:
            return True
        msg = (
            f"semantic neighbor index is stale: stamped epoch {self.epoch_stamp}, "
            f"now epoch {epoch}, refresh interval {refresh_interval}"
        )
        if strict:
            raise StaleIndexError(msg)
        log.warning(msg)
        return False

    def write_tsv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for v in sorted(self.entries):
                for node, score in self.entries[v]:
                    f.write(f"{v}\t{node}\t{score:.6f}\n")


def refresh_index(
    base_inputs: np.ndarray,
    scorer: SemanticScorer,
    g: Graph,
    k: int,
    candidate_count: int,
    rng: np.random.Generator,
    epoch: int = 0,
    workers: int = 1,
) -> SemanticNeighborIndex:
    """Score sampled distant candidates for every node and keep the top k.

    `base_inputs` are the current layer-0 node representations (values
    only; refresh never touches the tape). Candidate draws are seeded per
    node up front, so the result is identical for any worker count.
    """
    if k < 1:
        raise ContractError("k must be >= 1")
    if candidate_count < 1:
        raise ContractError("candidate_count must be >= 1")
    n = g.node_count
    node_seeds = rng.integers(0, 2**63, size=n)

    def entry(v: int) -> list[tuple[int, float]]:
        pool = g.distant_pool(v)
        if not pool:
            return []
        if len(pool) > candidate_count:
            node_rng = np.random.default_rng(node_seeds[v])
            picked = node_rng.choice(len(pool), size=candidate_count, replace=False)
            candidates = [pool[i] for i in sorted(picked)]
        else:
            candidates = pool
        scores = scorer.score_values(base_inputs[v], base_inputs[candidates])
        order = sorted(range(len(candidates)), key=lambda i: (-scores[i], candidates[i]))[:k]
        return [(candidates[i], float(scores[i])) for i in order]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool_exec:
            results = list(pool_exec.map(entry, range(n)))
    else:
        results = [entry(v) for v in range(n)]
    return SemanticNeighborIndex(k=k, epoch_stamp=epoch, entries={v: r for v, r in enumerate(results)})


def fetching_loss(
    scorer: SemanticScorer,
    x_center: Tensor,
    positive_inputs: Tensor | None,
    negative_inputs: Tensor | None,
    eps: float = CLAMP_EPS,
) -> Tensor:
    """Contrastive fetching loss for one node.

    Mean log-score over positives is pushed up, over negatives pushed
    down; scores are clamped to [eps, 1-eps] before the log. An empty
    positive or negative set makes the node contribute zero.
    """
    if positive_inputs is None or negative_inputs is None or \
            positive_inputs.shape[0] == 0 or negative_inputs.shape[0] == 0:
        log.warning("fetching_loss: empty positive or negative set, node contributes 0")
        return ad.constant(np.zeros(()))

    def mean_log_score(others: Tensor) -> Tensor:
        diff = ad.sub(x_center, others)
        z = ad.add(ad.matmul(diff, ad.transpose(scorer.params["ws"])), scorer.params["bs"])
        return ad.reduce_mean(ad.natural_log(ad.clamp(ad.sigmoid(z), eps, 1.0 - eps)))

    return ad.add(
        ad.scalar_mul(mean_log_score(positive_inputs), -1.0),
        mean_log_score(negative_inputs),
    )


def batch_fetching_loss(
    inputs: Tensor,
    scorer: SemanticScorer,
    g: Graph,
    node_batch: list[int],
    rng: np.random.Generator,
    negatives_per_node: int | None = None,
) -> Tensor:
    """Mean fetching loss over a batch of nodes.

    Negatives are drawn uniformly from each node's distant pool; the
    default count matches the positive count, capped at 16. Duplicated
    nodes in the batch weigh proportionally in the mean.
    """
    if not node_batch:
        raise ContractError("node_batch must be non-empty")
    total = ad.constant(np.zeros(()))
    for v in node_batch:
        positives = list(g.one_hop_neighbors(v).members)
        if not positives:
            log.warning("fetching_loss: node %d has no one-hop neighbors, contributes 0", v)
            continue
        count = negatives_per_node if negatives_per_node is not None else min(len(positives), MAX_NEGATIVES)
        pool = g.distant_pool(v)
        if not pool:
            log.warning("fetching_loss: node %d has no distant pool, contributes 0", v)
            continue
        negatives = list(g.sample_distant_negatives(v, count, rng).members)
        loss_v = fetching_loss(
            scorer,
            ad.take_row(inputs, v),
            ad.take_rows(inputs, positives),
            ad.take_rows(inputs, negatives),
        )
        total = ad.add(total, loss_v)
    return ad.scalar_mul(total, 1.0 / len(node_batch))
