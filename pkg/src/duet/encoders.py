"""The two attention encoders and the bias exchange between them.

The structural encoder is a standard transformer block: scaled dot-product
attention over a node context, residual + layer norm, feed-forward,
residual + layer norm. The semantic encoder keeps the same block structure
but derives its attention logits from a learnable difference scorer
instead of dot products.

Bias exchange passes one encoder's pre-softmax logits, index-aligned on
shared nodes and scaled by lambda, into the other's logits. Exchanged
values are always gradient-detached; each encoder computes raw logits
once, then both biased passes run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError


def glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    scale = math.sqrt(2.0 / (rows + cols))
    return rng.normal(0.0, scale, size=(rows, cols))


def _dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return ad.mul(x, ad.constant(keep))


def scaled_dot_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    bias: Tensor | None = None,
    mask: np.ndarray | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Single-head attention: returns (output, scores, pre-softmax logits).

    Logits are q k^T / sqrt(width) plus the optional additive bias; they are
    returned unmasked so a bias exchange can consume them.
    """
    width = q.shape[1]
    logits = ad.scalar_mul(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(width))
    if bias is not None:
        logits = ad.add(logits, bias)
    scores = ad.row_softmax(logits, mask=mask)
    out = ad.matmul(scores, v)
    return out, scores, logits


@dataclass
class BlockOutput:
    out: Tensor            # full context, rows updated
    scores: list[Tensor]   # per-head attention scores
    logits: list[Tensor]   # per-head pre-softmax logits (biased pass)


class MultiHeadAttention:
    """Query/key/value projections with head splitting and output projection."""

    def __init__(self, hidden: int, heads: int, rng: np.random.Generator):
        if hidden % heads != 0:
            raise ContractError("hidden size must be divisible by head count")
        self.hidden = hidden
        self.heads = heads
        p = {}
        for name in ("wq", "wk", "wv", "wo"):
            p[name] = ad.parameter(glorot(rng, hidden, hidden))
        for name in ("bq", "bk", "bv", "bo"):
            p[name] = ad.parameter(np.zeros((1, hidden)))
        self.params = p

    def forward(
        self, x_q: Tensor, x_kv: Tensor, bias: Tensor | None = None, mask: np.ndarray | None = None
    ) -> tuple[Tensor, list[Tensor], list[Tensor]]:
        p = self.params
        q = ad.affine(x_q, p["wq"], p["bq"])
        k = ad.affine(x_kv, p["wk"], p["bk"])
        v = ad.affine(x_kv, p["wv"], p["bv"])
        dh = self.hidden // self.heads
        outs, scores, logits = [], [], []
        for h in range(self.heads):
            sl = slice(h * dh, (h + 1) * dh)
            o, s, l = scaled_dot_attention(
                ad.slice_cols(q, sl.start, sl.stop),
                ad.slice_cols(k, sl.start, sl.stop),
                ad.slice_cols(v, sl.start, sl.stop),
                bias=bias,
                mask=mask,
            )
            outs.append(o)
            scores.append(s)
            logits.append(l)
        merged = outs[0] if self.heads == 1 else ad.concat_cols(outs)
        return ad.affine(merged, p["wo"], p["bo"]), scores, logits

    def raw_logits(self, x_q_values: np.ndarray, x_kv_values: np.ndarray) -> np.ndarray:
        """Head-averaged pre-softmax logits, computed off-tape for exchange."""
        p = self.params
        q = x_q_values @ p["wq"].values + p["bq"].values
        k = x_kv_values @ p["wk"].values + p["bk"].values
        dh = self.hidden // self.heads
        acc = np.zeros((x_q_values.shape[0], x_kv_values.shape[0]), dtype=x_q_values.dtype)
        for h in range(self.heads):
            sl = slice(h * dh, (h + 1) * dh)
            acc += (q[:, sl] @ k[:, sl].T) / math.sqrt(dh)
        return acc / self.heads


class _FeedForwardBlock:
    """Residual + layer-norm skeleton shared by both encoders."""

    def __init__(self, hidden: int, ff_mult: int, rng: np.random.Generator):
        width = ff_mult * hidden
        self.params = {
            "ff_w1": ad.parameter(glorot(rng, hidden, width)),
            "ff_b1": ad.parameter(np.zeros((1, width))),
            "ff_w2": ad.parameter(glorot(rng, width, hidden)),
            "ff_b2": ad.parameter(np.zeros((1, hidden))),
            "ln1_g": ad.parameter(np.ones((1, hidden))),
            "ln1_b": ad.parameter(np.zeros((1, hidden))),
            "ln2_g": ad.parameter(np.ones((1, hidden))),
            "ln2_b": ad.parameter(np.zeros((1, hidden))),
        }

    def finish(self, x: Tensor, attn_out: Tensor, dropout: float, rng) -> Tensor:
        p = self.params
        h1 = ad.layer_norm(ad.add(x, _dropout(attn_out, dropout, rng)), p["ln1_g"], p["ln1_b"])
        ff = ad.affine(ad.relu(ad.affine(h1, p["ff_w1"], p["ff_b1"])), p["ff_w2"], p["ff_b2"])
        return ad.layer_norm(ad.add(h1, _dropout(ff, dropout, rng)), p["ln2_g"], p["ln2_b"])


class StructuralLayer:
    """One transformer block over a node context, center row first.

    Key/value inputs may carry an additive extra (the distance encoding
    relative to the center); queries always see the plain inputs.
    """

    def __init__(self, hidden: int, heads: int, ff_mult: int, rng: np.random.Generator):
        self.hidden = hidden
        self.attn = MultiHeadAttention(hidden, heads, rng)
        self.block = _FeedForwardBlock(hidden, ff_mult, rng)
        self.params = {f"attn.{k}": v for k, v in self.attn.params.items()}
        self.params.update(self.block.params)

    def forward(
        self,
        inputs: Tensor,
        kv_extra: Tensor | None = None,
        bias: Tensor | None = None,
        mask: np.ndarray | None = None,
        dropout: float = 0.0,
        rng: np.random.Generator | None = None,
    ) -> BlockOutput:
        if bias is not None and bias.shape != (inputs.shape[0], inputs.shape[0]):
            raise ContractError(f"bias shape {bias.shape} does not match context size {inputs.shape[0]}")
        x_kv = inputs if kv_extra is None else ad.add(inputs, kv_extra)
        attn_out, scores, logits = self.attn.forward(inputs, x_kv, bias=bias, mask=mask)
        out = self.block.finish(inputs, attn_out, dropout, rng)
        return BlockOutput(out=out, scores=scores, logits=logits)

    def raw_logits(self, input_values: np.ndarray, kv_extra_values: np.ndarray | None = None) -> np.ndarray:
        kv = input_values if kv_extra_values is None else input_values + kv_extra_values
        return self.attn.raw_logits(input_values, kv)


def structural_encode(
    layer: StructuralLayer,
    inputs: Tensor,
    semantic_bias: Tensor | None = None,
    kv_extra: Tensor | None = None,
) -> tuple[Tensor, BlockOutput]:
    """Run one structural block and return the center (first) row."""
    result = layer.forward(inputs, kv_extra=kv_extra, bias=semantic_bias)
    return ad.take_row(result.out, 0), result


class SemanticScorer:
    """Learnable difference scorer: z = W (x_i - x_j) + b, one row per head."""

    def __init__(self, hidden: int, heads: int = 1, rng: np.random.Generator | None = None,
                 weight: np.ndarray | None = None, bias: np.ndarray | None = None):
        if weight is None:
            weight = glorot(rng, heads, hidden)
        weight = np.atleast_2d(np.asarray(weight, dtype=float))
        if bias is None:
            bias = np.zeros((1, weight.shape[0]))
        bias = np.asarray(bias, dtype=float).reshape(1, -1)
        if bias.shape[1] != weight.shape[0]:
            raise ShapeError("scorer bias must have one entry per head")
        self.heads = weight.shape[0]
        self.hidden = weight.shape[1]
        self.params = {"ws": ad.parameter(weight), "bs": ad.parameter(bias)}

    def logit(self, x_i: Tensor, x_j: Tensor) -> Tensor:
        """Pre-activation score per head, shape (1, heads)."""
        diff = ad.sub(x_i, x_j)
        return ad.add(ad.matmul(diff, ad.transpose(self.params["ws"])), self.params["bs"])

    def score(self, x_i: Tensor, x_j: Tensor) -> Tensor:
        """Similarity in (0, 1): sigmoid of the logit."""
        return ad.sigmoid(self.logit(x_i, x_j))

    def logit_matrix(self, inputs: Tensor) -> list[Tensor]:
        """Per-head pairwise logits over a context: out[i, j] = z(x_i, x_j)."""
        n = inputs.shape[0]
        proj = ad.matmul(inputs, ad.transpose(self.params["ws"]))  # (n, heads)
        ones_col = ad.constant(np.ones((n, 1), dtype=ad.default_dtype()))
        ones_row = ad.constant(np.ones((1, n), dtype=ad.default_dtype()))
        mats = []
        for h in range(self.heads):
            col = ad.slice_cols(proj, h, h + 1)
            pair = ad.sub(ad.matmul(col, ones_row), ad.matmul(ones_col, ad.transpose(col)))
            mats.append(ad.add(pair, ad.slice_cols(self.params["bs"], h, h + 1)))
        return mats

    def raw_logits(self, input_values: np.ndarray) -> np.ndarray:
        """Head-averaged pairwise logits, computed off-tape for exchange."""
        proj = input_values @ self.params["ws"].values.T + self.params["bs"].values
        acc = proj.mean(axis=1)
        return acc[:, None] - acc[None, :] + self.params["bs"].values.mean()

    def score_values(self, center_values: np.ndarray, other_values: np.ndarray) -> np.ndarray:
        """Head-averaged f_s of a center row against many rows, off-tape."""
        diff = center_values.reshape(1, -1) - other_values
        z = diff @ self.params["ws"].values.T + self.params["bs"].values
        return (1.0 / (1.0 + np.exp(-z))).mean(axis=1)


def semantic_logit(scorer: SemanticScorer, x_i: Tensor, x_j: Tensor) -> Tensor:
    return scorer.logit(x_i, x_j)


class SemanticLayer:
    """Semantic attention block: difference-scorer logits, then the same
    value aggregation / residual / feed-forward structure as the
    structural block."""

    def __init__(self, hidden: int, scorer_heads: int, ff_mult: int, rng: np.random.Generator):
        if hidden % scorer_heads != 0:
            raise ContractError("hidden size must be divisible by scorer head count")
        self.hidden = hidden
        self.scorer = SemanticScorer(hidden, heads=scorer_heads, rng=rng)
        p = {
            "wv": ad.parameter(glorot(rng, hidden, hidden)),
            "bv": ad.parameter(np.zeros((1, hidden))),
            "wo": ad.parameter(glorot(rng, hidden, hidden)),
            "bo": ad.parameter(np.zeros((1, hidden))),
        }
        self.block = _FeedForwardBlock(hidden, ff_mult, rng)
        self.params = {f"scorer.{k}": v for k, v in self.scorer.params.items()}
        self.params.update(p)
        self.params.update(self.block.params)
        self._proj = p

    def forward(
        self,
        inputs: Tensor,
        bias: Tensor | None = None,
        mask: np.ndarray | None = None,
        dropout: float = 0.0,
        rng: np.random.Generator | None = None,
    ) -> BlockOutput:
        n = inputs.shape[0]
        if bias is not None and bias.shape != (n, n):
            raise ContractError(f"bias shape {bias.shape} does not match context size {n}")
        logit_mats = self.scorer.logit_matrix(inputs)
        if bias is not None:
            logit_mats = [ad.add(m, bias) for m in logit_mats]
        v = ad.affine(inputs, self._proj["wv"], self._proj["bv"])
        heads = self.scorer.heads
        dh = self.hidden // heads
        outs, scores = [], []
        for h, logits in enumerate(logit_mats):
            s = ad.row_softmax(logits, mask=mask)
            outs.append(ad.matmul(s, ad.slice_cols(v, h * dh, (h + 1) * dh)))
            scores.append(s)
        merged = outs[0] if heads == 1 else ad.concat_cols(outs)
        attn_out = ad.affine(merged, self._proj["wo"], self._proj["bo"])
        out = self.block.finish(inputs, attn_out, dropout, rng)
        return BlockOutput(out=out, scores=scores, logits=logit_mats)

    def raw_logits(self, input_values: np.ndarray) -> np.ndarray:
        return self.scorer.raw_logits(input_values)


def semantic_encode(
    layer: SemanticLayer,
    inputs: Tensor,
    structural_bias: Tensor | None = None,
) -> tuple[Tensor, BlockOutput]:
    """Run one semantic block over [center; neighbors] and return the center row."""
    result = layer.forward(inputs, bias=structural_bias)
    return ad.take_row(result.out, 0), result


def bias_exchange(
    logits: Tensor | np.ndarray,
    source_nodes: list[int],
    target_nodes: list[int],
    lam: float,
) -> Tensor:
    """Re-index one encoder's logits onto another encoder's context.

    out[p, q] = lam * logits[p', q'] where target_nodes[p] and
    target_nodes[q] both appear in source_nodes (at p', q'); all other
    entries are zero. The result is detached from the gradient tape.
    """
    values = logits.values if isinstance(logits, Tensor) else np.asarray(logits)
    if values.shape != (len(source_nodes), len(source_nodes)):
        raise ContractError("logits must be square over the source node list")
    b = len(target_nodes)
    out = np.zeros((b, b), dtype=values.dtype)
    if lam != 0.0:
        pos = {node: i for i, node in enumerate(source_nodes)}
        matched = [(p, pos[v]) for p, v in enumerate(target_nodes) if v in pos]
        for p, sp in matched:
            for q, sq in matched:
                out[p, q] = lam * values[sp, sq]
    return ad.constant(out)
