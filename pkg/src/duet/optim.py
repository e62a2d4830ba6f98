"""Plain-array optimizers: SGD, Adam, and Adamax."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import ContractError, ShapeError

OPTIMIZERS = ("sgd", "adam", "adamax")


def optimizer_step(
    kind: str,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: dict,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One in-place update over named parameter arrays.

    Adam uses bias-corrected first/second moments; Adamax replaces the
    second moment with an exponentially-weighted infinity norm. Missing
    gradients (parameters off the loss path) leave the entry untouched.
    """
    if kind not in OPTIMIZERS:
        raise ContractError(f"unknown optimizer {kind!r}")
    if kind != "sgd":
        state.setdefault("t", 0)
        state["t"] += 1
        t = state["t"]
        m = state.setdefault("m", {})
        v = state.setdefault("v", {})
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} vs parameter {p.shape} for {name}")
        if kind == "sgd":
            p -= lr * g
            continue
        if name not in m:
            m[name] = np.zeros_like(p)
            v[name] = np.zeros_like(p)
        m[name] = beta1 * m[name] + (1.0 - beta1) * g
        if kind == "adam":
            v[name] = beta2 * v[name] + (1.0 - beta2) * g * g
            m_hat = m[name] / (1.0 - beta1**t)
            v_hat = v[name] / (1.0 - beta2**t)
            p -= lr * m_hat / (np.sqrt(v_hat) + eps)
        else:  # adamax
            v[name] = np.maximum(beta2 * v[name], np.abs(g))
            p -= (lr / (1.0 - beta1**t)) * m[name] / (v[name] + eps)


class Optimizer:
    """Stateful wrapper over `optimizer_step` driven by tensor `.grad`."""

    def __init__(self, kind: str, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if kind not in OPTIMIZERS:
            raise ContractError(f"unknown optimizer {kind!r}")
        self.kind = kind
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: dict = {}

    def step(self, named_tensors: dict[str, Tensor]) -> None:
        params = {k: t.values for k, t in named_tensors.items()}
        grads = {k: t.grad for k, t in named_tensors.items() if t.grad is not None}
        optimizer_step(
            self.kind, params, grads, self.state,
            lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
        )

    def zero_grad(self, named_tensors: dict[str, Tensor]) -> None:
        for t in named_tensors.values():
            t.grad = None
