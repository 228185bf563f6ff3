"""AdamW and the learning-rate rules shared by pretraining and fine-tuning.

Epoch and iteration indices are 0-based everywhere. The detection step
schedule and the polynomial+warmup rule are written out explicitly so
schedule values are exact, testable arithmetic.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


def effective_lr(batch: int, base_lr: float) -> float:
    """Scale a base learning rate by batch size: batch * base / 256."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    return batch * base_lr / 256.0


def warmup_cosine_lr(base: float, step: int, total_steps: int, warmup_steps: int) -> float:
    """Linear warmup to ``base`` then cosine decay to zero."""
    if warmup_steps > 0 and step < warmup_steps:
        return base * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    t = min(step - warmup_steps, span)
    return base * 0.5 * (1.0 + math.cos(math.pi * t / span))


def step_decay_lr(base: float, epoch: int, milestones=(8, 11), gamma: float = 0.1) -> float:
    """Piecewise-constant decay: multiply by ``gamma`` at each milestone epoch."""
    return base * gamma ** sum(1 for m in milestones if epoch >= m)


def poly_warmup_lr(base: float, it: int, total_iters: int, power: float = 1.0,
                   warmup_iters: int = 1500, warmup_ratio: float = 1e-6) -> float:
    """Polynomial decay with a linear warmup multiplier.

    warm(it) ramps from ``warmup_ratio`` to 1 over ``warmup_iters``;
    afterwards lr = base * (1 - it/total)^power, which for power 1.0 is a
    straight line hitting zero at ``total_iters``.
    """
    if warmup_iters > 0:
        warm = warmup_ratio + (1.0 - warmup_ratio) * min(it, warmup_iters) / warmup_iters
    else:
        warm = 1.0
    poly = (1.0 - min(it, total_iters) / total_iters) ** power
    return base * warm * poly


# ---------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------

def adamw_step(params: dict, grads: dict, state: dict | None, lr: float,
               weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8,
               lr_factors: dict | None = None) -> dict:
    """One decoupled-weight-decay Adam update, in place on numpy arrays.

    ``params`` and ``grads`` map names to same-shape arrays; ``state`` is
    the returned dict from the previous call (or None). ``lr_factors``
    optionally scales the learning rate per parameter name (layer-wise
    decay); weight decay is scaled by the same factor.
    """
    b1, b2 = betas
    if state is None:
        state = {"step": 0, "m": {}, "v": {}}
    state["step"] += 1
    t = state["step"]
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} mismatches parameter {name} {p.shape}")
        m = state["m"].setdefault(name, np.zeros_like(p))
        v = state["v"].setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / (1.0 - b1**t)
        vhat = v / (1.0 - b2**t)
        f = 1.0 if lr_factors is None else lr_factors.get(name, 1.0)
        p -= (lr * f) * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p)
    return state


class AdamW:
    """Stateful wrapper around :func:`adamw_step` for Tensor parameter dicts."""

    def __init__(self, params: dict[str, Tensor], weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8, lr_factors: dict | None = None):
        self.params = {n: t for n, t in params.items() if t.requires_grad}
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.lr_factors = lr_factors
        self.state = None

    def step(self, lr: float) -> None:
        data = {n: t.data for n, t in self.params.items()}
        grads = {n: t.grad for n, t in self.params.items() if t.grad is not None}
        self.state = adamw_step(data, grads, self.state, lr, self.weight_decay,
                                self.betas, self.eps, self.lr_factors)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None
