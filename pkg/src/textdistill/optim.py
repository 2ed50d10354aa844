"""SGD / AdamW with global-norm gradient clipping, plus the warmup+cosine
learning-rate schedule used by every training loop in this package."""
from __future__ import annotations

import math

import numpy as np


class OptimizerError(RuntimeError):
    """Non-finite gradient encountered; carries the offending parameter name."""

    def __init__(self, param_name, step, detail=""):
        self.param_name = param_name
        self.step = step
        msg = f"non-finite gradient in parameter '{param_name}' at step {step}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


def global_grad_norm(params):
    total = 0.0
    for _, p in params:
        total += float((p.grad * p.grad).sum())
    return math.sqrt(total)


def clip_gradients(params, max_norm):
    """Scale all gradients so the global norm is at most max_norm.

    Returns the pre-clip norm.
    """
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for _, p in params:
            p.grad *= scale
    return norm


class Optimizer:
    """One optimizer for a fixed parameter set.

    kind is "sgd" or "adamw". Clipping (if set) applies to the global gradient
    norm before the update; gradients are zeroed after each step.
    """

    def __init__(self, params, kind="adamw", lr=1e-3, weight_decay=0.0,
                 beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=None):
        if kind not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer kind: {kind!r}")
        self.params = list(params.items()) if isinstance(params, dict) else list(params)
        self.kind = kind
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        if kind == "adamw":
            self.m = {name: np.zeros_like(p.data) for name, p in self.params}
            self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, lr_scale=1.0):
        self.t += 1
        for name, p in self.params:
            bad = ~np.isfinite(p.grad)
            if bad.any():
                raise OptimizerError(name, self.t,
                                     f"{int(bad.sum())}/{p.grad.size} entries non-finite")
        if self.clip_norm is not None:
            clip_gradients(self.params, self.clip_norm)
        lr = self.lr * lr_scale
        if self.kind == "sgd":
            for _, p in self.params:
                g = p.grad
                if self.weight_decay:
                    g = g + self.weight_decay * p.data
                p.data -= lr * g
        else:
            b1, b2 = self.beta1, self.beta2
            c1 = 1.0 - b1**self.t
            c2 = 1.0 - b2**self.t
            for name, p in self.params:
                m = self.m[name]
                v = self.v[name]
                m *= b1
                m += (1.0 - b1) * p.grad
                v *= b2
                v += (1.0 - b2) * p.grad * p.grad
                update = (m / c1) / (np.sqrt(v / c2) + self.eps)
                if self.weight_decay:
                    update = update + self.weight_decay * p.data
                p.data -= lr * update
        for _, p in self.params:
            p.zero_grad()


def warmup_cosine(step, total_steps, warmup_ratio):
    """LR multiplier: linear warmup for warmup_ratio of the run, then cosine
    annealing to zero. ``step`` is 0-based."""
    warmup = max(1, int(round(total_steps * warmup_ratio)))
    if step < warmup:
        return (step + 1) / warmup
    if total_steps <= warmup:
        return 1.0
    frac = (step - warmup) / (total_steps - warmup)
    return 0.5 * (1.0 + math.cos(math.pi * min(frac, 1.0)))
