"""SGD, Adam and AdamW updating parameter trees in place."""
from __future__ import annotations

import numpy as np

from . import tree


class Optimizer:
    name = ""

    def __init__(self, params, lr):
        self.lr = lr
        self.t = 0
        self.slots = {}

    def state_tensors(self):
        """``(name, array)`` pairs of the optimizer state, in a fixed order."""
        out = []
        for slot, t in self.slots.items():
            out.extend((f"opt.{slot}.{name}", x) for name, x in tree.leaves(t))
        return out

    def load_state(self, t: int, tensors: dict):
        self.t = t
        for slot, st in self.slots.items():
            for name, x in tree.leaves(st):
                x[...] = tensors[f"opt.{slot}.{name}"]


class SGD(Optimizer):
    name = "sgd"

    def __init__(self, params, lr=1e-2, momentum=0.0, weight_decay=0.0):
        super().__init__(params, lr)
        self.momentum = momentum
        self.weight_decay = weight_decay
        if momentum:
            self.slots["buf"] = tree.zeros_like(params)

    def step(self, params, grads):
        self.t += 1
        bufs = tree.leaves(self.slots["buf"]) if self.momentum else None
        for (_, p), (_, g) in zip(tree.leaves(params), tree.leaves(grads)):
            if self.weight_decay:
                g = g + self.weight_decay * p
            if bufs is not None:
                _, b = next(bufs)
                b *= self.momentum
                b += g
                g = b
            p -= self.lr * g


class Adam(Optimizer):
    """Adam; ``decoupled=True`` gives AdamW (decay applied to the weights)."""

    name = "adam"

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0, decoupled=False):
        super().__init__(params, lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.slots["m"] = tree.zeros_like(params)
        self.slots["v"] = tree.zeros_like(params)

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for (_, p), (_, g), (_, m), (_, v) in zip(
            tree.leaves(params), tree.leaves(grads), tree.leaves(self.slots["m"]), tree.leaves(self.slots["v"])
        ):
            if self.weight_decay and not self.decoupled:
                g = g + self.weight_decay * p
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay and self.decoupled:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(cfg, params) -> Optimizer:
    if cfg.name == "sgd":
        return SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    if cfg.name == "adam":
        return Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    if cfg.name == "adamw":
        return Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay, decoupled=True)
    raise ValueError(f"unknown optimizer {cfg.name!r}")
