"""Helpers for nested parameter containers.

A tree is an ndarray, a dataclass whose fields are trees, or a list of trees.
Leaves are visited in declaration order, which fixes the checkpoint layout and
every gradient reduction order.
"""
from __future__ import annotations

import dataclasses

import numpy as np


def leaves(tree, prefix: str = ""):
    """Yield ``(name, array)`` pairs in declaration order."""
    if isinstance(tree, np.ndarray):
        yield prefix, tree
    elif dataclasses.is_dataclass(tree):
        for f in dataclasses.fields(tree):
            name = f"{prefix}.{f.name}" if prefix else f.name
            yield from leaves(getattr(tree, f.name), name)
    elif isinstance(tree, (list, tuple)):
        for i, item in enumerate(tree):
            yield from leaves(item, f"{prefix}.{i}" if prefix else str(i))
    else:
        raise TypeError(f"not a parameter tree node: {type(tree).__name__}")


def tree_map(fn, tree, *rest):
    """Apply ``fn`` leafwise across trees of identical structure."""
    if isinstance(tree, np.ndarray):
        return fn(tree, *rest)
    if dataclasses.is_dataclass(tree):
        kwargs = {
            f.name: tree_map(fn, getattr(tree, f.name), *(getattr(r, f.name) for r in rest))
            for f in dataclasses.fields(tree)
        }
        return type(tree)(**kwargs)
    if isinstance(tree, (list, tuple)):
        return type(tree)(tree_map(fn, t, *(r[i] for r in rest)) for i, t in enumerate(tree))
    raise TypeError(f"not a parameter tree node: {type(tree).__name__}")


def zeros_like(tree):
    return tree_map(np.zeros_like, tree)


def add(a, b):
    return tree_map(lambda x, y: x + y, a, b)


def scale(tree, alpha: float):
    return tree_map(lambda x: alpha * x, tree)


def copy(tree):
    return tree_map(np.copy, tree)


def vdot(a, b) -> float:
    """Sum of elementwise products, accumulated leaf by leaf in order."""
    total = 0.0
    for (_, x), (_, y) in zip(leaves(a), leaves(b)):
        total += float(np.dot(x.ravel(), y.ravel()))
    return total


def norm(tree) -> float:
    return float(np.sqrt(vdot(tree, tree)))


def size(tree) -> int:
    return sum(x.size for _, x in leaves(tree))


def flatten(tree) -> np.ndarray:
    return np.concatenate([x.ravel() for _, x in leaves(tree)])


def unflatten(tree, flat: np.ndarray):
    """Inverse of :func:`flatten` using ``tree`` as the structure template."""
    pos = [0]

    def take(x):
        n = x.size
        out = flat[pos[0] : pos[0] + n].reshape(x.shape).copy()
        pos[0] += n
        return out

    result = tree_map(take, tree)
    if pos[0] != flat.size:
        raise ValueError("flat vector length does not match the tree")
    return result
