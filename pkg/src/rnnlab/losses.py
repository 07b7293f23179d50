"""Convex 1-Lipschitz losses G(v, y) with G(0, y) in [-1, 1]."""
from __future__ import annotations

import numpy as np
from scipy.special import logsumexp, softmax


class CenteredL2:
    """G(v, y) = |v - y| - |y|; labels are vectors in R^d."""

    name = "centered-l2"
    label_kind = "vector"

    def value(self, v, y):
        v, y = np.asarray(v, float), np.asarray(y, float)
        return np.linalg.norm(v - y, axis=-1) - np.linalg.norm(y, axis=-1)

    def grad(self, v, y):
        diff = np.asarray(v, float) - np.asarray(y, float)
        n = np.linalg.norm(diff, axis=-1, keepdims=True)
        # subgradient 0 at v = y
        return np.divide(diff, n, out=np.zeros_like(diff), where=n > 0)


class CrossEntropy:
    """Softmax cross-entropy minus log d, scaled by 1/sqrt(2).

    The gradient softmax(v) - e_y has norm at most sqrt(2), hence the scaling
    for 1-Lipschitzness; G(0, y) = 0. Labels are class indices.
    """

    name = "cross-entropy"
    label_kind = "index"

    def value(self, v, y):
        v = np.asarray(v, float)
        y = np.asarray(y, dtype=int)
        picked = np.take_along_axis(v, y[..., None], axis=-1)[..., 0]
        return (logsumexp(v, axis=-1) - picked - np.log(v.shape[-1])) / np.sqrt(2.0)

    def grad(self, v, y):
        v = np.asarray(v, float)
        y = np.asarray(y, dtype=int)
        g = softmax(v, axis=-1)
        np.put_along_axis(g, y[..., None], np.take_along_axis(g, y[..., None], axis=-1) - 1.0, axis=-1)
        return g / np.sqrt(2.0)


LOSSES = {"centered-l2": CenteredL2, "cross-entropy": CrossEntropy}


def get_loss(name):
    if not isinstance(name, str):
        return name
    try:
        return LOSSES[name]()
    except KeyError:
        raise ValueError(f"unknown loss {name!r}; choose from {sorted(LOSSES)}") from None


def loss_eval(name, v, y):
    """Value and subgradient of the named loss at v."""
    G = get_loss(name)
    return G.value(v, y), G.grad(v, y)
