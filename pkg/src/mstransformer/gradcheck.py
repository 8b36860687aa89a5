"""Central finite-difference oracle for analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor


def grad_check(f: Callable[[], Tensor], leaves: Sequence[Tensor], h: float = 1e-5) -> float:
    """Largest relative error between backprop and central differences.

    ``f`` rebuilds the graph from ``leaves`` on every call and must return a
    single-element tensor. Leaves are perturbed in place and restored. The
    relative error of one entry is ``|a - n| / max(1, |a|, |n|)``.
    """
    out = f()
    if out.data.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    for leaf in leaves:
        leaf.grad = None
    out.backward()
    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        ana = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            err = abs(ana[i] - num) / max(1.0, abs(ana[i]), abs(num))
            worst = max(worst, err)
    return worst


def random_probe(shape: tuple, rng: np.random.Generator) -> np.ndarray:
    """Fixed random weights used to reduce a tensor output to a scalar."""
    return rng.standard_normal(shape)
