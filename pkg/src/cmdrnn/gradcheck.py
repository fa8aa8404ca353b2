"""Central finite-difference checks against the analytic gradients of a graph."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Node


def relative_error(analytic, numeric) -> float:
    analytic, numeric = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def _loss_value(loss_fn: Callable[[], Node]) -> float:
    return float(loss_fn().value)


def numerical_gradient(
    loss_fn: Callable[[], Node],
    param: Node,
    eps: float = 1e-5,
    entries: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Central differences of ``loss_fn()`` w.r.t. the (flat) ``entries`` of ``param``."""
    original = param.value
    flat = original.reshape(-1)
    entries = range(flat.size) if entries is None else entries
    out = np.empty(len(entries))
    try:
        for n, i in enumerate(entries):
            bumped = flat.copy()
            bumped[i] = flat[i] + eps
            param.value = bumped.reshape(original.shape)
            plus = _loss_value(loss_fn)
            bumped[i] = flat[i] - eps
            param.value = bumped.reshape(original.shape)
            minus = _loss_value(loss_fn)
            out[n] = (plus - minus) / (2 * eps)
    finally:
        param.value = original
    return out


def check_gradients(
    loss_fn: Callable[[], Node],
    params: Sequence[Node],
    eps: float = 1e-5,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Worst relative error over ``params``; large tensors are subsampled to ``max_entries``."""
    rng = rng or np.random.default_rng(0)
    grads = T.backward(loss_fn(), params)
    worst = 0.0
    for p in params:
        analytic = grads[p].reshape(-1)
        entries = None
        if max_entries is not None and p.value.size > max_entries:
            entries = np.sort(rng.choice(p.value.size, size=max_entries, replace=False))
            analytic = analytic[entries]
        numeric = numerical_gradient(loss_fn, p, eps, entries)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def directional_check(
    loss_fn: Callable[[], Node],
    params: Sequence[Node],
    rng: np.random.Generator,
    eps: float = 1e-5,
) -> float:
    """Compare ``grad . v`` with a central difference along a random unit direction ``v``.

    Covers every parameter entry at once, which suits models too large for
    per-entry differencing.
    """
    grads = T.backward(loss_fn(), params)
    directions = [rng.standard_normal(p.shape) for p in params]
    norm = np.sqrt(sum(float(np.sum(d * d)) for d in directions))
    directions = [d / norm for d in directions]
    analytic = sum(float(np.sum(grads[p] * d)) for p, d in zip(params, directions))
    originals = [p.value for p in params]
    try:
        for p, x, d in zip(params, originals, directions):
            p.value = x + eps * d
        plus = _loss_value(loss_fn)
        for p, x, d in zip(params, originals, directions):
            p.value = x - eps * d
        minus = _loss_value(loss_fn)
    finally:
        for p, x in zip(params, originals):
            p.value = x
    return relative_error(analytic, (plus - minus) / (2 * eps))
