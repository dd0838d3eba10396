"""Central finite-difference checks against the analytic gradients.

The numeric side only ever calls the forward function on perturbed copies of
the raw arrays, so it does not depend on any recorded backward rule.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Tensor, backward


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-300)
    return float(np.linalg.norm(a - n) / scale)


def analytic_grads(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor]) -> list[np.ndarray]:
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    backward(loss_fn())
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]


def numeric_grad(
    loss_fn: Callable[[], Tensor],
    tensor: Tensor,
    h: float,
    indices: Sequence[int] | None = None,
) -> np.ndarray:
    """Central differences of ``loss_fn`` w.r.t. ``tensor`` (optionally a subset of flat indices)."""
    tensor.data = np.ascontiguousarray(tensor.data)
    flat = tensor.data.reshape(-1)
    grad = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size) if indices is None else indices:
        keep = flat[i]
        flat[i] = keep + h
        plus = loss_fn().item()
        flat[i] = keep - h
        minus = loss_fn().item()
        flat[i] = keep
        grad[i] = (plus - minus) / (2 * h)
    return grad.reshape(tensor.shape)


def check_elementwise(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative error over ``tensors``, optionally sampling ``max_entries`` coordinates each."""
    grads = analytic_grads(loss_fn, tensors)
    worst = 0.0
    for t, g in zip(tensors, grads):
        if max_entries is not None and t.data.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(t.data.size, max_entries, replace=False)
            num = numeric_grad(loss_fn, t, h, idx).ravel()[idx]
            worst = max(worst, relative_error(g.ravel()[idx], num))
        else:
            worst = max(worst, relative_error(g, numeric_grad(loss_fn, t, h)))
    return worst


def check_directional(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    rng: np.random.Generator,
    h: float = 1e-6,
) -> tuple[float, float]:
    """Compare <grad, v> with the central difference along a random direction ``v``.

    Returns ``(relative_error, analytic_directional_derivative)``.
    """
    grads = analytic_grads(loss_fn, tensors)
    directions = [rng.standard_normal(t.shape) for t in tensors]
    analytic = sum(float(np.sum(g.astype(np.float64) * d)) for g, d in zip(grads, directions))
    originals = [t.data.copy() for t in tensors]

    def shifted(sign: float) -> float:
        for t, base, d in zip(tensors, originals, directions):
            t.data = (base + sign * h * d).astype(base.dtype)
        return loss_fn().item()

    numeric = (shifted(1.0) - shifted(-1.0)) / (2 * h)
    for t, base in zip(tensors, originals):
        t.data = base
    err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-300)
    return err, analytic
