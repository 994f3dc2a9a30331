"""Finite-difference verification of analytic gradients.

The check rebuilds the loss from scratch per evaluation, so the graph
under test must be expressed as a closure over the parameter tensors.
Run it on float64 parameters: central differences at h = 1e-3 lose too
many digits in float32.
"""

from __future__ import annotations

import numpy as np

from retarget.nn.tensor import Tensor


def finite_difference_check(
    build_loss,
    params: list[Tensor],
    rng: np.random.Generator,
    n_coords: int = 30,
    h: float = 1e-3,
) -> float:
    """Compare analytic and central-difference gradients on random coordinates.

    Returns the worst relative error over the sampled coordinates.
    """
    for p in params:
        p.grad = None
    loss = build_loss()
    loss.backward()
    analytic = [np.array(p.grad) if p.grad is not None else np.zeros_like(p.data) for p in params]

    worst = 0.0
    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.cumsum(sizes)
    for flat_index in picks:
        pi = int(np.searchsorted(offsets, flat_index, side="right"))
        local = int(flat_index - (offsets[pi - 1] if pi else 0))
        p = params[pi]
        orig = p.data.reshape(-1)[local]

        p.data.reshape(-1)[local] = orig + h
        up = float(build_loss().data)
        p.data.reshape(-1)[local] = orig - h
        down = float(build_loss().data)
        p.data.reshape(-1)[local] = orig

        numeric = (up - down) / (2.0 * h)
        a = float(analytic[pi].reshape(-1)[local])
        denom = max(abs(a), abs(numeric), 1e-8)
        err = abs(a - numeric) / denom
        if abs(a) < 1e-10 and abs(numeric) < 1e-10:
            err = 0.0
        worst = max(worst, err)
    return worst
