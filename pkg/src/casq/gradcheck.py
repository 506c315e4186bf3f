"""Finite-difference verification of tape gradients.

Central differences with a fixed step, compared entry by entry against
the analytic gradient using a relative error that falls back to absolute
error for small magnitudes:

    rel = |analytic - numeric| / max(1, |analytic|, |numeric|)
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T

DEFAULT_STEP = 1e-5


def finite_difference_check(
    build_loss: Callable[[], T.Tensor],
    params: Sequence[T.Tensor],
    step: float = DEFAULT_STEP,
) -> float:
    """Return the worst relative error over every entry of every parameter.

    ``build_loss`` must rerun the forward pass from scratch each call; the
    graph is rebuilt once with the tape live for the analytic gradient and
    then re-evaluated tape-free for each perturbed entry.
    """
    T.zero_grads(params)
    loss = build_loss()
    T.backward(loss)
    analytic = [None if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, g in zip(params, analytic):
        if g is None:
            g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with T.no_grad():
                flat[i] = orig + step
                hi = build_loss().item()
                flat[i] = orig - step
                lo = build_loss().item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            rel = abs(gflat[i] - numeric) / max(1.0, abs(gflat[i]), abs(numeric))
            worst = max(worst, rel)
    return worst
