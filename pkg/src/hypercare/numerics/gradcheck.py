"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import NonDeterministicLoss
from .params import ParamStore
from .tape import Node, Tape, backward


def finite_diff_check(
    loss_fn: Callable[[ParamStore, Tape], Node],
    params: ParamStore,
    eps: float = 1e-5,
    sample: int = 8,
    seed: int = 0,
    report: dict | None = None,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``loss_fn(params, tape)`` must build the scalar loss on ``tape`` reading
    parameters through ``tape.param(params, key)``.  Up to ``sample``
    coordinates per parameter are probed (all of them when the tensor is
    smaller).  Relative error uses ``max(|analytic|, |numeric|, 1e-8)`` as the
    denominator.  Pass a dict as ``report`` to receive per-key maxima.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")

    def value() -> float:
        return float(loss_fn(params, Tape()).value)

    tape = Tape()
    loss = loss_fn(params, tape)
    analytic = backward(tape, loss)
    if value() != float(loss.value):
        raise NonDeterministicLoss("two evaluations at the same point differ")

    rng = np.random.default_rng(seed)
    worst = 0.0
    for key in params.keys():
        arr = params[key]
        grad = analytic.get(key, np.zeros_like(arr)).ravel()
        if arr.size <= sample:
            coords = np.arange(arr.size)
        else:
            coords = rng.choice(arr.size, size=sample, replace=False)
        key_worst = 0.0
        flat = arr.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            f_plus = value()
            flat[c] = orig - eps
            f_minus = value()
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(grad[c]), abs(numeric), 1e-8)
            key_worst = max(key_worst, abs(grad[c] - numeric) / denom)
        if report is not None:
            report[key] = key_worst
        worst = max(worst, key_worst)
    return float(worst)
