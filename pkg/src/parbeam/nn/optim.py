"""Adam with bias correction and a piecewise-constant learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidArgument, TrainingDiverged

__all__ = ["AdamState", "adam_init", "adam_step", "piecewise_lr"]


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    history: list = field(default_factory=list, repr=False)


def adam_init(n: int, lr: float = 1e-3) -> AdamState:
    return AdamState(np.zeros(n), np.zeros(n), 0, float(lr))


def adam_step(state: AdamState, params, grads, lr: float | None = None) -> np.ndarray:
    """Return updated parameters; ``state`` is advanced in place."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise InvalidArgument(f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    if not np.all(np.isfinite(grads)):
        raise TrainingDiverged("non-finite gradient", last_good=params.copy())
    lr = state.lr if lr is None else float(lr)
    state.t += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    mhat = state.m / (1 - state.beta1 ** state.t)
    vhat = state.v / (1 - state.beta2 ** state.t)
    return params - lr * mhat / (np.sqrt(vhat) + state.eps)


def piecewise_lr(step: int, total: int, start: float = 1e-3, end: float = 1e-5, pieces: int = 3) -> float:
    """Geometric staircase from ``start`` to ``end`` in ``pieces`` equal stages."""
    if pieces <= 1 or total <= 0:
        return start
    stage = min(pieces - 1, step * pieces // max(total, 1))
    return float(start * (end / start) ** (stage / (pieces - 1)))
