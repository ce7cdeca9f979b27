"""Adam with bias-corrected moment estimates."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from liverseg.autodiff import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Optional[Sequence[np.ndarray]],
              state: AdamState, l2_weight: float = 0.0) -> AdamState:
    """Apply one Adam update in place to ``params``.

    ``grads`` defaults to each parameter's ``.grad``.  With ``l2_weight`` > 0,
    ``l2_weight * theta`` is added to the gradient first.  Raises
    ``FloatingPointError`` (leaving everything untouched) if any gradient is
    non-finite.
    """
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise ValueError(f"gradient {i} has shape {g.shape}, parameter has {p.shape}")
        if not np.isfinite(g).all():
            label = p.name or f"#{i}"
            raise FloatingPointError(f"non-finite gradient for parameter {label} {p.shape}; step aborted")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]

    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if l2_weight:
            g = g + l2_weight * p.data
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state
