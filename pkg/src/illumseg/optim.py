"""RMSprop over :class:`~illumseg.tensor.Parameter` lists."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Parameter

DEFAULT_DECAY = 0.99
DEFAULT_EPS = 1e-8


def rmsprop_step(params: Iterable[Parameter], lr: float, decay: float = DEFAULT_DECAY, eps: float = DEFAULT_EPS) -> None:
    """One in-place update, then zero the grads.

    s <- decay*s + (1-decay)*g**2 ;  p <- p - lr*g/(sqrt(s)+eps)
    """
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ValueError("rmsprop_step: parameter has no gradient")
    for p in params:
        g = p.grad
        dt = p.data.dtype.type
        p.rms_state *= dt(decay)
        p.rms_state += dt(1 - decay) * g * g
        p.data -= dt(lr) * g / (np.sqrt(p.rms_state) + dt(eps))
        p.grad = np.zeros_like(p.data)
