"""Adam with bias correction and coupled (L2-style) weight decay."""

from __future__ import annotations

from collections.abc import Iterable

import numpy as np

from ..errors import ConfigError
from .tensor import ParamTensor


def adam_step(params: Iterable[ParamTensor], lr: float, beta1: float = 0.9, beta2: float = 0.999,
              weight_decay: float = 0.0, eps: float = 1e-8) -> None:
    """Apply one Adam update in place.

    Weight decay is coupled: ``weight_decay * w`` is added to the gradient
    before the moment updates, so it is rescaled by the adaptive denominator.
    """
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
        raise ConfigError("Adam betas must lie in [0, 1)")
    if weight_decay < 0 or eps <= 0:
        raise ConfigError("weight_decay must be >= 0 and eps > 0")
    params = list(params)
    if len({p.step_count for p in params}) > 1:
        raise ConfigError("parameters have inconsistent Adam step counts")
    for p in params:
        dtype = p.value.dtype.type
        g = p.grad
        if weight_decay:
            g = g + dtype(weight_decay) * p.value
        p.step_count += 1
        t = p.step_count
        p.adam_m *= dtype(beta1)
        p.adam_m += dtype(1.0 - beta1) * g
        p.adam_v *= dtype(beta2)
        p.adam_v += dtype(1.0 - beta2) * (g * g)
        m_hat = p.adam_m / dtype(1.0 - beta1**t)
        v_hat = p.adam_v / dtype(1.0 - beta2**t)
        p.value -= dtype(lr) * m_hat / (np.sqrt(v_hat) + dtype(eps))


def zero_grads(params: Iterable[ParamTensor]) -> None:
    for p in params:
        p.zero_grad()
