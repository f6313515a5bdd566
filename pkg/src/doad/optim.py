from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import DimensionError
from .tensor import Tensor


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], lr: float,
             momentum: float = 0.9, velocity: list[np.ndarray] | None = None) -> list[np.ndarray]:
    """In-place momentum SGD: ``v <- mu*v + g; p <- p - lr*v``.

    Returns the velocity buffers so callers can thread them through steps.
    A ``None`` gradient counts as zero.
    """
    if len(params) != len(grads):
        raise DimensionError(f"sgd_step: {len(params)} params but {len(grads)} grads")
    if velocity is None:
        velocity = [np.zeros_like(p.data) for p in params]
    for p, g, v in zip(params, grads, velocity):
        if g is None:
            g = 0.0
        elif g.shape != p.shape:
            raise DimensionError(f"sgd_step: grad {g.shape} does not match param {p.shape}")
        v *= momentum
        v += g
        p.data -= p.dtype.type(lr) * v
    return velocity


class SGD:
    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9):
        self.params = list(params)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        sgd_step(self.params, [p.grad for p in self.params], lr, self.momentum, self.velocity)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
