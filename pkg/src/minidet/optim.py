"""SGD with classical momentum over a ParameterStore."""

from __future__ import annotations

import numpy as np

from .params import ParameterStore


class MissingGradError(RuntimeError):
    """A parameter had no gradient at step time."""


class SGD:
    """v <- momentum * v + grad;  p <- p - lr * v;  grads cleared after step."""

    def __init__(self, store: ParameterStore, lr: float, momentum: float = 0.0):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.store = store
        self.lr = lr
        self.momentum = momentum
        self._velocity = {name: np.zeros(t.shape) for name, t in store.iter_params()}

    def step(self):
        for name, p in self.store.iter_params():
            if p.grad is None:
                raise MissingGradError(f"parameter {name!r} has no gradient")
            v = self._velocity[name]
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v
            p.grad = None
