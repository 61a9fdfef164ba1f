"""Stochastic gradient descent with momentum and coupled L2 weight decay."""

from __future__ import annotations

import numpy as np


class SGD:
    """Momentum SGD over an ordered set of named parameters.

    Update rule per parameter::

        v <- momentum * v + grad + weight_decay * param
        param <- param - lr * v

    Velocity buffers are zero-initialized with the shape of their
    parameter; gradients are cleared after every step.
    """

    def __init__(self, params, learning_rate, momentum=0.0, weight_decay=0.0):
        if learning_rate < 0:
            raise ValueError(f"learning_rate must be nonnegative, got {learning_rate}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        if weight_decay < 0:
            raise ValueError(f"weight_decay must be nonnegative, got {weight_decay}")
        self.params = list(params)
        if not self.params:
            raise ValueError("SGD needs at least one parameter")
        self.learning_rate = float(learning_rate)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self):
        """Apply one update to every parameter; raises if any gradient is missing."""
        for name, p in self.params:
            if p.grad is None:
                raise RuntimeError(f"sgd step: parameter '{name}' has no gradient")
        for name, p in self.params:
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad
            if self.weight_decay:
                v += self.weight_decay * p.data
            p.data -= self.learning_rate * v
            p.zero_grad()

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()
