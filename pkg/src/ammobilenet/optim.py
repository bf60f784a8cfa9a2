"""Plain RMSprop (no momentum, not centered, no weight decay)."""
from __future__ import annotations

import numpy as np

from .errors import OptimizerError, ParameterError


class RMSprop:
    """``v <- alpha*v + (1-alpha)*g^2;  p <- p - lr*g/(sqrt(v)+eps)``

    With ``eps_inside_sqrt=True`` the denominator becomes ``sqrt(v+eps)``.
    """

    def __init__(self, params, lr=1e-3, alpha=0.95, eps=1e-7, eps_inside_sqrt=False):
        if lr <= 0 or not 0.0 <= alpha < 1.0 or eps < 0:
            raise ParameterError(f"bad RMSprop hyperparameters lr={lr}, alpha={alpha}, eps={eps}")
        self.params = list(params)
        self.lr = lr
        self.alpha = alpha
        self.eps = eps
        self.eps_inside_sqrt = eps_inside_sqrt
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        missing = [p.name or f"#{i}" for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            raise OptimizerError(f"no gradient for parameter(s): {', '.join(missing)}")
        for p, v in zip(self.params, self.v):
            g = p.grad
            v *= self.alpha
            v += (1.0 - self.alpha) * g * g
            denom = np.sqrt(v + self.eps) if self.eps_inside_sqrt else np.sqrt(v) + self.eps
            p.data -= self.lr * g / denom
            p.grad = None

    def state_dict(self):
        return {"lr": self.lr, "alpha": self.alpha, "eps": self.eps,
                "eps_inside_sqrt": self.eps_inside_sqrt, "v": [v.copy() for v in self.v]}


def rmsprop_step(params, state):
    """Functional form: apply one update from ``state`` (an :class:`RMSprop`)."""
    if list(params) != state.params:
        raise OptimizerError("parameter set does not match optimizer state")
    state.step()
