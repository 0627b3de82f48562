"""SGD with classical or Nesterov momentum and a geometric learning-rate decay."""
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError

MODES = ("plain", "classical", "nesterov")


@dataclass(frozen=True)
class Schedule:
    """Geometric per-epoch decay from ``start`` to ``end`` over ``span`` epochs,
    constant afterwards."""

    start: float = 0.01
    end: float = 1e-6
    span: int = 24

    def __post_init__(self):
        if not (self.start > 0 and self.end > 0):
            raise ParameterError("learning rates must be positive")
        if self.span < 0:
            raise ParameterError("schedule span must be non-negative")


def lr_schedule(epoch, schedule=Schedule()):
    if epoch < 0:
        raise ParameterError("epoch must be non-negative")
    if schedule.span == 0:
        return schedule.end if epoch > 0 else schedule.start
    t = min(epoch, schedule.span) / schedule.span
    if t == 1.0:
        return schedule.end
    return schedule.start * (schedule.end / schedule.start) ** t


class SGD:
    """Momentum SGD over a dict of named parameter arrays.

    Velocity update ``V <- mu*V - lr*g`` then ``theta <- theta + V``.  In
    ``nesterov`` mode ``g`` must be the gradient at the look-ahead point
    ``theta + mu*V``; :meth:`lookahead` returns that point and :meth:`minimize_step`
    wires the two calls together for a gradient callback.
    Parameters are updated in place.
    """

    def __init__(self, lr=0.01, momentum=0.9, mode="nesterov"):
        if mode not in MODES:
            raise ParameterError(f"unknown optimizer mode {mode!r}")
        if not 0 <= momentum < 1:
            raise ParameterError("momentum must lie in [0, 1)")
        if mode == "plain":
            momentum = 0.0
        self.lr = lr
        self.momentum = momentum
        self.mode = mode
        self.velocity = {}

    def _v(self, name, p):
        v = self.velocity.get(name)
        if v is None:
            v = self.velocity[name] = np.zeros_like(p)
        elif v.shape != p.shape:
            raise ShapeError(f"velocity for {name} has shape {v.shape}, parameter {p.shape}")
        return v

    def lookahead(self, params):
        """Point at which the gradient should be evaluated for the next step."""
        if self.mode != "nesterov":
            return params
        return {n: p + self.momentum * self._v(n, p) for n, p in params.items()}

    def step(self, params, grads):
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
            v = self._v(name, p)
            v *= self.momentum
            v -= self.lr * g
            p += v

    def minimize_step(self, params, grad_fn):
        self.step(params, grad_fn(self.lookahead(params)))
