"""Class-weighted negative log-likelihood over a mini-batch."""
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ShapeError
from .tensor import DTYPE

LOG_CLAMP = 1e-12

PHASE2_WEIGHTS = {0: 8.0, 1: 1.0, 2: 2.0, 3: 1.0, 4: 1.0}


@dataclass
class LossConfig:
    class_weights: dict = field(default_factory=dict)  # missing labels weigh 1

    def __post_init__(self):
        for label, w in self.class_weights.items():
            if not w > 0:
                raise ParameterError(f"class weight for {label} must be positive, got {w}")

    def weight_vector(self, k):
        return np.array([float(self.class_weights.get(c, 1.0)) for c in range(k)], dtype=DTYPE)


@dataclass
class LossResult:
    loss: float
    grad_logits: np.ndarray
    clamped: int = 0  # number of target probabilities hit by the log clamp


def nll_loss(probs, targets, cfg=None):
    """Weighted mean NLL of the target classes.

    ``probs`` is the softmax output ``[B, K]``.  The returned gradient is taken
    with respect to the logits that produced ``probs`` (softmax and NLL fused):
    ``w_i * (p_i - onehot_i) / B``.
    """
    probs = np.asarray(probs, dtype=DTYPE)
    if probs.ndim == 1:
        probs = probs[None]
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    b, k = probs.shape
    if targets.shape[0] != b:
        raise ShapeError(f"{b} probability rows but {targets.shape[0]} targets")
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= k:
        raise ParameterError(f"targets must lie in [0, {k})")
    w = (cfg or LossConfig()).weight_vector(k)[targets]
    p_t = probs[np.arange(b), targets]
    clamped = int((p_t < LOG_CLAMP).sum())
    loss = float(-(w * np.log(np.maximum(p_t, LOG_CLAMP))).sum() / b)
    grad = probs.copy()
    grad[np.arange(b), targets] -= 1.0
    grad *= (w / b)[:, None]
    return LossResult(loss, grad, clamped)
