"""Momentum SGD and Adam acting on flat parameter vectors.

Weight decay is plain L2: ``wd * theta`` is added to the gradient before the
update, for both optimizers (so Adam + weight decay is not AdamW).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError

SGD_MOMENTUM = "sgd_momentum"
ADAM = "adam"


@dataclass
class OptimizerState:
    kind: str = SGD_MOMENTUM
    lr: float = 1e-3
    momentum: float = 0.0
    weight_decay: float = 0.0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    slots: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def __post_init__(self):
        if self.kind not in (SGD_MOMENTUM, ADAM):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        self.adam_betas = tuple(self.adam_betas)

    def fresh(self) -> "OptimizerState":
        """Same hyper-parameters, empty slots."""
        return OptimizerState(
            self.kind, self.lr, self.momentum, self.weight_decay, self.adam_betas, self.adam_eps
        )


def step(opt: OptimizerState, theta: np.ndarray, grad: np.ndarray, inplace: bool = True) -> np.ndarray:
    """Apply one update.  Updates ``theta`` in place unless ``inplace=False``."""
    if theta.shape != grad.shape:
        raise ValueError(f"parameter/gradient length mismatch: {theta.shape} vs {grad.shape}")
    out = theta if inplace else theta.copy()
    if opt.weight_decay:
        g = np.multiply(theta, opt.weight_decay)
        g += grad
    else:
        g = grad
    opt.t += 1
    if opt.kind == SGD_MOMENTUM:
        if opt.momentum:
            buf = opt.slots.get("velocity")
            if buf is None:
                # first step seeds the buffer with the raw gradient
                buf = g.copy()
            else:
                buf *= opt.momentum
                buf += g
            opt.slots["velocity"] = buf
            src = buf
        else:
            src = g
        # a finite sum implies finite entries (barring overflow near 1e308)
        if not math.isfinite(float(src.sum())):
            raise NonFiniteError("non-finite optimizer update")
        upd = np.multiply(src, opt.lr, out=g if g is not grad else None)
        out -= upd
        return out
    else:
        b1, b2 = opt.adam_betas
        m = opt.slots.setdefault("m", np.zeros_like(theta))
        v = opt.slots.setdefault("v", np.zeros_like(theta))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**opt.t)
        vhat = v / (1 - b2**opt.t)
        upd = opt.lr * mhat / (np.sqrt(vhat) + opt.adam_eps)
    if not np.all(np.isfinite(upd)):
        raise NonFiniteError("non-finite optimizer update")
    out -= upd
    return out
