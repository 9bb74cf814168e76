"""AdamW with decoupled weight decay over a named parameter dict."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class OptimState:
    """Per-parameter first/second moments plus step count and hyperparameters.

    Moment buffers always match parameter shapes; the step count only moves
    forward. lr is mutable so the trainer can apply schedule drops.
    """

    def __init__(self, params: dict[str, Tensor], lr=2e-4, weight_decay=1e-4,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.step_count = 0
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
               state: OptimState) -> None:
    """One AdamW update in place: p <- p*(1 - lr*wd) - lr * mhat / (sqrt(vhat) + eps).

    Weight decay is decoupled from the adaptive step. All gradients are
    validated before any parameter is touched, so a NaN aborts the whole
    step with the state unchanged.
    """
    for name in params:
        g = grads.get(name)
        if g is None:
            raise ValueError(f"missing gradient for parameter '{name}'")
        if g.shape != params[name].data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape "
                             f"{params[name].data.shape} for '{name}'")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient in parameter '{name}'; step aborted")

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data = p.data * (1.0 - state.lr * state.weight_decay) \
            - state.lr * mhat / (np.sqrt(vhat) + state.eps)
