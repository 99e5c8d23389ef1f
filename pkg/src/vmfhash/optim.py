from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderWeights

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    rejected: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_weights(cls, weights: EncoderWeights, **hyper) -> "AdamState":
        state = cls(**hyper)
        for name, p in weights.params.items():
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        return state


def adam_step(weights: EncoderWeights, grads: dict[str, np.ndarray], state: AdamState):
    """Bias-corrected Adam update, in place. Returns (weights, state).

    A step whose gradients contain a non-finite value is rejected: nothing
    changes except ``state.rejected``.
    """
    if set(grads) != set(weights.params):
        raise ValueError("gradient names do not match parameters")
    for name, g in grads.items():
        if g.shape != weights.params[name].shape:
            raise ValueError(f"gradient shape mismatch for {name}: {g.shape} vs {weights.params[name].shape}")
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.rejected += 1
        log.warning("non-finite gradient, Adam step rejected (%d so far)", state.rejected)
        return weights, state
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in weights.params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    weights.version += 1
    return weights, state
