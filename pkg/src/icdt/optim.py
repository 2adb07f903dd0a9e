"""AdamW with decoupled weight decay, and parameter EMA."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class StateError(KeyError):
    """Gradients and parameters are not name-aligned."""


@dataclass
class TrainState:
    """Everything needed to resume training bit-exactly.

    ``params`` aliases the model's parameter arrays, so optimizer updates are
    visible to the model without copying.
    """

    params: dict
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    ema_params: dict = field(default_factory=dict)
    step: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @classmethod
    def create(cls, params: dict, seed: int = 0) -> "TrainState":
        return cls(
            params=params,
            adam_m={k: np.zeros_like(v) for k, v in params.items()},
            adam_v={k: np.zeros_like(v) for k, v in params.items()},
            ema_params={k: v.copy() for k, v in params.items()},
            step=0,
            rng=np.random.default_rng(seed),
        )


def adamw_step(
    state: TrainState,
    grads: dict,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> TrainState:
    """One bias-corrected AdamW update, in place. Does not advance ``state.step``."""
    missing = set(state.params) ^ set(grads)
    if missing:
        raise StateError(f"gradient/parameter names do not match: {sorted(missing)}")
    t = state.step + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in state.params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise StateError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m, v = state.adam_m[name], state.adam_v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        if weight_decay:
            p -= lr * weight_decay * p
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype)
    return state


def ema_update(state: TrainState, decay: float = 0.9999) -> TrainState:
    for name, p in state.params.items():
        e = state.ema_params[name]
        e *= decay
        e += (1.0 - decay) * p
    return state
