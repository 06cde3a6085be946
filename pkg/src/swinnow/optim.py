"""Adam with decoupled weight decay and the plateau learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .tensor import ParamStore

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainState:
    lr: float = 1e-4
    step: int = 0
    epoch: int = 0
    bad_epochs: int = 0
    best: float = math.inf
    seed: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamStore, state: TrainState, lr: float | None = None, weight_decay: float = 0.0) -> None:
    """One bias-corrected Adam update, plus ``-lr * wd * theta`` when ``weight_decay > 0``."""
    lr = state.lr if lr is None else lr
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ContractError(f"no gradient for {len(missing)} parameter(s), e.g. {missing[:3]}")
    state.step += 1
    t = state.step
    c1 = 1.0 - BETA1**t
    c2 = 1.0 - BETA2**t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        if weight_decay > 0:
            update = update + lr * weight_decay * p.data
        p.data = (p.data - update).astype(p.dtype, copy=False)


def lr_schedule(
    state: TrainState, score: float, patience: int = 3, factor: float = 0.5, min_lr: float = 1e-7
) -> float:
    """Halve ``state.lr`` once more than ``patience`` epochs pass without a strictly better score."""
    if patience < 1 or not 0.0 < factor < 1.0:
        raise ValueError(f"invalid plateau settings: patience={patience}, factor={factor}")
    if score < state.best:
        state.best = score
        state.bad_epochs = 0
    else:
        state.bad_epochs += 1
        if state.bad_epochs > patience:
            state.lr = max(state.lr * factor, min_lr)
            state.bad_epochs = 0
    return state.lr
