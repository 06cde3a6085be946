"""Persistence-weighted, missing-pixel-aware multitask MSE.

The same functions serve as the evaluation score and as the training loss:
they accept autodiff tensors and plain arrays alike.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, NumericError
from .tensor import Tensor

PERSISTENCE = {
    "temperature": 0.03163512,
    "crr_intensity": 0.00024158,
    "asii_turb_trop_prob": 0.00703378,
    "cma": 0.19160305,
}
VARIABLES = tuple(PERSISTENCE)


@dataclass(frozen=True)
class VariableSpec:
    name: str
    persistence: float

    @property
    def weight(self) -> float:
        return 1.0 / self.persistence


def persistence_weight(name: str) -> float:
    try:
        return 1.0 / PERSISTENCE[name]
    except KeyError:
        raise KeyError(f"unknown target variable {name!r}; expected one of {VARIABLES}") from None


WEIGHTS = np.array([persistence_weight(v) for v in VARIABLES])


def _batched(pred, target, mask):
    pred = pred if isinstance(pred, Tensor) else T.Tensor(pred, dtype=np.float64)
    target = np.asarray(target, dtype=pred.dtype)
    mask = np.ones(target.shape, dtype=pred.dtype) if mask is None else np.asarray(mask, dtype=pred.dtype)
    if pred.shape != target.shape or mask.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape}, target {target.shape} and mask {mask.shape} must agree")
    if pred.ndim == 4:
        pred = pred.reshape(1, *pred.shape)
        target, mask = target[None], mask[None]
    if pred.ndim != 5:
        raise DimensionError(f"expected [B, V, T, H, W] frames, got {pred.shape}")
    return pred, target, mask


def masked_mse(pred, target, mask=None) -> Tensor:
    """Squared error averaged over the valid pixels and time steps of each variable.

    Returns ``[B, V]`` (or ``[V]`` for unbatched input).
    """
    unbatched = np.ndim(target) == 4
    pred, target, mask = _batched(pred, target, mask)
    valid = mask.sum(axis=(2, 3, 4))
    if np.any(valid == 0):
        b, v = np.argwhere(valid == 0)[0]
        raise NumericError(f"score undefined: variable {v} of sample {b} has no valid pixels")
    sq = T.square(pred - target) * mask
    mse = T.tsum(sq, axis=(2, 3, 4)) * (1.0 / valid)
    return mse.reshape(mse.shape[1]) if unbatched else mse


def weighted_terms(pred, target, mask=None, weights=None) -> Tensor:
    """``w(v) * masked_mse`` per sample and variable, shape ``[B, V]``."""
    mse = masked_mse(pred, target, mask)
    if mse.ndim == 1:
        mse = mse.reshape(1, -1)
    w = WEIGHTS if weights is None else np.asarray(weights)
    if w.shape != (mse.shape[1],):
        raise DimensionError(f"{mse.shape[1]} variables but {w.shape} weights")
    return mse * w.astype(mse.dtype)


def score(pred, target, mask=None, weights=None) -> Tensor:
    """Mean of the weighted terms over samples (days x regions) and variables."""
    return T.mean(weighted_terms(pred, target, mask, weights))


def persistence_baseline(inputs: np.ndarray, t_out: int, n_vars: int = 4) -> np.ndarray:
    """Repeat the last observed frame of each target variable ``t_out`` times.

    ``inputs`` is ``[C, T, H, W]`` or ``[B, C, T, H, W]`` with the target
    variables in the first ``n_vars`` channels.
    """
    inputs = np.asarray(inputs)
    last = inputs[..., :n_vars, -1:, :, :]
    reps = [1] * last.ndim
    reps[-3] = t_out
    return np.tile(last, reps)
