"""Parameter containers: a tiny module system on top of :mod:`swinnow.tensor`."""

from __future__ import annotations

import numpy as np
from scipy import stats

from . import tensor as T
from .tensor import ParamStore, Tensor


class Module:
    """Base class; parameters and submodules are discovered in attribute order."""

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def param_store(self) -> ParamStore:
        return ParamStore(self.named_parameters())


def _zeros(*shape) -> Tensor:
    return T.parameter(np.zeros(shape))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        self.weight = _zeros(d_in, d_out)
        self.bias = _zeros(d_out) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = T.parameter(np.ones(dim))
        self.beta = _zeros(dim)
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self._eps)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal draws truncated at two standard deviations."""
    return stats.truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)


def initialize(store: ParamStore, seed: int, std: float = 0.02) -> None:
    """Seeded init: truncated normal for weights, ones for LN gains, zeros elsewhere.

    Each tensor draws from its own stream keyed by its name, so adding or
    removing a layer does not perturb the values of unrelated parameters.
    """
    for name, t in store.items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "weight":
            t.data = trunc_normal(T.name_stream(seed, name), t.shape, std).astype(t.dtype)
        elif leaf == "gamma":
            t.data = np.ones(t.shape, dtype=t.dtype)
        else:
            t.data = np.zeros(t.shape, dtype=t.dtype)
        t.grad = None
