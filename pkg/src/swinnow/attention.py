"""3D (shifted) window attention and the encoder/decoder transformer blocks.

Token tensors are channels-last: ``[B, T, H, W, C]``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .nn import LayerNorm, Linear, Module
from .tensor import Tensor

MASK_VALUE = -1e9


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ConfigError(f"expected three extents, got {v}")
    return v


@dataclass(frozen=True)
class WindowSpec:
    window: tuple[int, int, int] = (1, 7, 7)
    shift: tuple[int, int, int] = (0, 2, 2)

    def __post_init__(self):
        window, shift = _triple(self.window), _triple(self.shift)
        object.__setattr__(self, "window", window)
        object.__setattr__(self, "shift", shift)
        if any(w < 1 for w in window):
            raise ConfigError(f"window extents must be >= 1, got {window}")
        if any(not 0 <= s < w for s, w in zip(shift, window)):
            raise ConfigError(f"shift {shift} must satisfy 0 <= s < w for window {window}")

    @property
    def tokens(self) -> int:
        return math.prod(self.window)

    @property
    def table_rows(self) -> int:
        return math.prod(2 * w - 1 for w in self.window)

    def unshifted(self) -> "WindowSpec":
        return WindowSpec(self.window, (0, 0, 0))


@dataclass(frozen=True)
class PadRecord:
    grid: tuple[int, int, int]
    padded: tuple[int, int, int]
    window: tuple[int, int, int]
    shift: tuple[int, int, int]

    @property
    def counts(self) -> tuple[int, int, int]:
        return tuple(p // w for p, w in zip(self.padded, self.window))

    @property
    def num_windows(self) -> int:
        return math.prod(self.counts)


def _record(grid, spec: WindowSpec) -> PadRecord:
    grid = tuple(int(g) for g in grid)
    padded = tuple(-(-g // w) * w for g, w in zip(grid, spec.window))
    return PadRecord(grid, padded, spec.window, spec.shift)


def _tile(a: np.ndarray, rec: PadRecord) -> np.ndarray:
    """[Tp, Hp, Wp, ...] -> [nW, N, ...] using the same layout as window_partition."""
    (nt, nh, nw), (wt, wh, ww) = rec.counts, rec.window
    rest = a.shape[3:]
    a = a.reshape(nt, wt, nh, wh, nw, ww, *rest)
    a = a.transpose(0, 2, 4, 1, 3, 5, *range(6, 6 + len(rest)))
    return a.reshape(nt * nh * nw, wt * wh * ww, *rest)


@functools.lru_cache(maxsize=256)
def attention_mask(rec: PadRecord) -> np.ndarray:
    """Additive mask ``[nW, N, N]`` for one partition layout.

    Pairs are blocked when they come from different regions of the
    cyclically rolled grid (i.e. were not neighbours before the roll) or when
    either token is padding.
    """
    labels = []
    valid = []
    for length, padded, w, s in zip(rec.grid, rec.padded, rec.window, rec.shift):
        lab = np.zeros(padded, dtype=np.int64)
        if s > 0:
            lab[padded - w : padded - s] = 1
            lab[padded - s :] = 2
        labels.append(lab)
        original = (np.arange(padded) + s) % padded
        valid.append(original < length)
    region = labels[0][:, None, None] * 9 + labels[1][None, :, None] * 3 + labels[2][None, None, :]
    ok = valid[0][:, None, None] & valid[1][None, :, None] & valid[2][None, None, :]
    region = _tile(region, rec)
    ok = _tile(ok, rec)
    allowed = (region[:, :, None] == region[:, None, :]) & ok[:, :, None] & ok[:, None, :]
    mask = np.where(allowed, 0.0, MASK_VALUE)
    mask.setflags(write=False)
    return mask


def window_partition(x: Tensor, spec: WindowSpec) -> tuple[Tensor, np.ndarray, PadRecord]:
    """Pad, roll by ``-shift`` and tile ``x[B, T, H, W, C]`` into ``[B*nW, N, C]`` windows."""
    if x.ndim != 5:
        raise DimensionError(f"expected tokens [B, T, H, W, C], got shape {x.shape}")
    b, c = x.shape[0], x.shape[-1]
    rec = _record(x.shape[1:4], spec)
    pads = [0, *(p - g for p, g in zip(rec.padded, rec.grid)), 0]
    x = T.pad_high(x, pads)
    x = T.roll(x, [-s for s in spec.shift], (1, 2, 3))
    (nt, nh, nw), (wt, wh, ww) = rec.counts, rec.window
    x = x.reshape(b, nt, wt, nh, wh, nw, ww, c)
    x = x.permute(0, 1, 3, 5, 2, 4, 6, 7)
    x = x.reshape(b * rec.num_windows, spec.tokens, c)
    return x, attention_mask(rec), rec


def window_reverse(windows: Tensor, rec: PadRecord) -> Tensor:
    """Exact inverse of :func:`window_partition`: untile, roll by ``+shift``, crop."""
    nwin = rec.num_windows
    n = math.prod(rec.window)
    if windows.ndim != 3 or windows.shape[1] != n or windows.shape[0] % nwin:
        raise ContractError(
            f"windows of shape {windows.shape} do not fit pad record "
            f"({nwin} windows of {n} tokens over padded grid {rec.padded})"
        )
    b, c = windows.shape[0] // nwin, windows.shape[-1]
    (nt, nh, nw), (wt, wh, ww) = rec.counts, rec.window
    x = windows.reshape(b, nt, nh, nw, wt, wh, ww, c)
    x = x.permute(0, 1, 4, 2, 5, 3, 6, 7)
    x = x.reshape(b, *rec.padded, c)
    x = T.roll(x, rec.shift, (1, 2, 3))
    if rec.padded != rec.grid:
        x = x[:, : rec.grid[0], : rec.grid[1], : rec.grid[2]]
    return x


@functools.lru_cache(maxsize=64)
def relative_position_index(window: tuple[int, int, int]) -> np.ndarray:
    """``[N, N]`` table row for each token pair, mixed-radix over shifted offsets."""
    wt, wh, ww = window
    coords = np.stack(np.meshgrid(np.arange(wt), np.arange(wh), np.arange(ww), indexing="ij"))
    coords = coords.reshape(3, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel += np.array([wt - 1, wh - 1, ww - 1])[:, None, None]
    index = rel[0] * (2 * wh - 1) * (2 * ww - 1) + rel[1] * (2 * ww - 1) + rel[2]
    index.setflags(write=False)
    return index


def relative_position_bias(table: Tensor, spec: WindowSpec) -> Tensor:
    """Gather the learned ``[rows, heads]`` table into a ``[heads, N, N]`` logit bias."""
    if table.shape[0] != spec.table_rows:
        raise DimensionError(f"bias table has {table.shape[0]} rows, window {spec.window} needs {spec.table_rows}")
    bias = T.take_rows(table, relative_position_index(spec.window))
    return bias.permute(2, 0, 1)


class WindowAttention(Module):
    """Multi-head attention inside local windows with a relative position bias.

    With ``kv`` omitted this is W-MSA/SW-MSA; otherwise queries come from the
    first input and keys/values from ``kv`` (W-MCA/SW-MCA).
    """

    def __init__(self, dim: int, heads: int, spec: WindowSpec):
        if heads < 1 or dim % heads:
            raise ConfigError(f"embedding dim {dim} is not divisible by {heads} heads")
        self.q = Linear(dim, dim)
        self.k = Linear(dim, dim)
        self.v = Linear(dim, dim)
        self.proj = Linear(dim, dim)
        self.rel_bias = T.parameter(np.zeros((spec.table_rows, heads)))
        self._dim = dim
        self._heads = heads
        self._spec = spec

    def _split(self, x: Tensor, b: int, nwin: int) -> Tensor:
        n = x.shape[1]
        x = x.reshape(b, nwin, n, self._heads, self._dim // self._heads)
        return x.permute(0, 1, 3, 2, 4)

    def __call__(self, x: Tensor, kv: Tensor | None = None, shifted: bool = False) -> Tensor:
        if x.shape[-1] != self._dim:
            raise DimensionError(f"attention expects {self._dim} channels, got {x.shape[-1]}")
        if kv is not None and kv.shape != x.shape:
            raise DimensionError(f"query grid {x.shape} and key/value grid {kv.shape} differ")
        spec = self._spec if shifted else self._spec.unshifted()
        b = x.shape[0]
        xw, mask, rec = window_partition(x, spec)
        kvw = xw if kv is None else window_partition(kv, spec)[0]
        nwin = rec.num_windows
        head_dim = self._dim // self._heads

        q = self._split(T.scale(self.q(xw), head_dim**-0.5), b, nwin)
        k = self._split(self.k(kvw), b, nwin)
        v = self._split(self.v(kvw), b, nwin)
        bias = relative_position_bias(self.rel_bias, spec)
        out = window_attention(q, k, v, bias, mask if mask.any() else None)
        out = out.permute(0, 1, 3, 2, 4).reshape(b * nwin, spec.tokens, self._dim)
        return window_reverse(self.proj(out), rec)

    @property
    def heads(self) -> int:
        return self._heads


def window_attention(q: Tensor, k: Tensor, v: Tensor, bias: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """``softmax(q k^T + bias + mask) v`` for ``[B, nW, h, N, d]`` inputs (q pre-scaled).

    ``bias`` is ``[h, N, N]``; ``mask`` is the additive ``[nW, N, N]`` array or None.
    """
    logits = q @ k.permute(0, 1, 2, 4, 3) + bias
    if mask is not None:
        logits = logits + T.Tensor(mask[:, None], dtype=logits.dtype)
    return T.softmax(logits) @ v


def wmsa(x: Tensor, attn: WindowAttention, shifted: bool = False) -> Tensor:
    return attn(x, None, shifted)


def wmca(q_in: Tensor, kv_in: Tensor, attn: WindowAttention, shifted: bool = False) -> Tensor:
    if q_in.shape[1:4] != kv_in.shape[1:4]:
        raise DimensionError(f"cross-attention grids differ: {q_in.shape[1:4]} vs {kv_in.shape[1:4]}")
    return attn(q_in, kv_in, shifted)


def mlp(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Two-layer feed-forward net, GELU hidden activation, identity output."""
    d = x.shape[-1]
    if w1.shape != (d, 4 * d) or w2.shape != (4 * d, d):
        raise ConfigError(f"MLP needs W1 {(d, 4 * d)} and W2 {(4 * d, d)}, got {w1.shape} and {w2.shape}")
    return T.linear(T.gelu(T.linear(x, w1, b1)), w2, b2)


class MLP(Module):
    def __init__(self, dim: int, hidden: int | None = None):
        hidden = 4 * dim if hidden is None else hidden
        if hidden != 4 * dim:
            raise ConfigError(f"MLP hidden width must be 4*{dim}={4 * dim}, got {hidden}")
        self.fc1 = Linear(dim, hidden)
        self.fc2 = Linear(hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return mlp(x, self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias)


class EncoderLayer(Module):
    """Pre-norm self-attention sublayer followed by the MLP sublayer."""

    def __init__(self, dim: int, heads: int, spec: WindowSpec, shifted: bool):
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, spec)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim)
        self._shifted = shifted

    def __call__(self, z: Tensor) -> Tensor:
        z = self.attn(self.norm1(z), None, self._shifted) + z
        return self.mlp(self.norm2(z)) + z


class DecoderLayer(Module):
    """Self-attention, cross-attention onto the skip tokens, then the MLP."""

    def __init__(self, dim: int, heads: int, spec: WindowSpec, shifted: bool):
        self.norm1 = LayerNorm(dim)
        self.self_attn = WindowAttention(dim, heads, spec)
        self.norm2 = LayerNorm(dim)
        self.cross_attn = WindowAttention(dim, heads, spec)
        self.norm3 = LayerNorm(dim)
        self.mlp = MLP(dim)
        self._shifted = shifted

    def __call__(self, z: Tensor, skip: Tensor) -> Tensor:
        z = self.self_attn(self.norm1(z), None, self._shifted) + z
        z = wmca(self.norm2(z), skip, self.cross_attn, self._shifted) + z
        return self.mlp(self.norm3(z)) + z


class EncoderBlock(Module):
    """A plain-window layer followed by its shifted-window twin."""

    def __init__(self, dim: int, heads: int, spec: WindowSpec):
        self.layers = [EncoderLayer(dim, heads, spec, False), EncoderLayer(dim, heads, spec, True)]

    def __call__(self, z: Tensor) -> Tensor:
        for layer in self.layers:
            z = layer(z)
        return z


class DecoderBlock(Module):
    def __init__(self, dim: int, heads: int, spec: WindowSpec):
        self.layers = [DecoderLayer(dim, heads, spec, False), DecoderLayer(dim, heads, spec, True)]

    def __call__(self, z: Tensor, skip: Tensor) -> Tensor:
        if z.shape != skip.shape:
            raise DimensionError(f"decoder input {z.shape} and skip {skip.shape} differ")
        for layer in self.layers:
            z = layer(z, skip)
        return z

