"""Patch embedding, 2x2 merging/expanding and the frame projection head."""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .errors import ConfigError, DimensionError
from .nn import Linear, Module
from .tensor import Tensor


@dataclass(frozen=True)
class PatchSpec:
    patch: tuple[int, int, int] = (1, 4, 4)
    embed_dim: int = 48

    def __post_init__(self):
        patch = tuple(int(p) for p in self.patch)
        object.__setattr__(self, "patch", patch)
        if len(patch) != 3 or any(p < 1 for p in patch):
            raise ConfigError(f"patch extents must be three positive ints, got {self.patch}")
        if self.embed_dim < 1:
            raise ConfigError(f"embed_dim must be >= 1, got {self.embed_dim}")

    @property
    def volume(self) -> int:
        return self.patch[0] * self.patch[1] * self.patch[2]


def _ceil_to(n: int, m: int) -> int:
    return -(-n // m) * m


class PatchEmbed(Module):
    """Stride-equals-kernel patch projection followed by a pointwise linear embedding.

    Frames ``[B, C_in, T, H, W]`` become tokens ``[B, T/pt, ceil(H/ph), ceil(W/pw), C]``;
    H and W are zero-padded on the high side when they do not divide.
    """

    def __init__(self, in_channels: int, spec: PatchSpec):
        self.proj = Linear(in_channels * spec.volume, spec.embed_dim)
        self.embed = Linear(spec.embed_dim, spec.embed_dim)
        self._in = in_channels
        self._spec = spec

    def flatten(self, x: Tensor) -> Tensor:
        pt, ph, pw = self._spec.patch
        b, c, t, h, w = x.shape
        if c != self._in:
            raise DimensionError(f"patch embedding expects {self._in} input channels, got {c}")
        if t % pt:
            raise ConfigError(f"{t} input frames are not divisible by temporal patch {pt}")
        x = T.pad_high(x, (0, 0, 0, _ceil_to(h, ph) - h, _ceil_to(w, pw) - w))
        hp, wp = x.shape[3], x.shape[4]
        x = x.reshape(b, c, t // pt, pt, hp // ph, ph, wp // pw, pw)
        x = x.permute(0, 2, 4, 6, 1, 3, 5, 7)
        return x.reshape(b, t // pt, hp // ph, wp // pw, c * pt * ph * pw)

    def __call__(self, x: Tensor) -> Tensor:
        return self.embed(self.proj(self.flatten(x)))


class PatchMerge(Module):
    """Concatenate each 2x2 spatial group (4C) and map it linearly to 2C."""

    def __init__(self, dim: int):
        self.reduction = Linear(4 * dim, 2 * dim, bias=False)

    @staticmethod
    def gather(x: Tensor) -> Tensor:
        b, t, h, w, c = x.shape
        x = T.pad_high(x, (0, 0, h % 2, w % 2, 0))
        h2, w2 = x.shape[2] // 2, x.shape[3] // 2
        x = x.reshape(b, t, h2, 2, w2, 2, c).permute(0, 1, 2, 4, 3, 5, 6)
        return x.reshape(b, t, h2, w2, 4 * c)

    def __call__(self, x: Tensor) -> Tensor:
        return self.reduction(self.gather(x))


class PatchExpand(Module):
    """Learned 2x upsampling: C -> 2C linear, scattered as four C/2 vectors per 2x2 group."""

    def __init__(self, dim: int):
        if dim % 2:
            raise ConfigError(f"patch expanding needs an even channel count, got {dim}")
        self.expand = Linear(dim, 2 * dim, bias=False)

    @staticmethod
    def scatter(x: Tensor) -> Tensor:
        b, t, h, w, c4 = x.shape
        c = c4 // 4
        x = x.reshape(b, t, h, w, 2, 2, c).permute(0, 1, 2, 4, 3, 5, 6)
        return x.reshape(b, t, 2 * h, 2 * w, c)

    def __call__(self, x: Tensor) -> Tensor:
        return self.scatter(self.expand(x))


class FinalExpand(Module):
    """Upsample tokens by the spatial patch size, keeping the channel count."""

    def __init__(self, dim: int, ph: int, pw: int):
        self.expand = Linear(dim, ph * pw * dim, bias=False)
        self._ph, self._pw = ph, pw

    def __call__(self, x: Tensor) -> Tensor:
        b, t, h, w, c = x.shape
        x = self.expand(x).reshape(b, t, h, w, self._ph, self._pw, c)
        return x.permute(0, 1, 2, 4, 3, 5, 6).reshape(b, t, h * self._ph, w * self._pw, c)


class ProjectionHead(Module):
    """Tokens back to frames: spatial expand, per-pixel FC, logistic squash.

    Each token carries ``frames_per_token`` future frames per output variable
    in its channel dimension.
    """

    def __init__(self, dim: int, spec: PatchSpec, out_vars: int, frames_per_token: int):
        self.up = FinalExpand(dim, spec.patch[1], spec.patch[2])
        self.fc = Linear(dim, out_vars * frames_per_token)
        self._vars = out_vars
        self._k = frames_per_token

    def logits(self, x: Tensor, height: int, width: int) -> Tensor:
        x = self.fc(self.up(x))
        b, t, h, w, _ = x.shape
        x = x.reshape(b, t, h, w, self._vars, self._k).permute(0, 4, 1, 5, 2, 3)
        x = x.reshape(b, self._vars, t * self._k, h, w)
        if (h, w) != (height, width):
            x = x[:, :, :, :height, :width]
        return x

    def __call__(self, x: Tensor, height: int, width: int) -> Tensor:
        return T.sigmoid(self.logits(x, height, width))

