"""The encoder-decoder nowcasting network, its configuration and checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import DecoderBlock, EncoderBlock, WindowSpec
from .errors import ConfigError, DimensionError, FormatError
from .nn import LayerNorm, Module, initialize
from .optim import TrainState
from .patches import PatchEmbed, PatchExpand, PatchMerge, PatchSpec, ProjectionHead
from .tensor import Tensor

N_STATIC = 3
N_DYNAMIC = 12


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 48
    patch_size: int = 4
    patch_t: int | None = None  # None: one token spans all input frames
    t_in: int = 4
    t_out: int = 32
    target_vars: int = 4
    static: bool = False
    dynamic: bool = False
    depths: tuple[int, ...] = (4, 4, 4)
    decoder_depths: tuple[int, ...] = (4, 4, 4)
    window: tuple[int, ...] = (1, 7, 7)
    shift: tuple[int, ...] = (0, 2, 2)
    heads: tuple[int, ...] | None = None
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("depths", "decoder_depths", "window", "shift"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.heads is not None:
            object.__setattr__(self, "heads", tuple(int(v) for v in self.heads))

    @property
    def in_channels(self) -> int:
        return self.target_vars + N_STATIC * self.static + N_DYNAMIC * self.dynamic

    @property
    def temporal_patch(self) -> int:
        return self.t_in if self.patch_t is None else self.patch_t

    @property
    def patch(self) -> PatchSpec:
        return PatchSpec((self.temporal_patch, self.patch_size, self.patch_size), self.embed_dim)

    @property
    def window_spec(self) -> WindowSpec:
        return WindowSpec(self.window, self.shift)

    @property
    def dims(self) -> tuple[int, int, int]:
        c = self.embed_dim
        return (c, 2 * c, 4 * c)

    @property
    def stage_heads(self) -> tuple[int, int, int]:
        if self.heads is not None:
            return self.heads
        first = max(1, self.embed_dim // 16)
        return (first, 2 * first, 4 * first)

    @property
    def frames_per_token(self) -> int:
        return self.t_out // (self.t_in // self.temporal_patch)

    def problems(self) -> list[str]:
        errs = []
        if len(self.depths) != 3 or len(self.decoder_depths) != 3:
            errs.append("exactly three encoder and three decoder stages are required")
        if any(d < 2 or d % 2 for d in self.depths + self.decoder_depths):
            errs.append("stage depths must be positive and even (plain + shifted layer pairs)")
        if self.embed_dim < 2 or self.embed_dim % 2:
            errs.append("embed_dim must be a positive even number")
        if self.patch_size < 1 or self.temporal_patch < 1:
            errs.append("patch extents must be >= 1")
        elif self.t_in % self.temporal_patch:
            errs.append(f"t_in={self.t_in} must be divisible by the temporal patch {self.temporal_patch}")
        elif self.t_out % (self.t_in // self.temporal_patch):
            errs.append(f"t_out={self.t_out} must be divisible by the token time extent")
        if self.heads is not None and len(self.heads) != 3:
            errs.append("heads must list one count per stage")
        elif any(h < 1 or d % h for d, h in zip(self.dims, self.stage_heads)):
            errs.append(f"stage dims {self.dims} must be divisible by heads {self.stage_heads}")
        try:
            self.window_spec
        except ConfigError as exc:
            errs.append(str(exc))
        if self.weight_decay < 0:
            errs.append("weight_decay must be >= 0")
        return errs

    def validate(self) -> None:
        errs = self.problems()
        if errs:
            raise ConfigError("invalid model config: " + "; ".join(errs))

    def canonical_text(self) -> str:
        """Architecture fields as sorted ``key = value`` lines (seed and decay excluded)."""
        skip = {"seed", "weight_decay"}
        lines = []
        for f in sorted(dataclasses.fields(self), key=lambda f: f.name):
            if f.name in skip:
                continue
            value = getattr(self, f.name)
            if f.name == "patch_t":
                value = self.temporal_patch
            if f.name == "heads":
                value = self.stage_heads
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> int:
        digest = hashlib.blake2b(self.canonical_text().encode(), digest_size=8).digest()
        return int.from_bytes(digest, "little")


def _version(embed, patch, wd=False, static=False, dynamic=False) -> ModelConfig:
    return ModelConfig(
        embed_dim=embed, patch_size=patch, weight_decay=1e-6 if wd else 0.0, static=static, dynamic=dynamic
    )


VERSIONS: dict[str, ModelConfig] = {
    "v0": _version(16, 2),
    "v1": _version(32, 2),
    "v2": _version(48, 2),
    "v3": _version(48, 2, wd=True),
    "v4": _version(48, 3, wd=True),
    "v5": _version(48, 4, wd=True),
    "v6": _version(48, 4, wd=True, static=True),
    "v7": _version(48, 4, wd=True, dynamic=True),
    "v8": _version(48, 4, wd=True, static=True, dynamic=True),
}


# smallest configuration that still exercises every stage; used by the gradient suite
MICRO = ModelConfig(embed_dim=8, patch_size=4, t_in=2, t_out=4)


class NowcastModel(Module):
    """Three self-attention encoder stages and three cross-attention decoder stages.

    Decoder stage k attends to the tokens that entered encoder stage k (the
    embedding output, then each merge output), so widths mirror the encoder.
    LayerNorms sit between stages: after the embedding, before each merge,
    after each expand and before the head.
    """

    def __init__(self, config: ModelConfig):
        config.validate()
        spec = config.window_spec
        dims, heads = config.dims, config.stage_heads
        self.embed = PatchEmbed(config.in_channels, config.patch)
        self.embed_norm = LayerNorm(dims[0])
        self.encoders = [
            [EncoderBlock(d, h, spec) for _ in range(depth // 2)]
            for d, h, depth in zip(dims, heads, config.depths)
        ]
        self.merge_norms = [LayerNorm(dims[0]), LayerNorm(dims[1])]
        self.merges = [PatchMerge(dims[0]), PatchMerge(dims[1])]
        self.decoders = [
            [DecoderBlock(d, h, spec) for _ in range(depth // 2)]
            for d, h, depth in zip(dims, heads, config.decoder_depths)
        ]
        self.expands = [PatchExpand(dims[1]), PatchExpand(dims[2])]
        self.expand_norms = [LayerNorm(dims[0]), LayerNorm(dims[1])]
        self.out_norm = LayerNorm(dims[0])
        self.head = ProjectionHead(dims[0], config.patch, config.target_vars, config.frames_per_token)
        self._config = config

    @property
    def config(self) -> ModelConfig:
        return self._config

    def named_parameters(self, prefix: str = ""):
        yield from self.embed.named_parameters(f"{prefix}embed.")
        yield from self.embed_norm.named_parameters(f"{prefix}embed_norm.")
        for i, stage in enumerate(self.encoders):
            for j, block in enumerate(stage):
                yield from block.named_parameters(f"{prefix}encoder{i}.{j}.")
            if i < 2:
                yield from self.merge_norms[i].named_parameters(f"{prefix}merge_norm{i}.")
                yield from self.merges[i].named_parameters(f"{prefix}merge{i}.")
        for i in (2, 1, 0):
            if i < 2:
                yield from self.expands[i].named_parameters(f"{prefix}expand{i}.")
                yield from self.expand_norms[i].named_parameters(f"{prefix}expand_norm{i}.")
            for j, block in enumerate(self.decoders[i]):
                yield from block.named_parameters(f"{prefix}decoder{i}.{j}.")
        yield from self.out_norm.named_parameters(f"{prefix}out_norm.")
        yield from self.head.named_parameters(f"{prefix}head.")

    def skip_grids(self, height: int, width: int) -> list[tuple[int, int, int]]:
        """Token grids entering encoder stages 1..3 for an input of the given size."""
        p = self._config.patch.patch
        grid = (self._config.t_in // p[0], -(-height // p[1]), -(-width // p[2]))
        grids = [grid]
        for _ in range(2):
            t, h, w = grids[-1]
            grids.append((t, -(-h // 2), -(-w // 2)))
        return grids

    def __call__(self, frames) -> Tensor:
        x = frames if isinstance(frames, Tensor) else T.Tensor(frames)
        unbatched = x.ndim == 4
        if unbatched:
            x = x.reshape(1, *x.shape)
        cfg = self._config
        if x.ndim != 5 or x.shape[1] != cfg.in_channels:
            raise DimensionError(f"expected input [B, {cfg.in_channels}, {cfg.t_in}, H, W], got {frames.shape}")
        if x.shape[2] != cfg.t_in:
            raise DimensionError(f"expected {cfg.t_in} input frames, got {x.shape[2]}")
        height, width = x.shape[3], x.shape[4]

        skips = []
        z = self.embed_norm(self.embed(x))
        for i, stage in enumerate(self.encoders):
            skips.append(z)
            for block in stage:
                z = block(z)
            if i < 2:
                z = self.merges[i](self.merge_norms[i](z))
        for i in (2, 1, 0):
            skip = skips[i]
            if i < 2:
                z = self.expand_norms[i](self.expands[i](z))
                _, t, h, w, _ = skip.shape
                if z.shape[2:4] != (h, w):
                    z = z[:, :, :h, :w]
            for block in self.decoders[i]:
                z = block(z, skip)
        out = self.head(self.out_norm(z), height, width)
        return out.reshape(*out.shape[1:]) if unbatched else out


def build(config: ModelConfig, zero: bool = False) -> NowcastModel:
    """Construct the model; parameters are seeded from ``config.seed`` unless ``zero``."""
    model = NowcastModel(config)
    store = model.param_store()
    if zero:
        for t in store.values():
            t.data = np.zeros(t.shape, dtype=t.dtype)
    else:
        initialize(store, config.seed)
    return model


def count_params(config: ModelConfig) -> int:
    """Closed-form parameter count, without allocating any tensors."""
    config.validate()
    c = config.embed_dim
    pt, ph, pw = config.patch.patch
    rows = config.window_spec.table_rows

    def attention(d, h):
        return 4 * (d * d + d) + rows * h

    def mlp(d):
        return 2 * 4 * d * d + 4 * d + d

    def encoder_layer(d, h):
        return 2 * (2 * d) + attention(d, h) + mlp(d)

    def decoder_layer(d, h):
        return 3 * (2 * d) + 2 * attention(d, h) + mlp(d)

    n = config.in_channels * pt * ph * pw * c + c + c * c + c
    for d, h, depth, ddepth in zip(config.dims, config.stage_heads, config.depths, config.decoder_depths):
        n += depth * encoder_layer(d, h) + ddepth * decoder_layer(d, h)
    n += 4 * c * 2 * c + 8 * c * 4 * c
    n += 4 * c * 8 * c + 2 * c * 4 * c
    outputs = config.target_vars * config.frames_per_token
    n += c * ph * pw * c + c * outputs + outputs
    n += 2 * (c + (c + 2 * c) + (c + 2 * c) + c)  # inter-stage LayerNorms
    return n


# ---------------------------------------------------------------- checkpoints

MAGIC = b"SWNC"
VERSION = 1
_STATE_FIELDS = ("lr", "step", "epoch", "bad_epochs", "best", "seed")


@dataclass
class Checkpoint:
    fingerprint: int
    params: dict[str, np.ndarray]
    state: TrainState


def _pack64(value: float) -> np.ndarray:
    # f64 bit pattern carried in two f32 slots so scalars survive exactly
    return np.array([value], dtype="<f8").view("<f4")


def save_checkpoint(path, config: ModelConfig, params: dict[str, np.ndarray], state: TrainState) -> None:
    entries: list[tuple[str, np.ndarray]] = [(f"param/{k}", v) for k, v in params.items()]
    for k in params:
        if k in state.m:
            entries.append((f"adam_m/{k}", state.m[k]))
            entries.append((f"adam_v/{k}", state.v[k]))
    for f in _STATE_FIELDS:
        entries.append((f"state/{f}", _pack64(float(getattr(state, f)))))

    chunks = [MAGIC, struct.pack("<HQI", VERSION, config.fingerprint(), len(entries))]
    for name, arr in entries:
        raw = name.encode()
        arr = np.ascontiguousarray(arr)
        if arr.dtype != np.dtype("<f4"):
            arr = arr.astype("<f4")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int, label: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"truncated {self.what}: {label} at offset {self.pos} needs {n} bytes, "
                f"only {len(self.buf) - self.pos} remain (expected at least {self.pos + n} bytes, "
                f"file has {len(self.buf)})"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, label: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), label))


def load_checkpoint(path, config: ModelConfig | None = None) -> Checkpoint:
    """Parse a checkpoint; with ``config`` given, refuse one built for another architecture."""
    r = _Reader(Path(path).read_bytes(), "checkpoint")
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r} at offset 0")
    version, fingerprint, count = r.unpack("<HQI", "header")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at offset 4")
    if config is not None and fingerprint != config.fingerprint():
        raise ConfigError(
            f"checkpoint fingerprint {fingerprint:016x} does not match config fingerprint {config.fingerprint():016x}"
        )
    params: dict[str, np.ndarray] = {}
    state = TrainState()
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "name").decode()
        (ndim,) = r.unpack("<I", f"{name} rank")
        dims = r.unpack(f"<{ndim}I", f"{name} dims")
        nbytes = 4 * math.prod(dims)
        arr = np.frombuffer(r.take(nbytes, f"{name} payload"), dtype="<f4").reshape(dims).copy()
        kind, _, key = name.partition("/")
        if kind == "param":
            params[key] = arr
        elif kind == "adam_m":
            state.m[key] = arr
        elif kind == "adam_v":
            state.v[key] = arr
        elif kind == "state" and key in _STATE_FIELDS:
            value = float(arr.view("<f8")[0])
            setattr(state, key, value if key in ("lr", "best") else int(value))
        else:
            raise FormatError(f"unknown checkpoint entry {name!r} ending at offset {r.pos}")
    if r.pos != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.pos} trailing bytes after offset {r.pos}")
    return Checkpoint(fingerprint, params, state)


def restore(model: NowcastModel, checkpoint: Checkpoint) -> None:
    model.param_store().load_state(checkpoint.params)
