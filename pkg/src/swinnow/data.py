"""Synthetic moving-blob weather movies, augmentation, batching and the W4CT file format."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage, special

from .errors import ConfigError, ContractError, DimensionError, FormatError
from .metric import VARIABLES

STATIC_NAMES = ("elevation", "latitude", "longitude")
DYNAMIC_NAMES = (
    "ctth_tempe", "ctth_press", "ctth_effectiv", "crr", "crr_accum", "cma_cloudsnow",
    "cma_dust", "cma_volcanic", "cma_smoke", "ct", "ct_cumuliform", "ct_multilayer",
)  # fmt: skip


@dataclass(frozen=True)
class SynthParams:
    height: int = 64
    width: int = 64
    blobs: int = 6
    speed: tuple[float, float] = (0.5, 1.5)  # pixels per frame
    diffusion: float = 0.05  # growth of blob variance per frame, pixels^2
    missing: float = 0.01
    t_in: int = 4
    t_out: int = 8
    region: int = 0
    seed: int = 0

    def validate(self) -> None:
        errs = []
        if self.height < 16 or self.width < 16:
            errs.append(f"grid must be at least 16x16, got {self.height}x{self.width}")
        if not 0.0 <= self.missing <= 1.0:
            errs.append(f"missing-pixel probability {self.missing} outside [0, 1]")
        lo, hi = self.speed
        if lo < 0 or hi < lo:
            errs.append(f"speed range {self.speed} must satisfy 0 <= lo <= hi")
        if self.diffusion < 0:
            errs.append("diffusion must be >= 0")
        if self.blobs < 1 or self.t_in < 1 or self.t_out < 1:
            errs.append("blobs, t_in and t_out must be >= 1")
        if errs:
            raise ConfigError("invalid synthetic data params: " + "; ".join(errs))


@dataclass
class Sample:
    inputs: np.ndarray  # [4, t_in, H, W] observed target variables
    targets: np.ndarray  # [4, t_out, H, W]
    mask: np.ndarray  # [4, t_out, H, W], 1 = valid
    static: np.ndarray  # [3, H, W]
    dynamic: np.ndarray  # [12, t_in, H, W]

    @property
    def grid(self) -> tuple[int, int]:
        return self.inputs.shape[-2:]


def static_fields(region: int, height: int, width: int) -> np.ndarray:
    """Elevation bumps plus latitude/longitude ramps, fixed per region."""
    rng = np.random.default_rng([int(region), 7919])
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    elev = np.zeros((height, width))
    for _ in range(3):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        s = rng.uniform(0.15, 0.35) * min(height, width)
        elev += rng.uniform(0.3, 1.0) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    elev /= elev.max()
    lat0, lon0 = rng.uniform(0.0, 0.5, size=2)
    lat = lat0 + 0.5 * (1.0 - yy / max(height - 1, 1))
    lon = lon0 + 0.5 * xx / max(width - 1, 1)
    return np.stack([elev, lat, lon]).astype(np.float32)


def _periodic_sq(delta: np.ndarray, period: int) -> np.ndarray:
    delta = np.mod(delta + period / 2, period) - period / 2
    return delta * delta


def _fields(params: SynthParams, rng: np.random.Generator, static: np.ndarray) -> np.ndarray:
    h, w = params.height, params.width
    frames = params.t_in + params.t_out
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    n = params.blobs
    centers = np.column_stack([rng.uniform(0, h, n), rng.uniform(0, w, n)])
    angle = rng.uniform(0, 2 * np.pi, n)
    speed = rng.uniform(*params.speed, n)
    vel = np.column_stack([np.sin(angle), np.cos(angle)]) * speed[:, None]
    amp = rng.uniform(0.6, 1.0, n)
    sigma0 = rng.uniform(0.06, 0.14, n) * min(h, w)

    front_angle = rng.uniform(0, 2 * np.pi)
    front_speed = rng.uniform(*params.speed)
    normal = np.array([np.sin(front_angle), np.cos(front_angle)])
    front_pos = rng.uniform(-0.25, 0.25) * min(h, w)
    wave_angle = rng.uniform(0, 2 * np.pi)
    wave_phase = rng.uniform(0, 2 * np.pi)
    wave_speed = rng.uniform(*params.speed)
    wave_dir = np.array([np.sin(wave_angle), np.cos(wave_angle)])
    wavelength = 1.5 * max(h, w)
    elev, lat = static[0].astype(np.float64), static[1].astype(np.float64)

    out = np.empty((4, frames, h, w))
    for t in range(frames):
        dens = np.zeros((h, w))
        for i in range(n):
            var = sigma0[i] ** 2 + 2 * params.diffusion * t
            cy, cx = centers[i] + vel[i] * t
            d2 = _periodic_sq(yy - cy, h) + _periodic_sq(xx - cx, w)
            dens += amp[i] * (sigma0[i] ** 2 / var) * np.exp(-d2 / (2 * var))
        along = (yy - h / 2) * wave_dir[0] + (xx - w / 2) * wave_dir[1] - wave_speed * t
        wave = np.sin(2 * np.pi * along / wavelength + wave_phase)
        temp = 0.35 + 0.35 * (1.0 - lat) - 0.2 * elev + 0.08 * wave - 0.25 * np.minimum(dens, 1.0)
        dist = (yy - h / 2) * normal[0] + (xx - w / 2) * normal[1] - front_pos - front_speed * t
        out[0, t] = np.clip(temp, 0.0, 1.0)
        out[1, t] = np.clip((dens - 0.8) * 0.6, 0.0, 1.0)
        out[2, t] = special.expit(dist / 3.0)
        out[3, t] = special.expit(12.0 * (dens - 0.45))
    return out


def dynamic_fields(observed: np.ndarray) -> np.ndarray:
    """Twelve auxiliary channels derived from the observed targets: blurred and shifted copies."""
    chans = []
    for v in range(observed.shape[0]):
        f = observed[v].astype(np.float64)
        chans.append(ndimage.gaussian_filter(f, sigma=(0, 1.5, 1.5), mode="wrap"))
        chans.append(ndimage.gaussian_filter(f, sigma=(0, 4.0, 4.0), mode="wrap"))
        chans.append(np.roll(f, (2, 2), axis=(1, 2)))
    return np.clip(np.stack(chans), 0.0, 1.0).astype(np.float32)


def generate_sequence(params: SynthParams) -> Sample:
    """One deterministic sample: ``t_in`` observed frames and ``t_out`` continuation frames."""
    params.validate()
    rng = np.random.default_rng(params.seed)
    static = static_fields(params.region, params.height, params.width)
    movie = _fields(params, rng, static).astype(np.float32)
    inputs = np.ascontiguousarray(movie[:, : params.t_in])
    targets = np.ascontiguousarray(movie[:, params.t_in :])
    mask = (rng.random(targets.shape) >= params.missing).astype(np.float32)
    targets = targets * mask
    return Sample(inputs, targets, mask, static, dynamic_fields(inputs))


@dataclass(frozen=True)
class AugmentDraw:
    hflip: bool
    vflip: bool
    quarter_turns: int


def augment_draw(seed: int) -> AugmentDraw:
    rng = np.random.default_rng(seed)
    return AugmentDraw(bool(rng.random() < 0.5), bool(rng.random() < 0.5), int(rng.integers(4)))


def augment(sample: Sample, seed: int, flips: bool = True, rotate: bool = True) -> Sample:
    """Random horizontal/vertical flips and quarter-turn rotation, applied jointly to every field."""
    h, w = sample.grid
    if rotate and h != w:
        raise ConfigError(f"rotation augmentation needs a square grid, got {h}x{w}")
    draw = augment_draw(seed)

    def apply(a: np.ndarray) -> np.ndarray:
        if flips and draw.hflip:
            a = a[..., :, ::-1]
        if flips and draw.vflip:
            a = a[..., ::-1, :]
        if rotate and draw.quarter_turns:
            a = np.rot90(a, draw.quarter_turns, axes=(-2, -1))
        return np.ascontiguousarray(a)

    return Sample(*(apply(a) for a in (sample.inputs, sample.targets, sample.mask, sample.static, sample.dynamic)))


def make_batch(samples: list[Sample], static: bool = False, dynamic: bool = False):
    """Stack samples into ``(inputs, targets, mask)``; channels are targets, static, dynamic."""
    if not samples:
        raise ContractError("cannot build a batch from an empty sample list")
    ref = samples[0]
    for s in samples[1:]:
        for name in ("inputs", "targets", "mask", "static", "dynamic"):
            if getattr(s, name).shape != getattr(ref, name).shape:
                raise DimensionError(f"ragged batch: {name} shape {getattr(s, name).shape} vs {getattr(ref, name).shape}")
    t_in = ref.inputs.shape[1]
    rows = []
    for s in samples:
        parts = [s.inputs]
        if static:
            parts.append(np.repeat(s.static[:, None], t_in, axis=1))
        if dynamic:
            parts.append(s.dynamic)
        rows.append(np.concatenate(parts, axis=0))
    inputs = np.stack(rows).astype(np.float32)
    targets = np.stack([s.targets for s in samples]).astype(np.float32)
    mask = np.stack([s.mask for s in samples]).astype(np.float32)
    return inputs, targets, mask


# ----------------------------------------------------------------- W4CT files

MAGIC = b"W4CT"
VERSION = 1
DTYPE_F32 = 1
_HEADER = struct.Struct("<4sBBI")


def write_tensor(path, x) -> None:
    x = np.asarray(x, dtype="<f4")
    header = _HEADER.pack(MAGIC, VERSION, DTYPE_F32, x.ndim) + struct.pack(f"<{x.ndim}I", *x.shape)
    Path(path).write_bytes(header + x.tobytes())


def read_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        if buf[:4] != MAGIC[: len(buf[:4])]:
            raise FormatError(f"bad magic {buf[:4]!r} at offset 0")
        raise FormatError(f"truncated header: {len(buf)} bytes at offset 0, need {_HEADER.size}")
    magic, version, dtype, ndim = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype} at offset 5")
    offset = _HEADER.size
    if len(buf) < offset + 4 * ndim:
        raise FormatError(f"truncated dims at offset {offset}: need {4 * ndim} bytes, have {len(buf) - offset}")
    dims = struct.unpack_from(f"<{ndim}I", buf, offset)
    offset += 4 * ndim
    expected = 4 * math.prod(dims)
    actual = len(buf) - offset
    if actual != expected:
        raise FormatError(f"payload at offset {offset}: expected {expected} bytes, found {actual}")
    return np.frombuffer(buf, dtype="<f4", offset=offset).reshape(dims).copy()


# ------------------------------------------------------------ dataset layout


def sample_to_array(sample: Sample) -> np.ndarray:
    """Pack a sample as ``[4 + 3 + 12, t_in + t_out, H, W]``; missing target pixels become NaN."""
    t_in, t_out = sample.inputs.shape[1], sample.targets.shape[1]
    h, w = sample.grid
    arr = np.full((len(VARIABLES) + len(STATIC_NAMES) + len(DYNAMIC_NAMES), t_in + t_out, h, w), np.nan, np.float32)
    arr[:4, :t_in] = sample.inputs
    arr[:4, t_in:] = np.where(sample.mask > 0, sample.targets, np.nan)
    arr[4:7] = sample.static[:, None]
    arr[7:, :t_in] = sample.dynamic
    return arr


def array_to_sample(arr: np.ndarray, t_in: int) -> Sample:
    if arr.ndim != 4 or arr.shape[0] != 19 or arr.shape[1] <= t_in:
        raise FormatError(f"sample tensor shape {arr.shape} does not match 19 channels x >{t_in} frames")
    raw = arr[:4, t_in:]
    mask = np.isfinite(raw).astype(np.float32)
    targets = np.where(mask > 0, raw, 0.0).astype(np.float32)
    return Sample(
        np.ascontiguousarray(arr[:4, :t_in]),
        targets,
        mask,
        np.ascontiguousarray(arr[4:7, 0]),
        np.ascontiguousarray(arr[7:, :t_in]),
    )


def write_dataset(directory, splits: dict[str, list[Sample]]) -> Path:
    """One ``sample_<split>_<index>.w4ct`` file per sample plus ``manifest.txt``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    first = next(s for samples in splits.values() for s in samples)
    lines = [
        f"t_in = {first.inputs.shape[1]}",
        f"t_out = {first.targets.shape[1]}",
        "channels = " + ",".join(VARIABLES + STATIC_NAMES + DYNAMIC_NAMES),
    ]
    for split, samples in splits.items():
        for i, s in enumerate(samples):
            name = f"sample_{split}_{i:04d}.w4ct"
            write_tensor(directory / name, sample_to_array(s))
            lines.append(f"file = {name}")
    path = directory / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def read_dataset(directory) -> dict[str, list[Sample]]:
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        raise FormatError(f"no manifest.txt in {directory}")
    t_in = None
    splits: dict[str, list[Sample]] = {}
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep:
            raise FormatError(f"manifest line {lineno}: expected 'key = value'")
        if key == "t_in":
            t_in = int(value)
        elif key == "file":
            if t_in is None:
                raise FormatError("manifest lists files before t_in")
            split = value.split("_")[1]
            splits.setdefault(split, []).append(array_to_sample(read_tensor(directory / value), t_in))
    return splits


def synth_split(base: SynthParams, split: str, count: int, regions: int = 4) -> list[Sample]:
    """``count`` samples whose seeds derive from ``base.seed`` and the split name."""
    tag = sum(ord(ch) << (8 * i) for i, ch in enumerate(split[:8]))
    seeds = np.random.SeedSequence([int(base.seed), tag]).generate_state(count, dtype=np.uint64)
    return [generate_sequence(replace(base, seed=int(s), region=i % regions)) for i, s in enumerate(seeds)]
