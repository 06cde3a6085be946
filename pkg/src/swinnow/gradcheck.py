"""The 64-bit gradient suite behind ``swinnow gradcheck``.

Every differentiable primitive is compared against central differences, then
the composite modules, then a small end-to-end model on sampled parameters.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import DecoderBlock, EncoderBlock, WindowAttention, WindowSpec, wmca
from .metric import score
from .model import MICRO, build
from .patches import PatchEmbed, PatchMerge, PatchSpec, ProjectionHead

PRIMITIVE_TOL = 1e-5
MODEL_TOL = 1e-4
MODEL_SAMPLES = 10


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance

    def line(self) -> str:
        verdict = "ok" if self.passed else "FAIL"
        return f"{verdict:4s} {self.name:28s} max rel err {self.error:.2e} (tol {self.tolerance:.0e}, {self.seconds:.1f}s)"


def _randomize(module, rng, std=0.3):
    for p in module.param_store().values():
        p.data = p.data + std * rng.standard_normal(p.shape)
    return module


def _projected(fn, rng):
    """Wrap ``fn`` as ``sum(fn() * w)`` with a fixed random ``w`` drawn on first call."""
    cache = {}

    def f():
        y = fn()
        if "w" not in cache:
            cache["w"] = T.Tensor(rng.standard_normal(y.shape))
        return T.tsum(y * cache["w"])

    return f


def primitive_checks(seed: int = 0) -> dict[str, tuple[Callable[[], T.Tensor], list[T.Tensor]]]:
    rng = np.random.default_rng(seed)

    def p(*shape):
        return T.parameter(rng.standard_normal(shape))

    x = p(2, 3, 4)
    a, b = p(2, 3, 4), p(3, 4)
    m = p(2, 4, 3)
    w, c = p(4, 5), p(5)
    g, beta = T.parameter(1 + 0.1 * rng.standard_normal(4)), p(4)
    rows = np.array([[0, 1, 1], [5, 0, 2]])
    unary = {
        "gelu": T.gelu,
        "sigmoid": T.sigmoid,
        "softmax": T.softmax,
        "square": T.square,
        "scale": lambda t: T.scale(t, -1.7),
        "permute": lambda t: t.permute(2, 0, 1),
        "reshape": lambda t: t.reshape(-1, 2),
        "roll": lambda t: T.roll(t, (1, -1), (0, 2)),
        "pad_high": lambda t: T.pad_high(t, (1, 0, 2)),
        "crop": lambda t: t[1:, :, ::2],
        "mean": lambda t: T.mean(t, axis=(0, 2)),
        "sum": lambda t: T.tsum(t, axis=1, keepdims=True),
        "take_rows": lambda t: T.take_rows(t.reshape(-1, 2), rows),
    }
    checks = {name: (_projected(lambda fn=fn: fn(x), rng), [x]) for name, fn in unary.items()}
    checks["add_sub"] = (_projected(lambda: (a + b) - b * 0.5, rng), [a, b])
    checks["mul"] = (_projected(lambda: a * b * a, rng), [a, b])
    checks["matmul"] = (_projected(lambda: a @ m, rng), [a, m])
    checks["linear"] = (_projected(lambda: T.linear(a, w, c), rng), [a, w, c])
    checks["layer_norm"] = (_projected(lambda: T.layer_norm(a, g, beta), rng), [a, g, beta])
    return checks


def _live(store) -> list[T.Tensor]:
    # a key bias adds the same logit to every key of a query, so its exact
    # gradient is zero and central differences only measure roundoff there
    return [p for name, p in store.items() if not name.endswith("k.bias")]


def module_checks(seed: int = 0) -> dict[str, tuple[Callable[[], T.Tensor], object]]:
    rng = np.random.default_rng(seed)
    spec = WindowSpec((1, 3, 3), (0, 1, 1))
    x = T.Tensor(rng.standard_normal((1, 1, 4, 5, 4)))
    skip = T.Tensor(rng.standard_normal((1, 1, 4, 5, 4)))
    enc = _randomize(EncoderBlock(4, 2, spec), rng)
    dec = _randomize(DecoderBlock(4, 2, spec), rng)
    attn = _randomize(WindowAttention(4, 2, spec), rng)
    emb = _randomize(PatchEmbed(2, PatchSpec((1, 2, 2), 4)), rng)
    merge = _randomize(PatchMerge(4), rng)
    head = _randomize(ProjectionHead(4, PatchSpec((1, 2, 2), 4), 2, 2), rng)
    frames = T.Tensor(rng.random((1, 2, 1, 6, 5)))
    pred = T.parameter(rng.random((2, 4, 2, 3, 3)))
    target = rng.random((2, 4, 2, 3, 3))
    mask = (rng.random(target.shape) > 0.3).astype(float)
    mask[:, :, 0, 0, 0] = 1.0
    return {
        "encoder_block": (_projected(lambda: enc(x), rng), _live(enc.param_store())),
        "decoder_block": (_projected(lambda: dec(x, skip), rng), _live(dec.param_store())),
        "shifted_cross_attention": (_projected(lambda: wmca(x, skip, attn, True), rng), _live(attn.param_store())),
        "patch_embed": (_projected(lambda: emb(frames), rng), emb.param_store()),
        "patch_merge": (_projected(lambda: merge(x), rng), merge.param_store()),
        "projection_head": (_projected(lambda: head(x, 7, 9), rng), head.param_store()),
        "metric": (lambda: score(pred, target, mask), [pred]),
    }


def run_suite(seed: int = 0, log: Callable[[str], None] | None = None) -> list[CheckResult]:
    """Run every check at 64-bit and return one result per check."""
    results = []

    def record(name, f, params, tol, **kw):
        start = time.perf_counter()
        err = T.grad_check(f, params, **kw)
        results.append(CheckResult(name, err, tol, time.perf_counter() - start))
        if log:
            log(results[-1].line())

    with T.precision(np.float64):
        for name, (f, params) in primitive_checks(seed).items():
            record(f"primitive/{name}", f, params, PRIMITIVE_TOL, eps=1e-5)
        for name, (f, params) in module_checks(seed).items():
            # composite outputs sit far from zero, so a wider step keeps roundoff below tolerance
            record(f"module/{name}", f, params, PRIMITIVE_TOL, eps=1e-4, samples=80, seed=seed)

        rng = np.random.default_rng(seed)
        model = _randomize(build(MICRO), rng, std=0.2)
        frames = rng.random((1, MICRO.in_channels, MICRO.t_in, 32, 32))
        f = _projected(lambda: T.scale(model(frames), 1.0 / (4 * MICRO.t_out * 32 * 32)), rng)
        record("model/micro", f, model.param_store(), MODEL_TOL, eps=1e-4, samples=MODEL_SAMPLES, seed=seed)
    return results
