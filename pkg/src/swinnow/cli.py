"""Command-line entry point: ``swinnow {gen,train,eval,gradcheck,bench,params}``.

Settings come from an optional ``key = value`` file, then ``--set key=value``
pairs and the dedicated flags, then the ``SWINNOW_SEED`` environment variable.
Keys are field names of the model, data or run configuration; ``t_in`` and
``t_out`` apply to both model and data.  ``version = v0..v8`` starts from one
of the named model variants instead of the desk recipe.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .data import SynthParams, synth_split, write_dataset
from .errors import ConfigError, FormatError, SwinNowError
from .model import VERSIONS, ModelConfig, count_params
from .train import DESK, RunConfig

log = logging.getLogger("swinnow")

SEED_ENV = "SWINNOW_SEED"
_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}
_DATA_KEYS = {f.name for f in dataclasses.fields(SynthParams)}
_RUN_KEYS = {f.name for f in dataclasses.fields(RunConfig)} - {"model", "data"}


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        out[key.strip()] = value.strip()
    return out


def parse_pairs(pairs) -> dict[str, str]:
    out = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        out[key.strip()] = value.strip()
    return out


def _scalar(text: str):
    low = text.lower()
    if low in ("none", ""):
        return None
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


def coerce(key: str, text: str, current):
    """Convert ``text`` to the type of ``current`` (the field's present value)."""
    if "," in text or isinstance(current, tuple):
        parts = [_scalar(p.strip()) for p in text.split(",") if p.strip()]
        return tuple(parts)
    value = _scalar(text)
    if current is None or value is None:
        return value
    try:
        if isinstance(current, bool):
            if not isinstance(value, bool):
                raise ValueError
            return value
        if isinstance(current, (int, float)) and isinstance(value, bool):
            raise ValueError
        return type(current)(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key} = {text!r}: expected a {type(current).__name__}") from None


def build_run(settings: dict[str, str], base: RunConfig = DESK) -> RunConfig:
    """Apply string settings on top of ``base``; unknown keys are a config error."""
    settings = dict(settings)
    model, data, run = base.model, base.data, {}
    version = settings.pop("version", None)
    if version is not None:
        if version not in VERSIONS:
            raise ConfigError(f"unknown version {version!r}; choose from {', '.join(sorted(VERSIONS))}")
        model = VERSIONS[version]
        data = dataclasses.replace(data, t_in=model.t_in, t_out=model.t_out)
    model_kw, data_kw = {}, {}
    for key, text in settings.items():
        known = False
        if key in _MODEL_KEYS:
            model_kw[key] = coerce(key, text, getattr(model, key))
            known = True
        if key in _DATA_KEYS and key != "seed":
            data_kw[key] = coerce(key, text, getattr(data, key))
            known = True
        if key in _RUN_KEYS:
            run[key] = coerce(key, text, getattr(base, key))
            known = True
        if not known:
            raise ConfigError(f"unknown setting {key!r}")
    try:
        model = dataclasses.replace(model, **model_kw)
        data = dataclasses.replace(data, **data_kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return dataclasses.replace(base, model=model, data=data, **run)


def resolve(args) -> RunConfig:
    settings = read_config_file(args.config) if args.config else {}
    settings.update(parse_pairs(args.set))
    for flag in ("epochs", "lr", "seed", "out_dir", "dataset", "n_train", "n_val", "batch_size"):
        value = getattr(args, flag, None)
        if value is not None:
            settings[flag] = str(value)
    if os.environ.get(SEED_ENV):
        settings["seed"] = os.environ[SEED_ENV]
    run = build_run(settings)
    run.validate()
    return run


# --------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    run = resolve(args)
    base = dataclasses.replace(run.data, seed=run.model.seed)
    splits = {
        "train": synth_split(base, "train", run.n_train, run.regions),
        "val": synth_split(base, "val", run.n_val, run.regions),
    }
    manifest = write_dataset(args.out, splits)
    print(f"wrote {run.n_train} train and {run.n_val} val samples; manifest {manifest}")
    return 0


def cmd_train(args) -> int:
    from .train import train

    run = resolve(args)
    if not run.out_dir:
        raise ConfigError("train needs an output directory (--out or out_dir = ...)")
    _, state, history = train(run, on_epoch=lambda e: print(json.dumps(e), flush=True))
    last = history[-1]
    print(f"best val {state.best:.4f}, persistence {last['persistence_score']:.4f}; checkpoint {run.out_dir}/best.swnc")
    return 0


def cmd_eval(args) -> int:
    from .data import read_dataset
    from .train import evaluate_checkpoint

    run = resolve(args)
    if run.dataset:
        samples = read_dataset(run.dataset).get(args.split, [])
    else:
        base = dataclasses.replace(run.data, seed=run.model.seed)
        samples = synth_split(base, args.split, run.n_val if args.split == "val" else run.n_train, run.regions)
    if not samples:
        raise FormatError(f"no samples in split {args.split!r}")
    report = evaluate_checkpoint(args.checkpoint, run.model, samples, run.batch_size)
    print(json.dumps(report, indent=2))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(args.seed, log=print)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 4 if failed else 0


def cmd_bench(args) -> int:
    from .train import bench_attention

    kw = {"repeats": args.repeats}
    if args.windowed:
        kw["windowed_tokens"] = tuple(args.windowed)
    if args.global_tokens:
        kw["global_tokens"] = tuple(args.global_tokens)
    result = bench_attention(**kw)
    for key, row in result.items():
        cells = ", ".join(f"{n}: {t * 1e3:.1f} ms" for n, t in zip(row["tokens"], row["seconds"]))
        print(f"{key:8s} slope {row['slope']:.2f}  ({cells})")
    return 0


def cmd_params(args) -> int:
    if args.all:
        for tag, cfg in VERSIONS.items():
            print(f"{tag}  {count_params(cfg):>10,d}")
        return 0
    run = resolve(args)
    print(count_params(run.model))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="swinnow", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("-c", "--config", help="plain-text 'key = value' settings file")
        p.add_argument("-s", "--set", action="append", metavar="KEY=VALUE", help="override one setting")
        p.add_argument("--seed", type=int)
        return p

    p = with_config(sub.add_parser("gen", help="write a synthetic dataset directory"))
    p.add_argument("out", help="output directory")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)
    p.set_defaults(func=cmd_gen)

    p = with_config(sub.add_parser("train", help="train a model and keep the best checkpoint"))
    p.add_argument("--out", dest="out_dir", help="output directory for metrics.jsonl and best.swnc")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--dataset", help="dataset directory written by 'gen' (default: synthesize in memory)")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)
    p.add_argument("--batch-size", type=int)
    p.set_defaults(func=cmd_train)

    p = with_config(sub.add_parser("eval", help="score a checkpoint against persistence"))
    p.add_argument("checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--split", default="val", choices=("train", "val"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="run the 64-bit gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="time windowed vs global attention")
    p.add_argument("--windowed", type=int, nargs="+", metavar="N", help="token counts for the windowed path")
    p.add_argument("--global", dest="global_tokens", type=int, nargs="+", metavar="N",
                   help="token counts for the global path")
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(func=cmd_bench)

    p = with_config(sub.add_parser("params", help="print the parameter count of a configuration"))
    p.add_argument("--all", action="store_true", help="list every named variant")
    p.set_defaults(func=cmd_params)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except SwinNowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc.filename}: no such file", file=sys.stderr)
        return FormatError.exit_code


if __name__ == "__main__":
    sys.exit(main())
