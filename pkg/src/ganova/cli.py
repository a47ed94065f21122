"""Command-line entry point.

Subcommands: ``train``, ``generate``, ``sweep``, ``interpolate``, ``eval`` and
``gradcheck``.  Exit codes: 0 success, 1 usage or config error, 2 numerical
abort, 3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import DataError, Dataset, load_mnist, mixture_dataset
from .eval import (
    CalibrationError,
    ConditionalGenerator,
    MlpOracle,
    SweepSpec,
    condition_interpolation,
    condition_sweep,
    conditional_fidelity,
    default_oracle,
    render_grid_pgm,
    train_oracle,
)
from .gradcheck import run_gradcheck
from .nn import ConfigError
from .training import CheckpointError, NonFiniteLossError, TrainConfig, load_checkpoint, train

logger = logging.getLogger("ganova")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ------------------------------------------------------------------ config


def _convert(key: str, raw: str, default):
    kind = type(default)
    try:
        if kind is bool:
            return raw.lower() in ("1", "true", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is list:
            return [int(v) for v in raw.split(",") if v]
    except ValueError:
        raise ConfigError(f"--{key}: cannot parse {raw!r} as {kind.__name__}") from None
    return raw


def parse_overrides(tokens: Sequence[str]) -> dict:
    """``--key value`` / ``--key=value`` pairs, validated against TrainConfig."""
    defaults = TrainConfig().to_dict()
    out = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key, eq, value = tok[2:].partition("=")
        key = key.replace("-", "_")
        if key not in defaults:
            raise ConfigError(f"unknown config key: {key}")
        if not eq:
            if i + 1 >= len(tokens):
                raise UsageError(f"--{key} needs a value")
            i += 1
            value = tokens[i]
        out[key] = _convert(key, value, defaults[key])
        i += 1
    return out


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    unknown = sorted(set(data) - set(TrainConfig.field_names()))
    if unknown:
        raise ConfigError(f"{path}: unknown config key: {', '.join(unknown)}")
    return data


def build_config(config_path: Optional[str], overrides: dict) -> TrainConfig:
    values = load_config_file(config_path) if config_path else {}
    values.update(overrides)
    try:
        return TrainConfig.from_dict(values)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def run_dir(out: str, cfg: TrainConfig) -> Path:
    return Path(out) / f"{cfg.dataset}-{cfg.method}-{cfg.seed}"


def load_dataset(cfg: TrainConfig, split: str = "train") -> Dataset:
    if cfg.dataset == "mixture":
        return mixture_dataset(cfg.n_classes, cfg.per_class, cfg.sigma,
                               np.random.default_rng(cfg.data_seed))
    return load_mnist(cfg.data_dir, split)


# --------------------------------------------------------------- commands


def cmd_train(args, extra) -> int:
    cfg = build_config(args.config, parse_overrides(extra))
    rdir = run_dir(args.out, cfg)
    rdir.mkdir(parents=True, exist_ok=True)
    if cfg.checkpoint is None:
        cfg.checkpoint = str(rdir / "checkpoint.gova")
    if cfg.metrics is None:
        cfg.metrics = str(rdir / "metrics.csv")
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume)
    else:
        Path(cfg.metrics).unlink(missing_ok=True)
    (rdir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    data = load_dataset(cfg)
    try:
        result = train(cfg, data, resume)
    except NonFiniteLossError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    last = result.rows[-1] if result.rows else None
    print(f"trained {result.bundle.iteration} iterations -> {cfg.checkpoint}")
    if last is not None:
        print(f"final d_loss={last.d_loss:.6g} g_loss={last.g_loss:.6g} seconds={last.seconds:.1f}")
    return EXIT_OK


def _load_generator(path: str) -> ConditionalGenerator:
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return ConditionalGenerator.from_bundle(load_checkpoint(path))


def _default_out(checkpoint: str, name: str) -> Path:
    return Path(checkpoint).parent / name


def cmd_generate(args, extra) -> int:
    gen = _load_generator(args.checkpoint)
    if not 0 <= args.cls < gen.n_classes:
        raise DataError(f"class {args.cls} out of range [0, {gen.n_classes})")
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    images = gen.generate(args.cls, args.count, args.seed)
    side = math.ceil(math.sqrt(args.count))
    rows = math.ceil(args.count / side)
    out = args.out or _default_out(args.checkpoint, f"generate-c{args.cls}-n{args.count}-s{args.seed}.pgm")
    print(render_grid_pgm(images, rows, side, out))
    return EXIT_OK


def cmd_sweep(args, extra) -> int:
    gen = _load_generator(args.checkpoint)
    spec = SweepSpec(args.cls, args.min, args.max, args.steps, args.seed)
    images = condition_sweep(gen, spec, gen.n_classes)
    out = args.out or _default_out(args.checkpoint, f"sweep-c{args.cls}-s{args.seed}.pgm")
    print(render_grid_pgm(images, 1, spec.steps, out))
    return EXIT_OK


def cmd_interpolate(args, extra) -> int:
    gen = _load_generator(args.checkpoint)
    images = condition_interpolation(gen, args.class_a, args.class_b, args.steps, args.seed)
    out = args.out or _default_out(args.checkpoint,
                                   f"interpolate-{args.class_a}-{args.class_b}-s{args.seed}.pgm")
    print(render_grid_pgm(images, 1, args.steps, out))
    return EXIT_OK


def cmd_eval(args, extra) -> int:
    if not Path(args.checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    bundle = load_checkpoint(args.checkpoint)
    cfg = bundle.config
    gen = ConditionalGenerator.from_bundle(bundle)
    if cfg.dataset == "mixture":
        ds = load_dataset(cfg)
        oracle = default_oracle(ds)
    else:
        ds = load_mnist(cfg.data_dir, "train")
        if args.oracle and Path(args.oracle).is_file():
            oracle = MlpOracle.load(args.oracle)
        else:
            oracle = train_oracle(ds, load_mnist(cfg.data_dir, "test"), seed=0)
            if args.oracle:
                oracle.save(args.oracle)
    report = conditional_fidelity(gen.sample, ds, args.per_class, np.random.default_rng(args.seed), oracle)
    out = args.out or _default_out(args.checkpoint, "fidelity.csv")
    report.write_csv(out)
    print(f"fidelity={report.fidelity:.4f} -> {out}")
    return EXIT_OK


def cmd_gradcheck(args, extra) -> int:
    results = run_gradcheck(points=args.points, seed=args.seed)
    for r in results:
        print(f"{r.op:24s} worst={r.worst:.3e} tol={r.tol:.0e} {'ok' if r.passed else 'FAIL'}")
    failed = [r.op for r in results if not r.passed]
    if failed:
        print(f"gradcheck failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ganova", description="Conditional GANs with a One-Vs-All discriminator.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model; any TrainConfig key may be passed as --key value")
    t.add_argument("--config", help="flat JSON file of TrainConfig keys")
    t.add_argument("--out", default="runs", help="parent of the run directory")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train, allow_extra=True)

    g = sub.add_parser("generate", help="render samples of one class as a PGM grid")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--class", dest="cls", type=int, required=True)
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("sweep", help="scale one condition code with fixed noise")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--class", dest="cls", type=int, required=True)
    s.add_argument("--min", type=float, default=SweepSpec.code_min)
    s.add_argument("--max", type=float, default=SweepSpec.code_max)
    s.add_argument("--steps", type=int, default=SweepSpec.steps)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    i = sub.add_parser("interpolate", help="blend two condition codes with fixed noise")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--class-a", type=int, required=True)
    i.add_argument("--class-b", type=int, required=True)
    i.add_argument("--steps", type=int, default=10)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out")
    i.set_defaults(func=cmd_interpolate)

    e = sub.add_parser("eval", help="conditional fidelity report as CSV")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--per-class", type=int, default=1000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--oracle", help="MNIST oracle checkpoint; trained and saved here if missing")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every backward rule")
    c.add_argument("--points", type=int, default=10)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if extra and not getattr(args, "allow_extra", False):
            raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
        return args.func(args, extra)
    except (UsageError, ConfigError, CheckpointError, CalibrationError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
