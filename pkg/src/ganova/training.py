"""Adversarial training loop, checkpoint format and metrics logging.

One outer iteration runs ``k`` critic updates, each on a fresh real batch and
fresh noise, followed by a single generator update whose conditions are drawn
from the data's label distribution.  A single ``numpy.random.Generator``
seeded from the config drives init, batching, noise, dropout and the
interpolation draws, so a seed pins down the whole run.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import nn
from .data import BatchIterator, Dataset, NoisePrior, one_hot, sample_conditions, sample_noise
from .nn import AdamConfig, AdamState, ConfigError, MlpSpec
from .objectives import (
    EM,
    JS,
    PenaltyConfig,
    TargetScheme,
    gradient_penalty,
    interpolate_samples,
    loss_acgan,
    loss_acgan_g,
    loss_d_em,
    loss_d_js,
    loss_g_em,
    loss_g_js,
)

logger = logging.getLogger(__name__)

ACGAN = "acgan"
METHODS = (JS, EM, ACGAN)
DEFAULT_K = {JS: 1, EM: 5, ACGAN: 1}
HIDDEN_PRESETS = {
    "mixture": ((128, 128), (128, 128)),
    "mnist": ((256, 512, 1024), (512, 512, 512, 512)),
}
OUT_DIMS = {"mixture": 2, "mnist": 784}
# (generator, critic) Adam step sizes and critic dropout per dataset. On the
# 2-d mixture a slow generator and a fast, noise-free critic keep the
# generator from overshooting the class clusters.
LR_PRESETS = {"mixture": (2e-5, 1e-3), "mnist": (1e-4, 1e-4)}
DROPOUT_PRESETS = {"mixture": 0.0, "mnist": 0.3}

MAGIC = b"GOVA"
FORMAT_VERSION = 1
METRICS_HEADER = ("iter", "d_loss", "g_loss", "w_estimate", "penalty", "seconds")


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN/Inf loss; ``row`` holds the offending metrics."""

    def __init__(self, message: str, row: "MetricsRow"):
        super().__init__(message)
        self.row = row


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class MagicMismatchError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


# --------------------------------------------------------------------- config


@dataclass
class TrainConfig:
    method: str = EM
    dataset: str = "mixture"
    k: int = 0  # 0 selects the method default (1 for js/acgan, 5 for em)
    m: int = 100
    iters: int = 1000
    lam: float = 10.0
    lr_g: float = 0.0  # 0 selects the dataset preset
    beta1_g: float = 0.0
    beta2_g: float = 0.9
    lr_d: float = 0.0
    beta1_d: float = 0.0
    beta2_d: float = 0.9
    adam_eps: float = 1e-8
    noise_dim: int = 100
    n_classes: int = 4
    hidden_g: list = field(default_factory=list)  # empty selects the dataset preset
    hidden_d: list = field(default_factory=list)
    dropout: Optional[float] = None  # None selects the dataset preset
    slope: float = 0.2
    init_std: float = 0.02
    seed: int = 0
    per_class: int = 2500
    sigma: float = 0.05
    data_seed: int = 0
    data_dir: Optional[str] = None
    checkpoint: Optional[str] = None
    metrics: Optional[str] = None
    log_interval: int = 1
    checkpoint_interval: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.dataset not in HIDDEN_PRESETS:
            raise ConfigError(f"dataset must be one of {tuple(HIDDEN_PRESETS)}, got {self.dataset!r}")
        if self.k == 0:
            self.k = DEFAULT_K[self.method]
        if self.lr_g == 0:
            self.lr_g = LR_PRESETS[self.dataset][0]
        if self.lr_d == 0:
            self.lr_d = LR_PRESETS[self.dataset][1]
        self.dropout = float(DROPOUT_PRESETS[self.dataset] if self.dropout is None else self.dropout)
        if not self.hidden_g:
            self.hidden_g = list(HIDDEN_PRESETS[self.dataset][0])
        if not self.hidden_d:
            self.hidden_d = list(HIDDEN_PRESETS[self.dataset][1])
        self.hidden_g = [int(w) for w in self.hidden_g]
        self.hidden_d = [int(w) for w in self.hidden_d]
        for name in ("k", "m", "iters", "noise_dim", "n_classes", "log_interval"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if self.checkpoint_interval < 0:
            raise ConfigError("checkpoint_interval must be >= 0")
        # surface optimizer / network errors at construction time
        self.adam_g, self.adam_d
        self.generator_spec(), self.critic_spec()

    @property
    def adam_g(self) -> AdamConfig:
        return AdamConfig(self.lr_g, self.beta1_g, self.beta2_g, self.adam_eps)

    @property
    def adam_d(self) -> AdamConfig:
        return AdamConfig(self.lr_d, self.beta1_d, self.beta2_d, self.adam_eps)

    @property
    def critic_width(self) -> int:
        return self.n_classes if self.method == EM else self.n_classes + 1

    def generator_spec(self) -> MlpSpec:
        return nn.generator_spec(self.noise_dim, self.n_classes, tuple(self.hidden_g),
                                 OUT_DIMS[self.dataset], self.slope)

    def critic_spec(self) -> MlpSpec:
        return nn.critic_spec(OUT_DIMS[self.dataset], tuple(self.hidden_d), self.critic_width,
                              self.dropout, self.slope)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in dataclasses.fields(cls))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = sorted(set(d) - set(cls.field_names()))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**d)


# ------------------------------------------------------------------- metrics


@dataclass
class MetricsRow:
    iter: int
    d_loss: float
    g_loss: float
    w_estimate: Optional[float]
    penalty: Optional[float]
    seconds: float

    def finite(self) -> bool:
        vals = [self.d_loss, self.g_loss, self.w_estimate, self.penalty]
        return all(math.isfinite(v) for v in vals if v is not None)

    def as_csv(self) -> list[str]:
        def fmt(v):
            return "" if v is None else repr(float(v))

        return [str(self.iter), fmt(self.d_loss), fmt(self.g_loss), fmt(self.w_estimate),
                fmt(self.penalty), f"{self.seconds:.3f}"]


class MetricsWriter:
    """Append-only CSV sink.  The header is written once, for a new file."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not self.path.exists() or self.path.stat().st_size == 0
        self._fh = open(self.path, "a", newline="")
        self._writer = csv.writer(self._fh)
        if fresh:
            self._writer.writerow(METRICS_HEADER)

    def write(self, row: MetricsRow) -> None:
        self._writer.writerow(row.as_csv())

    def flush(self) -> None:
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def read_metrics(path) -> list[MetricsRow]:
    def opt(s):
        return None if s == "" else float(s)

    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {reader.fieldnames}")
        return [MetricsRow(int(r["iter"]), float(r["d_loss"]), float(r["g_loss"]),
                           opt(r["w_estimate"]), opt(r["penalty"]), float(r["seconds"]))
                for r in reader]


# ---------------------------------------------------------------- checkpoints


def write_gova(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    """Binary container: magic, version byte, JSON metadata, tensor table.

    Layout (little-endian)::

        b"GOVA" | u8 version | u32 meta_len | meta (UTF-8 JSON) | u32 count
        count x ( u32 name_len | name | u32 rank | rank x u64 extent | f64 payload )

    Written to a temporary file and renamed, so a crash never leaves a
    partially written checkpoint in place.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<BI", FORMAT_VERSION, len(meta_bytes)), meta_bytes,
              struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode()
        chunks.append(struct.pack(f"<I{len(nb)}sI", len(nb), nb, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(b"".join(chunks))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedCheckpointError(f"{self.path}: unexpected end of file at byte {len(self.raw)}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_gova(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    if len(raw) < len(MAGIC) and MAGIC.startswith(raw):
        raise TruncatedCheckpointError(f"{path}: file ends inside the magic bytes")
    if raw[:len(MAGIC)] != MAGIC:
        raise MagicMismatchError(f"{path}: not a GOVA checkpoint")
    r.take(len(MAGIC))
    (version,) = r.unpack("<B")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    (meta_len,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata ({exc})") from exc
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode()
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q")
        n = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - r.pos} trailing bytes")
    return meta, tensors


@dataclass
class CheckpointBundle:
    config: TrainConfig
    gen: dict
    critic: dict
    adam_g: AdamState
    adam_d: AdamState
    iteration: int
    rng_state: dict
    batch_perm: Optional[np.ndarray] = None
    batch_pos: int = 0

    def rng(self) -> np.random.Generator:
        rng = np.random.default_rng()
        rng.bit_generator.state = self.rng_state
        return rng


def save_checkpoint(bundle: CheckpointBundle, path) -> None:
    tensors: dict[str, np.ndarray] = {}
    for prefix, params in (("gen", bundle.gen), ("critic", bundle.critic)):
        for k, v in params.items():
            tensors[f"{prefix}/{k}"] = v
    for prefix, st in (("adam_g", bundle.adam_g), ("adam_d", bundle.adam_d)):
        for k in st.m:
            tensors[f"{prefix}/m/{k}"] = st.m[k]
            tensors[f"{prefix}/v/{k}"] = st.v[k]
    if bundle.batch_perm is not None:
        tensors["batch/perm"] = bundle.batch_perm.astype(np.float64)
    meta = {
        "kind": "train",
        "config": bundle.config.to_dict(),
        "iteration": bundle.iteration,
        "adam_g_t": bundle.adam_g.t,
        "adam_d_t": bundle.adam_d.t,
        "rng_state": bundle.rng_state,
        "batch_pos": bundle.batch_pos,
    }
    write_gova(path, meta, tensors)


def load_checkpoint(path) -> CheckpointBundle:
    meta, tensors = read_gova(path)
    if meta.get("kind") != "train":
        raise CheckpointError(f"{path}: not a training checkpoint (kind={meta.get('kind')!r})")

    def group(prefix):
        return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

    gen, critic = group("gen/"), group("critic/")
    adam_g = AdamState(group("adam_g/m/"), group("adam_g/v/"), meta["adam_g_t"])
    adam_d = AdamState(group("adam_d/m/"), group("adam_d/v/"), meta["adam_d_t"])
    perm = tensors.get("batch/perm")
    return CheckpointBundle(TrainConfig.from_dict(meta["config"]), gen, critic, adam_g, adam_d,
                            meta["iteration"], meta["rng_state"],
                            None if perm is None else perm.astype(np.int64), meta["batch_pos"])


# ------------------------------------------------------------------ training


@dataclass
class TrainResult:
    bundle: CheckpointBundle
    rows: list[MetricsRow]


class Trainer:
    """Holds the per-run state and runs critic / generator updates."""

    def __init__(self, cfg: TrainConfig, data: Dataset, resume: Optional[CheckpointBundle] = None):
        if data.id != cfg.dataset:
            raise ConfigError(f"config expects dataset {cfg.dataset!r}, got {data.id!r}")
        if data.n_classes != cfg.n_classes:
            raise ConfigError(f"config has n_classes={cfg.n_classes}, dataset has {data.n_classes}")
        self.cfg, self.data = cfg, data
        self.g_spec, self.d_spec = cfg.generator_spec(), cfg.critic_spec()
        if data.dim != self.g_spec.widths[-1]:
            raise ConfigError(f"dataset samples are {data.dim}-dimensional, "
                              f"generator emits {self.g_spec.widths[-1]}")
        self.prior = NoisePrior(cfg.noise_dim)
        self.penalty_cfg = PenaltyConfig(cfg.lam)
        if cfg.method != ACGAN:
            self.scheme = TargetScheme(cfg.method, cfg.n_classes)
        if resume is None:
            self.rng = np.random.default_rng(cfg.seed)
            self.gen = nn.init_params(self.g_spec, self.rng, cfg.init_std)
            self.critic = nn.init_params(self.d_spec, self.rng, cfg.init_std)
            self.adam_g = AdamState.zeros(self.gen)
            self.adam_d = AdamState.zeros(self.critic)
            self.iteration = 0
            self.batches = BatchIterator(data, cfg.m, self.rng)
        else:
            self.rng = resume.rng()
            self.gen, self.critic = dict(resume.gen), dict(resume.critic)
            self.adam_g, self.adam_d = resume.adam_g, resume.adam_d
            self.iteration = resume.iteration
            self.batches = BatchIterator(data, cfg.m, self.rng, resume.batch_perm, resume.batch_pos)

    # -- helpers

    def bundle(self) -> CheckpointBundle:
        return CheckpointBundle(self.cfg, self.gen, self.critic, self.adam_g, self.adam_d,
                                self.iteration, self.rng.bit_generator.state,
                                self.batches.perm, self.batches.pos)

    def _fake(self, labels: np.ndarray, gen_params) -> ad.Tensor:
        z = sample_noise(self.prior, labels.size, self.rng)
        return nn.generator_forward(self.g_spec, gen_params, z, one_hot(labels, self.cfg.n_classes))

    def _critic(self, params, x):
        return nn.critic_forward(self.d_spec, params, x, True, self.rng)

    # -- updates

    def critic_step(self) -> dict[str, float]:
        batch = next(self.batches)
        labels = batch.labels
        x_fake = self._fake(labels, self.gen)
        tape = ad.Tape()
        d = nn.watch_params(self.critic, tape)
        real_out = self._critic(d, batch.samples)
        fake_out = self._critic(d, x_fake)
        out = {}
        if self.cfg.method == EM:
            x_hat = tape.watch(interpolate_samples(batch.samples, x_fake, self.rng))
            pen = gradient_penalty(lambda x: self._critic(d, x), x_hat, labels, self.scheme, tape)
            bundle = loss_d_em(real_out, fake_out, labels, labels, self.scheme, pen, self.penalty_cfg)
            out.update(gap=bundle.diagnostics["gap"], penalty=bundle.diagnostics["penalty"])
        elif self.cfg.method == JS:
            bundle = loss_d_js(real_out, fake_out, labels, labels, self.scheme)
        else:
            w = real_out.shape[1]
            bundle, _ = loss_acgan(ad.slice_cols(real_out, 0, 1), ad.slice_cols(fake_out, 0, 1),
                                   ad.slice_cols(real_out, 1, w), ad.slice_cols(fake_out, 1, w), labels)
        out["loss"] = bundle.value
        if not math.isfinite(out["loss"]):
            return out
        grads = nn.param_grads(ad.backward(bundle.loss, tape), d)
        self.critic, self.adam_d = nn.adam_step(self.critic, grads, self.adam_d, self.cfg.adam_d)
        return out

    def generator_step(self) -> float:
        labels = sample_conditions(self.data, self.cfg.m, self.rng)
        tape = ad.Tape()
        g = nn.watch_params(self.gen, tape)
        x_fake = self._fake(labels, g)
        out = self._critic(self.critic, x_fake)
        if self.cfg.method == EM:
            bundle = loss_g_em(out, labels, self.scheme)
        elif self.cfg.method == JS:
            bundle = loss_g_js(out, labels, self.scheme)
        else:
            w = out.shape[1]
            bundle = loss_acgan_g(ad.slice_cols(out, 0, 1), ad.slice_cols(out, 1, w), labels)
        value = bundle.value
        if math.isfinite(value):
            grads = nn.param_grads(ad.backward(bundle.loss, tape), g)
            self.gen, self.adam_g = nn.adam_step(self.gen, grads, self.adam_g, self.cfg.adam_g)
        return value

    def iterate(self, started: float) -> MetricsRow:
        """One outer iteration: ``k`` critic updates then one generator update."""
        self.iteration += 1
        stats = []
        for _ in range(self.cfg.k):
            s = self.critic_step()
            stats.append(s)
            if not math.isfinite(s["loss"]):
                break
        d_loss = float(np.mean([s["loss"] for s in stats]))
        g_loss = self.generator_step() if math.isfinite(d_loss) else float("nan")
        is_em = self.cfg.method == EM
        return MetricsRow(
            self.iteration, d_loss, g_loss,
            float(np.mean([s["gap"] for s in stats])) if is_em else None,
            float(np.mean([s["penalty"] for s in stats])) if is_em else None,
            time.perf_counter() - started,
        )


def train(cfg: TrainConfig, data: Dataset, resume: Optional[CheckpointBundle] = None,
          on_row: Optional[Callable[[MetricsRow], None]] = None) -> TrainResult:
    """Run until ``cfg.iters`` outer iterations have completed.

    With ``resume`` the run continues from the checkpointed iteration and
    reproduces the uninterrupted run exactly.  A non-finite loss raises
    :class:`NonFiniteLossError` before any update is applied and before any
    checkpoint is overwritten.
    """
    trainer = Trainer(cfg, data, resume)
    writer = MetricsWriter(cfg.metrics) if cfg.metrics else None
    rows: list[MetricsRow] = []
    started = time.perf_counter()
    try:
        while trainer.iteration < cfg.iters:
            row = trainer.iterate(started)
            if not row.finite():
                logger.error("non-finite loss at iteration %d: %s", row.iter, row)
                raise NonFiniteLossError(f"non-finite loss at iteration {row.iter}", row)
            if row.iter % cfg.log_interval == 0 or row.iter == cfg.iters:
                rows.append(row)
                if writer:
                    writer.write(row)
                if on_row:
                    on_row(row)
            if cfg.checkpoint and cfg.checkpoint_interval and row.iter % cfg.checkpoint_interval == 0:
                if writer:
                    writer.flush()
                save_checkpoint(trainer.bundle(), cfg.checkpoint)
    finally:
        if writer:
            writer.close()
    bundle = trainer.bundle()
    if cfg.checkpoint:
        save_checkpoint(bundle, cfg.checkpoint)
    return TrainResult(bundle, rows)
