"""Evaluation: Wasserstein curves, oracle fidelity, condition-code probes, PGM grids."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .data import BatchIterator, DataError, Dataset, NoisePrior, one_hot, sample_noise
from .nn import AdamConfig, AdamState, MlpSpec
from .training import CheckpointBundle, MetricsRow, read_gova, write_gova

ORACLE_VERSION = 1
ORACLE_FLOOR = 0.97


class InapplicableMetricError(ValueError):
    """The requested metric does not exist for this run (e.g. W-estimate of a JS run)."""


class CalibrationError(RuntimeError):
    """The oracle classifier is not accurate enough to be trusted."""


# ------------------------------------------------------------ W-estimate


def moving_average(series: Sequence[float], window: int) -> np.ndarray:
    """Trailing mean over ``window`` points, using the partial window at the start.

    A window longer than the series collapses to one full-series mean.
    """
    x = np.asarray(series, dtype=np.float64)
    if window < 1:
        raise ValueError("window must be >= 1")
    if window > x.size:
        return np.array([x.mean()])
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, x.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


@dataclass
class WassersteinCurve:
    iters: np.ndarray
    raw: np.ndarray
    smoothed: np.ndarray
    window: int


def wasserstein_estimate(rows: Sequence[MetricsRow], window: Optional[int] = None) -> WassersteinCurve:
    """Raw critic-gap series plus its moving average (window: 1% of the run, at least 10)."""
    if not rows:
        raise InapplicableMetricError("no metrics rows")
    if any(r.w_estimate is None for r in rows):
        raise InapplicableMetricError("metrics carry no Wasserstein estimate (not an EM run)")
    raw = np.array([r.w_estimate for r in rows], dtype=np.float64)
    if window is None:
        window = max(10, len(rows) // 100)
    return WassersteinCurve(np.array([r.iter for r in rows]), raw, moving_average(raw, window), window)


# -------------------------------------------------------------- generators


class ConditionalGenerator:
    """Trained ``G(z | c)`` wrapper.

    ``__call__`` evaluates one row at a time so that a given (z, c) pair
    produces bit-identical output regardless of what it is batched with.
    """

    def __init__(self, spec: MlpSpec, params: dict, noise_dim: int, n_classes: int):
        self.spec, self.params = spec, params
        self.noise_dim, self.n_classes = noise_dim, n_classes
        self.prior = NoisePrior(noise_dim)

    @classmethod
    def from_bundle(cls, bundle: CheckpointBundle) -> "ConditionalGenerator":
        cfg = bundle.config
        return cls(cfg.generator_spec(), bundle.gen, cfg.noise_dim, cfg.n_classes)

    def __call__(self, z: np.ndarray, cond: np.ndarray) -> np.ndarray:
        z, cond = np.atleast_2d(z), np.atleast_2d(cond)
        rows = [nn.generator_forward(self.spec, self.params, z[i:i + 1], cond[i:i + 1]).values
                for i in range(z.shape[0])]
        return np.concatenate(rows, axis=0)

    def noise(self, count: int, seed: int) -> np.ndarray:
        return sample_noise(self.prior, count, np.random.default_rng(seed)).values

    def generate(self, label: int, count: int, seed: int) -> np.ndarray:
        """``count`` samples of one class from a seeded noise draw."""
        if not 0 <= label < self.n_classes:
            raise DataError(f"class {label} out of range [0, {self.n_classes})")
        return self(self.noise(count, seed), one_hot(np.full(count, label), self.n_classes).values)

    def sample(self, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Batched sampling; fast, but not batch-composition invariant."""
        z = sample_noise(self.prior, len(labels), rng)
        return nn.generator_forward(self.spec, self.params, z, one_hot(labels, self.n_classes)).values


# ----------------------------------------------------------------- oracles


class Oracle(Protocol):
    accuracy: float
    floor: float

    def classify(self, x: np.ndarray) -> np.ndarray: ...


class NearestMeanOracle:
    """Assigns each point to the closest class centre; calibrated on real data."""

    def __init__(self, centers: np.ndarray, calibration: Optional[Dataset] = None,
                 floor: float = ORACLE_FLOOR):
        self.centers = np.asarray(centers, dtype=np.float64)
        self.floor = floor
        self.accuracy = 1.0
        if calibration is not None:
            self.accuracy = float(np.mean(self.classify(calibration.samples) == calibration.labels))

    def classify(self, x: np.ndarray) -> np.ndarray:
        d = ((np.asarray(x)[:, None, :] - self.centers[None]) ** 2).sum(axis=-1)
        return d.argmin(axis=1)


class MlpOracle:
    """Small MLP classifier used to judge generated images."""

    def __init__(self, spec: MlpSpec, params: dict, accuracy: float, floor: float = ORACLE_FLOOR):
        self.spec, self.params = spec, params
        self.accuracy, self.floor = accuracy, floor

    def logits(self, x: np.ndarray) -> np.ndarray:
        return nn.mlp_forward(self.spec, self.params, ad.Tensor(x)).values

    def classify(self, x: np.ndarray, chunk: int = 2000) -> np.ndarray:
        x = np.asarray(x)
        return np.concatenate([self.logits(x[i:i + chunk]).argmax(axis=1)
                               for i in range(0, x.shape[0], chunk)])

    def save(self, path) -> None:
        meta = {"kind": "oracle", "oracle_version": ORACLE_VERSION, "accuracy": self.accuracy,
                "floor": self.floor, "widths": list(self.spec.widths),
                "activations": list(self.spec.activations), "slope": self.spec.slope}
        write_gova(path, meta, self.params)

    @classmethod
    def load(cls, path) -> "MlpOracle":
        meta, tensors = read_gova(path)
        if meta.get("kind") != "oracle" or meta.get("oracle_version") != ORACLE_VERSION:
            raise CalibrationError(f"{path}: not a version-{ORACLE_VERSION} oracle checkpoint")
        spec = MlpSpec(tuple(meta["widths"]), tuple(meta["activations"]), slope=meta["slope"])
        return cls(spec, tensors, meta["accuracy"], meta["floor"])


def train_oracle(train_ds: Dataset, test_ds: Dataset, seed: int = 0, hidden: tuple[int, ...] = (256,),
                 epochs: int = 3, m: int = 100, lr: float = 1e-3) -> MlpOracle:
    """Fit an MLP classifier on ``train_ds``; its accuracy is measured on ``test_ds``."""
    rng = np.random.default_rng(seed)
    spec = nn.MlpSpec((train_ds.dim, *hidden, train_ds.n_classes),
                      ("leaky_relu",) * len(hidden) + ("none",))
    params = nn.init_params(spec, rng, std=math.sqrt(1.0 / train_ds.dim))
    state, cfg = AdamState.zeros(params), AdamConfig(lr, 0.9, 0.999)
    batches = BatchIterator(train_ds, m, rng)
    for _ in range(epochs):
        for batch in batches.epoch():
            tape = ad.Tape()
            p = nn.watch_params(params, tape)
            logits = nn.mlp_forward(spec, p, batch.samples)
            loss = ad.mean(ad.softmax_cross_entropy(logits, one_hot(batch.labels, train_ds.n_classes)))
            grads = nn.param_grads(ad.backward(loss, tape), p)
            params, state = nn.adam_step(params, grads, state, cfg)
    oracle = MlpOracle(spec, params, 0.0)
    oracle.accuracy = float(np.mean(oracle.classify(test_ds.samples) == test_ds.labels))
    return oracle


def default_oracle(ds: Dataset):
    if ds.centers is None:
        raise CalibrationError(f"dataset {ds.id!r} has no known class centres; supply a trained oracle")
    return NearestMeanOracle(ds.centers, ds)


# ---------------------------------------------------------------- fidelity


@dataclass
class FidelityReport:
    requested: np.ndarray
    matched: np.ndarray
    mean_error: np.ndarray

    @property
    def fidelity(self) -> float:
        return float(self.matched.sum() / self.requested.sum())

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(("class", "requested", "matched", "mean_error"))
            for c in range(self.requested.size):
                w.writerow((c, int(self.requested[c]), int(self.matched[c]), repr(float(self.mean_error[c]))))


def conditional_fidelity(gen: Callable[[np.ndarray, np.random.Generator], np.ndarray], ds_meta: Dataset,
                         per_class: int, rng: np.random.Generator,
                         oracle: Optional[Oracle] = None) -> FidelityReport:
    """Ask ``gen`` for ``per_class`` samples of every class and score them with the oracle.

    ``gen(labels, rng)`` must return one sample per requested label.
    ``mean_error[c]`` is the distance between the mean generated sample of
    class ``c`` and that class's real mean.
    """
    oracle = oracle if oracle is not None else default_oracle(ds_meta)
    if oracle.accuracy < oracle.floor:
        raise CalibrationError(f"oracle accuracy {oracle.accuracy:.4f} is below its floor {oracle.floor}")
    n = ds_meta.n_classes
    means = ds_meta.class_means()
    requested = np.full(n, per_class, dtype=np.int64)
    matched = np.zeros(n, dtype=np.int64)
    err = np.zeros(n)
    for c in range(n):
        x = np.asarray(gen(np.full(per_class, c), rng))
        matched[c] = int(np.sum(oracle.classify(x) == c))
        err[c] = float(np.linalg.norm(x.mean(axis=0) - means[c]))
    return FidelityReport(requested, matched, err)


# --------------------------------------------------- condition-code probes


@dataclass(frozen=True)
class SweepSpec:
    class_index: int
    code_min: float = 0.5
    code_max: float = 1.85
    steps: int = 10
    seed: int = 0

    def __post_init__(self):
        if not self.code_min < self.code_max:
            raise ValueError(f"sweep needs code_min < code_max, got {self.code_min}, {self.code_max}")
        if self.steps < 2:
            raise ValueError(f"sweep needs at least 2 steps, got {self.steps}")


def sweep_codes(spec: SweepSpec, n_classes: int) -> np.ndarray:
    if not 0 <= spec.class_index < n_classes:
        raise DataError(f"class {spec.class_index} out of range [0, {n_classes})")
    values = np.linspace(spec.code_min, spec.code_max, spec.steps)
    return values[:, None] * np.eye(n_classes)[spec.class_index][None, :]


def condition_sweep(gen: ConditionalGenerator, spec: SweepSpec, n_classes: int) -> np.ndarray:
    """Scale one class's code from ``code_min`` to ``code_max``; noise stays fixed."""
    cond = sweep_codes(spec, n_classes)
    z = np.repeat(gen.noise(1, spec.seed), spec.steps, axis=0)
    return gen(z, cond)


def interpolation_codes(class_a: int, class_b: int, steps: int, n_classes: int) -> np.ndarray:
    if class_a == class_b:
        raise ValueError("interpolation needs two different classes")
    if steps < 2:
        raise ValueError(f"interpolation needs at least 2 steps, got {steps}")
    for c in (class_a, class_b):
        if not 0 <= c < n_classes:
            raise DataError(f"class {c} out of range [0, {n_classes})")
    t = np.linspace(0.0, 1.0, steps)[:, None]
    eye = np.eye(n_classes)
    return (1.0 - t) * eye[class_a] + t * eye[class_b]


def condition_interpolation(gen: ConditionalGenerator, class_a: int, class_b: int, steps: int,
                            seed: int) -> np.ndarray:
    """Blend the codes of two classes, ``(1 - t) a + t b`` for t in [0, 1], fixed noise."""
    cond = interpolation_codes(class_a, class_b, steps, gen.n_classes)
    z = np.repeat(gen.noise(1, seed), steps, axis=0)
    return gen(z, cond)


# -------------------------------------------------------------------- PGM


SCATTER_SIZE = 64
GUTTER = 2


def _to_pixels(v: np.ndarray) -> np.ndarray:
    return np.clip(np.floor((np.asarray(v) + 1.0) * 127.5 + 0.5), 0, 255).astype(np.uint8)


def _scatter_cell(point: np.ndarray) -> np.ndarray:
    cell = np.zeros((SCATTER_SIZE, SCATTER_SIZE), dtype=np.uint8)
    col = int(np.clip(np.round((point[0] + 1.0) / 2.0 * (SCATTER_SIZE - 1)), 0, SCATTER_SIZE - 1))
    row = int(np.clip(np.round((1.0 - point[1]) / 2.0 * (SCATTER_SIZE - 1)), 0, SCATTER_SIZE - 1))
    cell[max(row - 1, 0):row + 2, max(col - 1, 0):col + 2] = 255
    return cell


def grid_image(images: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Tile images into a uint8 canvas with white gutters between cells."""
    images = np.atleast_2d(np.asarray(images, dtype=np.float64))
    n, d = images.shape
    if n > rows * cols:
        raise ValueError(f"{n} images do not fit a {rows}x{cols} grid")
    if d == 784:
        cells = [_to_pixels(im.reshape(28, 28)) for im in images]
        size = 28
    elif d == 2:
        cells = [_scatter_cell(p) for p in images]
        size = SCATTER_SIZE
    else:
        raise ValueError(f"can only render 784-pixel images or 2-D points, got width {d}")
    h = rows * size + (rows - 1) * GUTTER
    w = cols * size + (cols - 1) * GUTTER
    canvas = np.full((h, w), 255, dtype=np.uint8)
    for i in range(rows * cols):
        r, c = divmod(i, cols)
        y, x = r * (size + GUTTER), c * (size + GUTTER)
        canvas[y:y + size, x:x + size] = cells[i] if i < n else 0
    return canvas


def render_grid_pgm(images: np.ndarray, rows: int, cols: int, path) -> Path:
    """Write a binary (P5) PGM grid of the images."""
    canvas = grid_image(images, rows, cols)
    path = Path(path)
    h, w = canvas.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(canvas.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, w, h, maxval, _ = raw.split(maxsplit=4)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(w), int(h)
    return np.frombuffer(raw[len(raw) - w * h:], dtype=np.uint8).reshape(h, w)
