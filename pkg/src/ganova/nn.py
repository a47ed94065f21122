"""MLP generator and One-Vs-All critic, weight init, and Adam."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor

ACTIVATIONS = ("leaky_relu", "tanh", "none")

# Ordered name -> array mapping: weight_0, bias_0, weight_1, ...
MlpParams = dict


class ConfigError(ValueError):
    """A network or optimizer configuration is invalid."""


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths ``(in, h1, ..., out)`` and what follows each affine layer.

    ``activations[i]`` and ``dropout[i]`` apply to the output of layer ``i``;
    both have ``len(widths) - 1`` entries.
    """

    widths: tuple[int, ...]
    activations: tuple[str, ...]
    dropout: tuple[float, ...] = ()
    slope: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "activations", tuple(self.activations))
        n = len(self.widths) - 1
        if not self.dropout:
            object.__setattr__(self, "dropout", (0.0,) * max(n, 0))
        else:
            object.__setattr__(self, "dropout", tuple(float(r) for r in self.dropout))
        if n < 1:
            raise ConfigError("an MLP needs at least an input and an output width")
        if any(w <= 0 for w in self.widths):
            raise ConfigError(f"widths must be positive, got {self.widths}")
        if len(self.activations) != n or len(self.dropout) != n:
            raise ConfigError(f"expected {n} activations and dropout rates")
        bad = [a for a in self.activations if a not in ACTIVATIONS]
        if bad:
            raise ConfigError(f"unknown activation(s) {bad}; choose from {ACTIVATIONS}")
        if not 0.0 < self.slope < 1.0:
            raise ConfigError(f"leaky slope must lie in (0, 1), got {self.slope}")
        if any(not 0.0 <= r < 1.0 for r in self.dropout):
            raise ConfigError(f"dropout rates must lie in [0, 1), got {self.dropout}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def n_params(self) -> int:
        return int(np.sum([(a + 1) * b for a, b in zip(self.widths[:-1], self.widths[1:])]))


def generator_spec(noise_dim: int, n_classes: int, hidden: tuple[int, ...], out_dim: int,
                   slope: float = 0.2) -> MlpSpec:
    """LeakyReLU hidden layers, tanh output; input is noise ++ condition."""
    widths = (noise_dim + n_classes, *hidden, out_dim)
    acts = ("leaky_relu",) * len(hidden) + ("tanh",)
    return MlpSpec(widths, acts, slope=slope)


def critic_spec(in_dim: int, hidden: tuple[int, ...], n_out: int, dropout: float = 0.3,
                slope: float = 0.2) -> MlpSpec:
    """LeakyReLU + dropout hidden layers and a raw linear score head."""
    widths = (in_dim, *hidden, n_out)
    acts = ("leaky_relu",) * len(hidden) + ("none",)
    rates = (dropout,) * len(hidden) + (0.0,)
    return MlpSpec(widths, acts, rates, slope)


def mnist_generator_spec(noise_dim: int = 100, n_classes: int = 10) -> MlpSpec:
    return generator_spec(noise_dim, n_classes, (256, 512, 1024), 784)


def mnist_critic_spec(n_out: int, dropout: float = 0.3) -> MlpSpec:
    return critic_spec(784, (512, 512, 512, 512), n_out, dropout)


def init_params(spec: MlpSpec, rng: np.random.Generator, std: float = 0.02) -> MlpParams:
    """Weights from N(0, std^2), biases zero."""
    params: MlpParams = {}
    for i, (a, b) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        params[f"weight_{i}"] = rng.normal(0.0, std, size=(a, b))
        params[f"bias_{i}"] = np.zeros(b)
    return params


def watch_params(params: Mapping[str, np.ndarray], tape: ad.Tape) -> dict[str, Tensor]:
    return {name: tape.watch(v) for name, v in params.items()}


def const_params(params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {name: Tensor(v) for name, v in params.items()}


def _as_tensors(params: Mapping[str, Union[np.ndarray, Tensor]]) -> Mapping[str, Tensor]:
    return {k: ad.as_tensor(v) for k, v in params.items()}


def mlp_forward(spec: MlpSpec, params: Mapping[str, Union[np.ndarray, Tensor]], x: Tensor,
                training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
    if x.ndim != 2 or x.shape[1] != spec.widths[0]:
        raise DimensionError(f"network expects input width {spec.widths[0]}, got shape {x.shape}")
    p = _as_tensors(params)
    h = x
    for i in range(spec.n_layers):
        h = ad.add_bias(ad.matmul(h, p[f"weight_{i}"]), p[f"bias_{i}"])
        act = spec.activations[i]
        if act == "leaky_relu":
            h = ad.leaky_relu(h, spec.slope)
        elif act == "tanh":
            h = ad.tanh(h)
        h = ad.dropout(h, spec.dropout[i], training, rng)
    return h


def generator_forward(spec: MlpSpec, params, z: Tensor, cond: Tensor) -> Tensor:
    """``G(z | c)``: concatenate noise and condition code, run the MLP."""
    z, cond = ad.as_tensor(z), ad.as_tensor(cond)
    if z.shape[0] != cond.shape[0]:
        raise DimensionError(f"noise batch {z.shape[0]} != condition batch {cond.shape[0]}")
    return mlp_forward(spec, params, ad.concat_cols(z, cond))


def critic_forward(spec: MlpSpec, params, x: Tensor, training: bool = False,
                   rng: Optional[np.random.Generator] = None) -> Tensor:
    """Raw per-class scores; dropout only in training mode."""
    return mlp_forward(spec, params, ad.as_tensor(x), training, rng)


# ---------------------------------------------------------------------- Adam


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.9
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"Adam step size must be positive, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"Adam decay rates must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.eps <= 0:
            raise ConfigError(f"Adam stabilizer must be positive, got {self.eps}")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
              cfg: AdamConfig, direction: str = "descend") -> tuple[MlpParams, AdamState]:
    """One bias-corrected Adam update.  Returns new params and state; inputs are untouched."""
    if direction not in ("descend", "ascend"):
        raise ValueError(f"direction must be 'descend' or 'ascend', got {direction!r}")
    missing = [k for k in params if k not in grads]
    if missing:
        raise ContractError(f"no gradient for parameter(s) {missing}")
    sign = -1.0 if direction == "descend" else 1.0
    t = state.t + 1
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {k} has shape {g.shape}, parameter has {p.shape}")
        m = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        new_p[k] = p + sign * cfg.lr * update
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, t)


def param_grads(grads: ad.GradientMap, watched: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Pull the gradient of each watched parameter out of a GradientMap.

    Parameters that did not influence the loss get an explicit zero gradient.
    """
    out = {}
    for k, t in watched.items():
        g = grads.get(t)
        out[k] = np.zeros(t.shape) if g is None else g.values
    return out
