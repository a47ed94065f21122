"""Finite-difference verification of every backward rule.

Each check draws random inputs, reduces the op's output to a scalar with a
random weighting, and compares the reverse-mode gradient with central
differences (step 1e-5).  Second-order checks compare gradients that pass
through :func:`autodiff.grad_graph` with finite differences of the
first-order computation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad

STEP = 1e-5
FIRST_ORDER_TOL = 1e-5
SECOND_ORDER_TOL = 1e-4


@dataclass
class CheckResult:
    op: str
    worst: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.worst) and self.worst <= self.tol)


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def numerical_grad(f: Callable[[list[np.ndarray]], float], xs: list[np.ndarray], i: int,
                   h: float = STEP) -> np.ndarray:
    x = xs[i]
    out = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = f(xs)
        x[idx] = orig - h
        fm = f(xs)
        x[idx] = orig
        out[idx] = (fp - fm) / (2 * h)
    return out


def _check_op(fn: Callable[..., ad.Tensor], make_inputs: Callable[[np.random.Generator], list[np.ndarray]],
              rng: np.random.Generator, points: int, grad_inputs: Sequence[int] | None = None) -> float:
    worst = 0.0
    for _ in range(points):
        xs = make_inputs(rng)
        out_shape = fn(*[ad.Tensor(x) for x in xs]).shape
        w = rng.standard_normal(out_shape)

        def scalar(vals):
            return float(np.sum(w * fn(*[ad.Tensor(v) for v in vals]).values))

        tape = ad.Tape()
        ts = [tape.watch(x) for x in xs]
        y = fn(*ts)
        loss = ad.sum(ad.mul(y, ad.Tensor(w)))
        grads = ad.backward(loss, tape)
        for i in (grad_inputs if grad_inputs is not None else range(len(xs))):
            g = grads.get(ts[i])
            analytic = np.zeros_like(xs[i]) if g is None else g.values
            worst = max(worst, rel_error(analytic, numerical_grad(scalar, [x.copy() for x in xs], i)))
    return worst


def _normal(*shapes):
    return lambda rng: [rng.standard_normal(s) for s in shapes]


def _positive(*shapes):
    return lambda rng: [rng.uniform(0.5, 2.0, s) for s in shapes]


def _away_from_zero(shape):
    def make(rng):
        x = rng.standard_normal(shape)
        return [np.where(np.abs(x) < 1e-2, 0.5, x)]

    return make


def _dropout(x):
    return ad.dropout(x, 0.5, True, np.random.default_rng(123))


def _ce_inputs(rng):
    logits = rng.standard_normal((4, 5))
    targets = rng.dirichlet(np.ones(5), size=4)
    return [logits, targets]


def _sum_all_axes(x):
    return ad.add(ad.expand(ad.sum(x, axis=0), x.shape, axis=0),
                  ad.add(ad.expand(ad.sum(x, axis=1), x.shape, axis=1),
                         ad.expand(ad.sum(x), x.shape)))


# op name -> (function, input factory); one entry per registered backward rule
# plus the composite operations built from them
FIRST_ORDER: dict[str, tuple[Callable, Callable]] = {
    "add": (ad.add, _normal((3, 4), (3, 4))),
    "sub": (ad.sub, _normal((3, 4), (3, 4))),
    "mul": (ad.mul, _normal((3, 4), (3, 4))),
    "div": (ad.div, lambda rng: [rng.standard_normal((3, 4)), rng.uniform(0.5, 2.0, (3, 4))]),
    "neg": (ad.neg, _normal((3, 4))),
    "scale": (lambda x: ad.scale(x, -1.7), _normal((3, 4))),
    "shift": (lambda x: ad.shift(x, 0.3), _normal((3, 4))),
    "matmul": (ad.matmul, _normal((3, 4), (4, 2))),
    "transpose": (ad.transpose, _normal((3, 4))),
    "add_bias": (ad.add_bias, _normal((3, 4), (4,))),
    "sum": (_sum_all_axes, _normal((3, 4))),
    "expand": (lambda v: ad.expand(v, (3, 4), axis=1), _normal((3,))),
    "reshape": (lambda x: ad.reshape(x, (2, 6)), _normal((3, 4))),
    "exp": (ad.exp, _normal((3, 4))),
    "log": (ad.log, _positive((3, 4))),
    "square": (ad.square, _normal((3, 4))),
    "sqrt": (ad.sqrt, _positive((3, 4))),
    "tanh": (ad.tanh, _normal((3, 4))),
    "sigmoid": (ad.sigmoid, _normal((3, 4))),
    "softplus": (ad.softplus, _normal((3, 4))),
    "leaky_relu": (lambda x: ad.leaky_relu(x, 0.2), _away_from_zero((3, 4))),
    "concat_cols": (ad.concat_cols, _normal((3, 2), (3, 4))),
    "slice_cols": (lambda x: ad.slice_cols(x, 1, 3), _normal((3, 4))),
    "pad_cols": (lambda x: ad.pad_cols(x, 1, 5), _normal((3, 2))),
    "softmax_rows": (ad.softmax_rows, _normal((3, 4))),
    "log_softmax_rows": (ad.log_softmax_rows, _normal((3, 4))),
    "softmax_cross_entropy": (ad.softmax_cross_entropy, _ce_inputs),
    "mean": (ad.mean, _normal((3, 4))),
    "dropout": (_dropout, _normal((3, 4))),
    "l2_norm_rows": (ad.l2_norm_rows, _normal((3, 4))),
}


def _check_quartic(rng: np.random.Generator, points: int) -> float:
    """grad of 1/4 ||x||^4 is ||x||^2 x; differentiate that again."""

    def first_order(x: np.ndarray) -> np.ndarray:
        tape = ad.Tape()
        t = tape.watch(x)
        f = ad.scale(ad.square(ad.sum(ad.square(t))), 0.25)
        return ad.backward(f, tape)[t].values

    worst = 0.0
    for _ in range(points):
        x = rng.standard_normal((2, 3))
        w = rng.standard_normal(x.shape)
        tape = ad.Tape()
        t = tape.watch(x)
        f = ad.scale(ad.square(ad.sum(ad.square(t))), 0.25)
        g = ad.grad_graph(f, t, tape)
        analytic = ad.backward(ad.sum(ad.mul(g, ad.Tensor(w))), tape)[t].values
        numeric = numerical_grad(lambda xs: float(np.sum(w * first_order(xs[0]))), [x.copy()], 0)
        worst = max(worst, rel_error(analytic, numeric))
    return worst


def penalty_via_first_order(w1, b1, w2, b2, x_hat, labels) -> float:
    """Gradient penalty of a tanh critic using only first-order backward passes."""
    tape = ad.Tape()
    xt = tape.watch(x_hat)
    h = ad.tanh(ad.add_bias(ad.matmul(xt, ad.Tensor(w1)), ad.Tensor(b1)))
    scores = ad.add_bias(ad.matmul(h, ad.Tensor(w2)), ad.Tensor(b2))
    onehot = np.eye(w2.shape[1])[labels]
    grad = ad.backward(ad.sum(ad.mul(scores, ad.Tensor(onehot))), tape)[xt].values
    return float(np.mean((np.linalg.norm(grad, axis=1) - 1.0) ** 2))


def penalty_param_grads(w1, b1, w2, b2, x_hat, labels) -> list[np.ndarray]:
    """Parameter gradient of the same penalty through grad_graph."""
    tape = ad.Tape()
    ps = [tape.watch(p) for p in (w1, b1, w2, b2)]
    xt = tape.watch(x_hat)
    h = ad.tanh(ad.add_bias(ad.matmul(xt, ps[0]), ps[1]))
    scores = ad.add_bias(ad.matmul(h, ps[2]), ps[3])
    onehot = ad.Tensor(np.eye(w2.shape[1])[labels])
    g = ad.grad_graph(ad.sum(ad.mul(scores, onehot)), xt, tape)
    pen = ad.mean(ad.square(ad.shift(ad.l2_norm_rows(g), -1.0)))
    grads = ad.backward(pen, tape)
    # the output bias never reaches the input gradient
    return [grads[p].values if p in grads else np.zeros(p.shape) for p in ps]


def _check_penalty(rng: np.random.Generator, points: int) -> float:
    worst = 0.0
    for _ in range(points):
        d, hdim, n, m = 3, 5, 2, 4
        params = [rng.standard_normal((d, hdim)), rng.standard_normal(hdim) * 0.1,
                  rng.standard_normal((hdim, n)), rng.standard_normal(n) * 0.1]
        x_hat = rng.standard_normal((m, d))
        labels = rng.integers(0, n, m)
        analytic = penalty_param_grads(*params, x_hat, labels)

        def f(ps):
            return penalty_via_first_order(*ps, x_hat, labels)

        for i in range(len(params)):
            numeric = numerical_grad(f, [p.copy() for p in params], i)
            worst = max(worst, rel_error(analytic[i], numeric))
    return worst


SECOND_ORDER = {
    "grad_graph:quartic": _check_quartic,
    "grad_graph:penalty": _check_penalty,
}


def run_gradcheck(points: int = 10, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, (fn, make) in FIRST_ORDER.items():
        results.append(CheckResult(name, _check_op(fn, make, rng, points), FIRST_ORDER_TOL))
    for name, check in SECOND_ORDER.items():
        results.append(CheckResult(name, check(rng, points), SECOND_ORDER_TOL))
    return results
