"""Define-by-run reverse-mode autodiff over dense float64 arrays.

A :class:`Tape` records every operation applied to tensors it watches.
:func:`backward` replays the record in reverse to produce a
:class:`GradientMap`; :func:`grad_graph` does the same while recording the
backward computation itself, so the returned gradient can be differentiated
again (double backpropagation, needed for gradient penalties).

Backward rules live in the :data:`BACKWARD` registry and are written in terms
of the same tensor operations, which is what makes them differentiable.
Only one kind of broadcasting is supported: adding a bias row over the batch
axis (:func:`add_bias`).  Everything else must match shapes exactly or go
through the explicit :func:`expand` / :func:`sum` pair.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Optional, Sequence, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]


class AutodiffError(Exception):
    """Base class for errors raised by the autodiff engine."""


class DimensionError(AutodiffError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(AutodiffError, ValueError):
    """An operand lies outside the domain of the operation (e.g. log of 0)."""


class ContractError(AutodiffError):
    """An API precondition was violated (non-scalar root, foreign tape, ...)."""


class Tensor:
    """An n-dimensional float64 array, optionally attached to a tape.

    ``node`` is the index of the producing record on ``tape``; detached
    constants have ``tape is None`` and ``node is None``.
    """

    __slots__ = ("values", "tape", "node")

    def __init__(self, values: ArrayLike, tape: Optional["Tape"] = None, node: Optional[int] = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def __repr__(self) -> str:
        where = "detached" if self.node is None else f"node={self.node}"
        return f"Tensor(shape={self.shape}, {where})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x: Union[Tensor, ArrayLike]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Record:
    """One recorded operation.  Leaves have ``op == "leaf"`` and no inputs."""

    op: str
    inputs: tuple[Tensor, ...]
    out: Optional[Tensor]
    ctx: Any = None


class Tape:
    """Ordered record of operations; node ids are indices into ``records``.

    Records are appended as operations run, so the list is topologically
    sorted by construction.  A tape is meant to live for a single training
    step and then be discarded.
    """

    def __init__(self) -> None:
        self.records: list[Record] = []
        self.recording = True

    def __len__(self) -> int:
        return len(self.records)

    def watch(self, values: Union[Tensor, ArrayLike]) -> Tensor:
        """Register ``values`` as a leaf whose gradient should be tracked."""
        if isinstance(values, Tensor):
            values = values.values
        t = Tensor(values, self, len(self.records))
        self.records.append(Record("leaf", (), t))
        return t

    def _append(self, op: str, inputs: tuple[Tensor, ...], values: np.ndarray, ctx: Any) -> Tensor:
        t = Tensor(values, self, len(self.records))
        self.records.append(Record(op, inputs, t, ctx))
        return t


# (record, upstream gradient) -> one gradient (or None) per input
BACKWARD: dict[str, Callable[[Record, Tensor], tuple[Optional[Tensor], ...]]] = {}


def _rule(name: str):
    def register(fn):
        BACKWARD[name] = fn
        return fn

    return register


def _emit(op: str, inputs: tuple[Tensor, ...], values: np.ndarray, ctx: Any = None) -> Tensor:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise ContractError(f"{op}: operands belong to different tapes")
    if tape is None or not tape.recording:
        return Tensor(values)
    return tape._append(op, inputs, values, ctx)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.values + b.values)


@_rule("add")
def _add_backward(rec, g):
    return g, g


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.values - b.values)


@_rule("sub")
def _sub_backward(rec, g):
    return g, neg(g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _emit("mul", (a, b), a.values * b.values)


@_rule("mul")
def _mul_backward(rec, g):
    a, b = rec.inputs
    return mul(g, b), mul(g, a)


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    return _emit("div", (a, b), a.values / b.values)


@_rule("div")
def _div_backward(rec, g):
    a, b = rec.inputs
    ga = div(g, b)
    return ga, neg(mul(ga, div(a, b)))


def neg(x: Tensor) -> Tensor:
    return _emit("neg", (x,), -x.values)


@_rule("neg")
def _neg_backward(rec, g):
    return (neg(g),)


def scale(x: Tensor, c: float) -> Tensor:
    return _emit("scale", (x,), x.values * c, c)


@_rule("scale")
def _scale_backward(rec, g):
    return (scale(g, rec.ctx),)


def shift(x: Tensor, c: float) -> Tensor:
    return _emit("shift", (x,), x.values + c, c)


@_rule("shift")
def _shift_backward(rec, g):
    return (g,)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _emit("matmul", (a, b), a.values @ b.values)


@_rule("matmul")
def _matmul_backward(rec, g):
    a, b = rec.inputs
    return matmul(g, transpose(b)), matmul(transpose(a), g)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {x.shape}")
    return _emit("transpose", (x,), x.values.T.copy())


@_rule("transpose")
def _transpose_backward(rec, g):
    return (transpose(g),)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x[i, :] + b`` for every row ``i``: the one supported broadcast."""
    if x.ndim != 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: cannot add bias {b.shape} to {x.shape}")
    return _emit("add_bias", (x, b), x.values + b.values)


@_rule("add_bias")
def _add_bias_backward(rec, g):
    return g, sum(g, axis=0)


# ------------------------------------------------------------- reductions


def sum(x: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001 - mirrors numpy
    """Sum over all elements (``axis=None``) or one axis of a matrix."""
    if axis is not None and not 0 <= axis < x.ndim:
        raise DimensionError(f"sum: axis {axis} out of range for shape {x.shape}")
    return _emit("sum", (x,), np.sum(x.values, axis=axis), (axis, x.shape))


@_rule("sum")
def _sum_backward(rec, g):
    axis, shape = rec.ctx
    return (expand(g, shape, axis),)


def expand(x: Tensor, shape: tuple[int, ...], axis: Optional[int] = None) -> Tensor:
    """Inverse of :func:`sum`: repeat ``x`` along ``axis`` (or fill, if None)."""
    shape = tuple(shape)
    if axis is None:
        if x.size != 1:
            raise DimensionError(f"expand: need a single element to fill {shape}, got {x.shape}")
        values = np.full(shape, x.values.reshape(()))
    else:
        reduced = shape[:axis] + shape[axis + 1:]
        if x.shape != reduced:
            raise DimensionError(f"expand: {x.shape} does not reduce {shape} along axis {axis}")
        values = np.broadcast_to(np.expand_dims(x.values, axis), shape).copy()
    return _emit("expand", (x,), values, (axis, x.shape))


@_rule("expand")
def _expand_backward(rec, g):
    axis, shape = rec.ctx
    out = sum(g, axis=axis)
    if out.shape != shape:
        out = reshape(out, shape)
    return (out,)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    return _emit("reshape", (x,), x.values.reshape(shape).copy(), x.shape)


@_rule("reshape")
def _reshape_backward(rec, g):
    return (reshape(g, rec.ctx),)


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / n)


# ------------------------------------------------------- pointwise functions


def exp(x: Tensor) -> Tensor:
    return _emit("exp", (x,), np.exp(x.values))


@_rule("exp")
def _exp_backward(rec, g):
    return (mul(g, rec.out),)


def log(x: Tensor) -> Tensor:
    if np.any(x.values <= 0):
        raise DomainError("log: input must be strictly positive")
    return _emit("log", (x,), np.log(x.values))


@_rule("log")
def _log_backward(rec, g):
    return (div(g, rec.inputs[0]),)


def square(x: Tensor) -> Tensor:
    return _emit("square", (x,), x.values * x.values)


@_rule("square")
def _square_backward(rec, g):
    return (scale(mul(g, rec.inputs[0]), 2.0),)


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.values < 0):
        raise DomainError("sqrt: input must be non-negative")
    return _emit("sqrt", (x,), np.sqrt(x.values))


@_rule("sqrt")
def _sqrt_backward(rec, g):
    return (scale(div(g, rec.out), 0.5),)


def tanh(x: Tensor) -> Tensor:
    return _emit("tanh", (x,), np.tanh(x.values))


@_rule("tanh")
def _tanh_backward(rec, g):
    y = rec.out
    return (mul(g, 1.0 - square(y)),)


def _sigmoid_values(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x: Tensor) -> Tensor:
    return _emit("sigmoid", (x,), _sigmoid_values(x.values))


@_rule("sigmoid")
def _sigmoid_backward(rec, g):
    y = rec.out
    return (mul(g, mul(y, 1.0 - y)),)


def softplus(x: Tensor) -> Tensor:
    """``log(1 + exp(x))`` without overflow."""
    v = x.values
    return _emit("softplus", (x,), np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v))))


@_rule("softplus")
def _softplus_backward(rec, g):
    return (mul(g, sigmoid(rec.inputs[0])),)


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu: slope must lie in (0, 1), got {slope}")
    # x == 0 takes the positive branch
    factor = np.where(x.values >= 0, 1.0, slope)
    return _emit("leaky_relu", (x,), x.values * factor, factor)


@_rule("leaky_relu")
def _leaky_relu_backward(rec, g):
    return (mul(g, Tensor(rec.ctx)),)


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout.  Identity at inference time or when ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout: training mode needs a random generator")
    keep = rng.random(x.shape) >= rate
    return mul(x, Tensor(keep / (1.0 - rate)))


# ---------------------------------------------------------- layout helpers


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_cols: batch extents differ, {a.shape} vs {b.shape}")
    return _emit("concat_cols", (a, b), np.concatenate([a.values, b.values], axis=1), a.shape[1])


@_rule("concat_cols")
def _concat_cols_backward(rec, g):
    split = rec.ctx
    return slice_cols(g, 0, split), slice_cols(g, split, g.shape[1])


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim != 2 or not 0 <= start <= stop <= x.shape[1]:
        raise DimensionError(f"slice_cols: bad range [{start}, {stop}) for {x.shape}")
    return _emit("slice_cols", (x,), x.values[:, start:stop].copy(), (start, x.shape[1]))


@_rule("slice_cols")
def _slice_cols_backward(rec, g):
    start, width = rec.ctx
    return (pad_cols(g, start, width),)


def pad_cols(x: Tensor, start: int, width: int) -> Tensor:
    """Place ``x`` at column ``start`` of a zero matrix ``width`` columns wide."""
    stop = start + x.shape[1]
    if x.ndim != 2 or start < 0 or stop > width:
        raise DimensionError(f"pad_cols: {x.shape} does not fit at {start} in width {width}")
    out = np.zeros((x.shape[0], width))
    out[:, start:stop] = x.values
    return _emit("pad_cols", (x,), out, (start, stop))


@_rule("pad_cols")
def _pad_cols_backward(rec, g):
    start, stop = rec.ctx
    return (slice_cols(g, start, stop),)


# ------------------------------------------------------------- row softmax


def _log_softmax_values(v: np.ndarray) -> np.ndarray:
    shifted = v - v.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _rowwise(op: str, x: Tensor) -> None:
    if x.ndim != 2:
        raise DimensionError(f"{op}: expected a matrix, got shape {x.shape}")


def softmax_rows(x: Tensor) -> Tensor:
    _rowwise("softmax_rows", x)
    return _emit("softmax_rows", (x,), np.exp(_log_softmax_values(x.values)))


@_rule("softmax_rows")
def _softmax_rows_backward(rec, g):
    y = rec.out
    inner = expand(sum(mul(g, y), axis=1), y.shape, axis=1)
    return (mul(y, sub(g, inner)),)


def log_softmax_rows(x: Tensor) -> Tensor:
    _rowwise("log_softmax_rows", x)
    return _emit("log_softmax_rows", (x,), _log_softmax_values(x.values))


@_rule("log_softmax_rows")
def _log_softmax_rows_backward(rec, g):
    y = rec.out
    return (sub(g, mul(exp(y), expand(sum(g, axis=1), y.shape, axis=1))),)


def softmax_cross_entropy(logits: Tensor, targets: Tensor) -> Tensor:
    """Per-row ``-sum_j t_j log softmax(logits)_j``, shape ``(m,)``.

    Fused so that the gradient w.r.t. the logits is exactly
    ``softmax - targets`` for probability-vector targets.
    """
    _rowwise("softmax_cross_entropy", logits)
    _same_shape("softmax_cross_entropy", logits, targets)
    logp = _log_softmax_values(logits.values)
    return _emit("softmax_cross_entropy", (logits, targets), -(targets.values * logp).sum(axis=1), logp)


@_rule("softmax_cross_entropy")
def _softmax_cross_entropy_backward(rec, g):
    logits, targets = rec.inputs
    gm = expand(g, logits.shape, axis=1)
    # (p * sum_j t_j - t): reduces to p - t when rows of t sum to one
    t_mass = expand(sum(targets, axis=1), logits.shape, axis=1)
    g_logits = mul(gm, sub(mul(softmax_rows(logits), t_mass), targets))
    g_targets = neg(mul(gm, Tensor(rec.ctx))) if targets.node is not None else None
    return g_logits, g_targets


def l2_norm_rows(x: Tensor) -> Tensor:
    """Euclidean norm of every row of a matrix, shape ``(m,)``."""
    _rowwise("l2_norm_rows", x)
    return sqrt(sum(square(x), axis=1))


# ------------------------------------------------------------ differentiation


class GradientMap(dict):
    """``node id -> gradient Tensor``.  Also indexable by the Tensor itself."""

    @staticmethod
    def _key(k):
        return k.node if isinstance(k, Tensor) else k

    def __getitem__(self, k):
        return dict.__getitem__(self, self._key(k))

    def __contains__(self, k):
        return dict.__contains__(self, self._key(k))

    def get(self, k, default=None):
        return dict.get(self, self._key(k), default)


def _backprop(root: Tensor, tape: Tape, create_graph: bool) -> GradientMap:
    if root.size != 1:
        raise ContractError(f"backward needs a single-element tensor, got shape {root.shape}")
    if root.tape is not tape or root.node is None:
        raise ContractError("backward: root tensor is not recorded on this tape")
    grads: dict[int, Tensor] = {root.node: Tensor(np.ones_like(root.values))}
    previous = tape.recording
    tape.recording = create_graph
    try:
        # records appended during the sweep (create_graph) lie past root.node
        for node in range(root.node, -1, -1):
            g = grads.get(node)
            if g is None:
                continue
            rec = tape.records[node]
            if not rec.inputs:
                continue
            for t, gi in zip(rec.inputs, BACKWARD[rec.op](rec, g)):
                if gi is None or t.tape is not tape or t.node is None:
                    continue
                if gi.shape != t.shape:
                    raise DimensionError(
                        f"backward rule for {rec.op} produced {gi.shape}, expected {t.shape}"
                    )
                prev = grads.get(t.node)
                grads[t.node] = gi if prev is None else add(prev, gi)
    finally:
        tape.recording = previous
    return GradientMap(grads)


def backward(scalar: Tensor, tape: Tape) -> GradientMap:
    """Gradients of ``scalar`` w.r.t. every node that influences it.

    Nodes that do not reach ``scalar`` are absent from the result.  The
    returned gradients are detached constants.
    """
    return _backprop(scalar, tape, create_graph=False)


def grad_graph(scalar: Tensor, wrt: Tensor, tape: Tape) -> Tensor:
    """Gradient of ``scalar`` w.r.t. ``wrt``, itself recorded on ``tape``.

    Expressions built from the result can be passed to :func:`backward`
    again, which is how second-order terms such as a gradient-norm penalty
    are differentiated w.r.t. network parameters.
    """
    if wrt.tape is not tape or wrt.node is None:
        raise ContractError("grad_graph: wrt is not recorded on this tape")
    grads = _backprop(scalar, tape, create_graph=True)
    g = grads.get(wrt.node)
    return g if g is not None else Tensor(np.zeros(wrt.shape))
