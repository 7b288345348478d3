"""Dense float64 arrays, a reverse-mode differentiation tape, and the small
neural building blocks (MLP, normalization head) the rest of the package
composes.

Values live in :class:`Tensor`, a thin wrapper over a C-contiguous float64
numpy array. Operations are plain functions. While a :class:`Tape` is
active (``with Tape() as tape:``) every operation appends a node recording
its inputs, a closure that recomputes the forward value, and a closure
that maps an output gradient to input gradients. ``backward(tape, loss)``
then runs reverse accumulation and returns exact gradients for every
tensor created with ``trainable=True``.

Computation is float64 throughout: the verification tolerances in the test
suite need the headroom. Tensors are treated as immutable once created,
and every reduction runs in a fixed order, so repeated runs with identical
inputs are bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an operation's contract."""


class TapeError(RuntimeError):
    """Raised on invalid use of the recording tape."""


class NumericalError(ArithmeticError):
    """Raised when an evaluation produces a non-finite value."""


class Tensor:
    """A float64 array participating in tape recording.

    ``data`` holds the values in row-major order. ``trainable`` marks leaf
    tensors whose gradients ``backward`` should report. Do not mutate
    ``data`` in place; optimizers rebind it instead.
    """

    __slots__ = ("data", "trainable", "name")

    def __init__(self, data: np.ndarray, trainable: bool = False, name: str | None = None):
        self.data = data
        self.trainable = trainable
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.data.shape}, trainable={self.trainable})"


def tensor(values, *, trainable: bool = False, name: str | None = None) -> Tensor:
    """Create a tensor from array-like values, rejecting NaN/Inf."""
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if arr.size and not np.isfinite(arr).all():
        raise ValueError("tensor values must be finite")
    return Tensor(arr, trainable=trainable, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else tensor(x)


@dataclass
class TapeNode:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    forward_fn: Callable[[], np.ndarray]
    backward_fn: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered record of primitive operations for one forward pass.

    Nodes are appended in execution order, so every node's inputs precede
    it. ``replay`` re-executes each recorded forward closure and confirms
    the stored outputs are reproduced bit-exactly.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _TAPE_STACK.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op, inputs, output, forward_fn, backward_fn) -> None:
        self.nodes.append(TapeNode(op, tuple(inputs), output, forward_fn, backward_fn))

    def replay(self) -> bool:
        """Recompute every node from its recorded inputs; True iff all
        outputs match the recorded values bit for bit."""
        for node in self.nodes:
            fresh = np.asarray(node.forward_fn())
            if fresh.tobytes() != node.output.data.tobytes():
                return False
        return True


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to `shape` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _elementwise(op, a: Tensor, b: Tensor, fn, da, db) -> Tensor:
    ad, bd = a.data, b.data
    out = Tensor(fn(ad, bd))
    tape = _active_tape()
    if tape is not None:
        def backward_fn(g):
            return (_unbroadcast(da(g, ad, bd), ad.shape),
                    _unbroadcast(db(g, ad, bd), bd.shape))
        tape.record(op, (a, b), out, lambda: fn(ad, bd), backward_fn)
    return out


def add(a, b) -> Tensor:
    return _elementwise("add", _as_tensor(a), _as_tensor(b), np.add,
                        lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _elementwise("sub", _as_tensor(a), _as_tensor(b), np.subtract,
                        lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _elementwise("mul", _as_tensor(a), _as_tensor(b), np.multiply,
                        lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    return _elementwise("div", _as_tensor(a), _as_tensor(b), np.divide,
                        lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    out = Tensor(-ad)
    tape = _active_tape()
    if tape is not None:
        tape.record("neg", (a,), out, lambda: -ad, lambda g: (-g,))
    return out


def scale(a, c: float) -> Tensor:
    """Multiply by a python-float constant (no gradient for the constant)."""
    a = _as_tensor(a)
    ad, c = a.data, float(c)
    out = Tensor(ad * c)
    tape = _active_tape()
    if tape is not None:
        tape.record("scale", (a,), out, lambda: ad * c, lambda g: (g * c,))
    return out


def add_const(a, c: float) -> Tensor:
    a = _as_tensor(a)
    ad, c = a.data, float(c)
    out = Tensor(ad + c)
    tape = _active_tape()
    if tape is not None:
        tape.record("add_const", (a,), out, lambda: ad + c, lambda g: (g,))
    return out


def relu(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    out = Tensor(np.maximum(ad, 0.0))
    tape = _active_tape()
    if tape is not None:
        tape.record("relu", (a,), out, lambda: np.maximum(ad, 0.0),
                    lambda g: (g * (ad > 0.0),))
    return out


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    out_data = np.sqrt(ad)
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:
        tape.record("sqrt", (a,), out, lambda: np.sqrt(ad),
                    lambda g: (g * 0.5 / out_data,))
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    t = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + t), t / (1.0 + t))


def softplus(a) -> Tensor:
    """log(1 + exp(x)), overflow-safe; strictly positive output."""
    a = _as_tensor(a)
    ad = a.data
    out = Tensor(np.logaddexp(0.0, ad))
    tape = _active_tape()
    if tape is not None:
        tape.record("softplus", (a,), out, lambda: np.logaddexp(0.0, ad),
                    lambda g: (g * _sigmoid(ad),))
    return out


def matmul(a, b) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")
    out = Tensor(ad @ bd)
    tape = _active_tape()
    if tape is not None:
        tape.record("matmul", (a, b), out, lambda: ad @ bd,
                    lambda g: (g @ bd.T, ad.T @ g))
    return out


def transpose2(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    if ad.ndim != 2:
        raise ShapeError(f"transpose2 expects rank 2, got shape {ad.shape}")
    out = Tensor(np.ascontiguousarray(ad.T))
    tape = _active_tape()
    if tape is not None:
        tape.record("transpose2", (a,), out,
                    lambda: np.ascontiguousarray(ad.T),
                    lambda g: (np.ascontiguousarray(g.T),))
    return out


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != ad.size:
        raise ShapeError(f"reshape: cannot view {ad.shape} as {shape}")
    out = Tensor(np.ascontiguousarray(ad.reshape(shape)))
    tape = _active_tape()
    if tape is not None:
        tape.record("reshape", (a,), out,
                    lambda: np.ascontiguousarray(ad.reshape(shape)),
                    lambda g: (g.reshape(ad.shape),))
    return out


def reduce_sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    out = Tensor(ad.sum(axis=axis, keepdims=keepdims))
    tape = _active_tape()
    if tape is not None:
        def backward_fn(g):
            if axis is None:
                return (np.broadcast_to(g, ad.shape).copy(),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, ad.shape).copy(),)
        tape.record("reduce_sum", (a,), out,
                    lambda: ad.sum(axis=axis, keepdims=keepdims), backward_fn)
    return out


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate rank-2 tensors along columns."""
    parts = [_as_tensor(p) for p in parts]
    datas = [p.data for p in parts]
    rows = {d.shape[0] for d in datas}
    if any(d.ndim != 2 for d in datas) or len(rows) != 1:
        raise ShapeError(f"concat_cols: incompatible shapes {[d.shape for d in datas]}")
    out = Tensor(np.concatenate(datas, axis=1))
    tape = _active_tape()
    if tape is not None:
        widths = [d.shape[1] for d in datas]
        def backward_fn(g):
            grads, at = [], 0
            for w in widths:
                grads.append(np.ascontiguousarray(g[:, at:at + w]))
                at += w
            return tuple(grads)
        tape.record("concat_cols", tuple(parts), out,
                    lambda: np.concatenate(datas, axis=1), backward_fn)
    return out


def gather_rows(a, idx) -> Tensor:
    """Select rows of a rank-2 tensor by integer index, with scatter-add
    backward (deterministic accumulation order)."""
    a = _as_tensor(a)
    ad = a.data
    if ad.ndim != 2:
        raise ShapeError(f"gather_rows expects rank 2, got shape {ad.shape}")
    idx = np.asarray(idx, dtype=np.int64).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= ad.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {ad.shape[0]} rows")
    out = Tensor(ad[idx])
    tape = _active_tape()
    if tape is not None:
        def backward_fn(g):
            acc = np.zeros_like(ad)
            np.add.at(acc, idx, g)
            return (acc,)
        tape.record("gather_rows", (a,), out, lambda: ad[idx], backward_fn)
    return out


def _softmax_rows_data(m: np.ndarray) -> np.ndarray:
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(m) -> Tensor:
    """Row-wise softmax of a rank-2 tensor, max-shifted for stability.

    Every output row is non-negative and sums to 1.
    """
    m = _as_tensor(m)
    md = m.data
    if md.ndim != 2:
        raise ShapeError(f"softmax_rows expects rank 2, got shape {md.shape}")
    out_data = _softmax_rows_data(md)
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:
        def backward_fn(g):
            inner = (g * out_data).sum(axis=1, keepdims=True)
            return ((g - inner) * out_data,)
        tape.record("softmax_rows", (m,), out, lambda: _softmax_rows_data(md), backward_fn)
    return out


# ---------------------------------------------------------------------------
# Neural building blocks


@dataclass
class MlpParams:
    """Weights of a perceptron: ReLU on hidden layers, identity on output.

    ``layers`` is a list of (weight, bias) pairs; weight is Din x Dout and
    bias has shape (Dout,). Consecutive layer dimensions must chain.
    """

    layers: list[tuple[Tensor, Tensor]]

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("MlpParams needs at least one layer")
        for i, (w, b) in enumerate(self.layers):
            if w.data.ndim != 2 or b.data.ndim != 1 or b.data.shape[0] != w.data.shape[1]:
                raise ShapeError(f"layer {i}: weight {w.shape} and bias {b.shape} do not agree")
            if i > 0 and self.layers[i - 1][0].data.shape[1] != w.data.shape[0]:
                raise ShapeError(
                    f"layer {i}: input dim {w.shape[0]} does not chain with "
                    f"previous output dim {self.layers[i - 1][0].shape[1]}")

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].data.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].data.shape[1]

    def named_tensors(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for i, (w, b) in enumerate(self.layers):
            yield f"{prefix}.w{i}", w
            yield f"{prefix}.b{i}", b


def mlp_forward(p: MlpParams, x) -> Tensor:
    """Affine / ReLU chain; the final layer has no activation."""
    x = _as_tensor(x)
    if x.data.ndim != 2 or x.data.shape[1] != p.in_dim:
        raise ShapeError(f"mlp_forward: input {x.shape} does not match first layer "
                         f"of width {p.in_dim}")
    h = x
    last = len(p.layers) - 1
    for i, (w, b) in enumerate(p.layers):
        h = add(matmul(h, w), b)
        if i != last:
            h = relu(h)
    return h


@dataclass
class NormActParams:
    """Linear map followed by per-feature standardization and ReLU."""

    weight: Tensor  # D x D
    bias: Tensor    # (D,)
    gain: Tensor    # (D,) learnable per-feature scale
    shift: Tensor   # (D,) learnable per-feature shift

    def named_tensors(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias
        yield f"{prefix}.gain", self.gain
        yield f"{prefix}.shift", self.shift


def norm_act_head(p: NormActParams, x) -> Tensor:
    """Linear map, then standardization over the rows of the current cloud
    (mean 0, variance 1 per feature, epsilon 1e-5 in the denominator, with
    learnable gain/shift), then ReLU.

    Statistics are recomputed from the given rows every call; nothing is
    carried between calls, so the result is independent of batching. A
    constant feature column standardizes to zeros. Needs at least 2 rows.
    """
    x = _as_tensor(x)
    if x.data.ndim != 2 or x.data.shape[0] < 2:
        raise ShapeError(f"norm_act_head needs at least 2 rows, got shape {x.shape}")
    z = add(matmul(x, p.weight), p.bias)
    n = z.data.shape[0]
    mean = scale(reduce_sum(z, axis=0, keepdims=True), 1.0 / n)
    centered = sub(z, mean)
    var = scale(reduce_sum(mul(centered, centered), axis=0, keepdims=True), 1.0 / n)
    standardized = div(centered, sqrt(add_const(var, NORM_EPS)))
    return relu(add(mul(standardized, p.gain), p.shift))


# ---------------------------------------------------------------------------
# Reverse pass


class Gradients:
    """Gradients keyed by tensor identity, as returned by ``backward``."""

    def __init__(self, by_id: dict[int, np.ndarray], tensors: dict[int, Tensor]):
        self._by_id = by_id
        self._tensors = tensors

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._by_id

    def wrt(self, t: Tensor) -> np.ndarray:
        """Gradient with respect to `t`; zeros if `t` is unreachable from
        the backward root."""
        g = self._by_id.get(id(t))
        return np.zeros_like(t.data) if g is None else g

    def trainable_items(self) -> list[tuple[Tensor, np.ndarray]]:
        return [(self._tensors[k], g) for k, g in self._by_id.items()
                if self._tensors[k].trainable]


def backward(tape: Tape, output: Tensor) -> Gradients:
    """Reverse accumulation from a scalar recorded on `tape`.

    The scalar must be the output of one of the tape's nodes; gradients are
    exact (not approximated) for every tensor reachable from it.
    """
    if output.data.size != 1:
        raise TapeError(f"backward target must be a scalar, got shape {output.shape}")
    if not any(node.output is output for node in tape.nodes):
        raise TapeError("backward target was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    tensors: dict[int, Tensor] = {id(output): output}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        tensors.pop(id(node.output), None)
        if g is None:
            continue
        input_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, input_grads):
            if gi is None:
                continue
            gi = np.asarray(gi, dtype=np.float64)
            if gi.shape != t.data.shape:
                gi = gi.reshape(t.data.shape)
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                tensors[key] = t
    return Gradients(grads, tensors)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient oracle: (f(x+eps e) - f(x-eps e)) / 2 eps
    per coordinate. `f` must be pure and finite near `x`."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    work = x.copy()
    for i in range(x.size):
        orig = work.flat[i]
        work.flat[i] = orig + eps
        fp = float(f(work))
        work.flat[i] = orig - eps
        fm = float(f(work))
        work.flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericalError(f"non-finite evaluation while perturbing coordinate {i}")
        grad.flat[i] = (fp - fm) / (2.0 * eps)
    return grad
