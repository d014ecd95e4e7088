"""Dense float64 tensors with a tape-based reverse-mode gradient engine.

Every op accepts arrays with optional leading batch axes and treats the last
two axes as the matrix.  Ops record themselves on the active :class:`Tape`
only when one of their inputs requires a gradient, so forward passes outside
a tape run without bookkeeping.
"""
from __future__ import annotations

import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
NORM_EPS = 1e-12

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "mrcmv_active_tape", default=None
)


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateEmbeddingError(ValueError):
    """A vector is too close to zero to be normalized."""


class Tensor:
    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    # operator sugar, the model code mostly calls the functions directly
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A named learnable tensor whose gradient accumulates across backward passes."""

    __slots__ = ("name",)

    def __init__(self, name: str, value):
        super().__init__(value, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


class Tape:
    """Ordered record of executed ops; ``backward`` replays it in reverse.

    Use as a context manager so that ops executed inside the block are recorded::

        with Tape() as tape:
            loss = f()
        tape.backward(loss)
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable, tuple]] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def parameters(self) -> list[Parameter]:
        """Parameters read by at least one recorded op, in first-use order."""
        seen: dict[int, Parameter] = {}
        for _, inputs, _, _ in self.records:
            for x in inputs:
                if isinstance(x, Parameter):
                    seen.setdefault(id(x), x)
        return list(seen.values())

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> list[int]:
        """Propagate d(loss) back to every input that requires a gradient.

        Parameter gradients are accumulated (``+=``); intermediate gradients
        are freshly allocated per call.  Returns the indices of the records in
        the order they were visited.
        """
        if seed is None:
            if loss.value.size != 1:
                raise ShapeError(f"backward needs a scalar loss or explicit seed, got {loss.shape}")
            seed = np.ones_like(loss.value)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=DTYPE)}
        nodes: dict[int, Tensor] = {id(loss): loss}
        visited = []
        for idx in range(len(self.records) - 1, -1, -1):
            out, inputs, rule, saved = self.records[idx]
            g = grads.pop(id(out), None)
            if g is None:
                continue
            visited.append(idx)
            in_grads = rule(g, *saved)
            for x, gx in zip(inputs, in_grads):
                if gx is None or not x.requires_grad:
                    continue
                gx = _unbroadcast(gx, x.value.shape)
                if isinstance(x, Parameter):
                    x.grad += gx
                else:
                    prev = grads.get(id(x))
                    grads[id(x)] = gx if prev is None else prev + gx
                    nodes[id(x)] = x
        # whatever was not consumed by a record belongs to a leaf
        for key, g in grads.items():
            leaf = nodes[key]
            leaf.grad = g if leaf.grad is None else leaf.grad + g
        return visited


def _record(value: np.ndarray, inputs: tuple[Tensor, ...], rule: Callable, saved: tuple) -> Tensor:
    # bypasses Tensor.__init__: ``value`` is already a float64 ndarray
    out = _new_tensor(Tensor)
    out.value = value if type(value) is np.ndarray else np.asarray(value, dtype=DTYPE)
    out.grad = None
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(x.requires_grad for x in inputs):
        out.requires_grad = True
        tape.records.append((out, inputs, rule, saved))
    else:
        out.requires_grad = False
    return out


_new_tensor = Tensor.__new__


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _add_backward(g):
    return g, g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        v = a.value + b.value
    except ValueError as e:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from e
    return _record(v, (a, b), _add_backward, ())


def _sub_backward(g):
    return g, -g


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        v = a.value - b.value
    except ValueError as e:
        raise ShapeError(f"cannot subtract shapes {a.shape} and {b.shape}") from e
    return _record(v, (a, b), _sub_backward, ())


def _mul_backward(g, av, bv):
    return g * bv, g * av


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        v = a.value * b.value
    except ValueError as e:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from e
    return _record(v, (a, b), _mul_backward, (a.value, b.value))


def _scale_backward(g, c):
    return (g * c,)


def scale(x: Tensor, c: float) -> Tensor:
    return _record(x.value * c, (x,), _scale_backward, (c,))


def _square_backward(g, xv):
    return (2.0 * xv * g,)


def square(x: Tensor) -> Tensor:
    return _record(x.value * x.value, (x,), _square_backward, (x.value,))


def _relu_backward(g, mask):
    return (g * mask,)


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is 0."""
    mask = x.value > 0
    return _record(np.where(mask, x.value, 0.0), (x,), _relu_backward, (mask,))


def _sigmoid_backward(g, y):
    return (g * y * (1.0 - y),)


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return _record(y, (x,), _sigmoid_backward, (y,))


# ---------------------------------------------------------------------------
# matrix ops
# ---------------------------------------------------------------------------

def _matmul_backward(g, av, bv):
    if bv.ndim == 2 and av.ndim > 2:
        # shared weight: fold the batch axes into one 2-D product
        g2 = g.reshape(-1, g.shape[-1])
        ga = (g2 @ bv.T).reshape(av.shape)
        gb = av.reshape(-1, av.shape[-1]).T @ g2
    else:
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
    return ga, gb


def matmul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = Tensor(a)
    if not isinstance(b, Tensor):
        b = Tensor(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {av.shape} x {bv.shape}")
    return _record(av @ bv, (a, b), _matmul_backward, (av, bv))


def _matmul_t_backward(g, av, bv):
    return g @ bv, np.swapaxes(g, -1, -2) @ av


def matmul_t(a: Tensor, b: Tensor) -> Tensor:
    """a @ b^T over the last two axes, one record instead of transpose + matmul."""
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-1]:
        raise ShapeError(f"matmul_t dimension mismatch: {av.shape} x {bv.shape}^T")
    return _record(av @ np.swapaxes(bv, -1, -2), (a, b), _matmul_t_backward, (av, bv))


def _transpose_backward(g):
    return (np.swapaxes(g, -1, -2),)


def transpose(x: Tensor) -> Tensor:
    return _record(np.swapaxes(x.value, -1, -2), (x,), _transpose_backward, ())


def _softmax_backward(g, y):
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def row_softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    y = x.value - x.value.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)
    return _record(y, (x,), _softmax_backward, (y,))


def _concat_backward(g, p):
    return g[..., :p], g[..., p:]


def concat_depth(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the feature (last) axis."""
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat_depth row mismatch: {a.shape} vs {b.shape}")
    v = np.concatenate([a.value, b.value], axis=-1)
    return _record(v, (a, b), _concat_backward, (a.shape[-1],))


def concat_many(parts: Sequence[Tensor]) -> Tensor:
    out = parts[0]
    for p in parts[1:]:
        out = concat_depth(out, p)
    return out


def _slice_backward(g, shape, start, stop):
    full = np.zeros(shape, dtype=DTYPE)
    full[..., start:stop] = g
    return (full,)


def slice_depth(x: Tensor, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of the last axis."""
    if not 0 <= start < stop <= x.shape[-1]:
        raise ShapeError(f"bad depth slice {start}:{stop} of {x.shape}")
    return _record(x.value[..., start:stop], (x,), _slice_backward, (x.shape, start, stop))


def _reshape_backward(g, shape):
    return (g.reshape(shape),)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        v = x.value.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from e
    return _record(v, (x,), _reshape_backward, (x.shape,))


def flatten_rows(x: Tensor) -> Tensor:
    """Collapse the trailing L x d matrix into a single 1 x (L*d) row (row-major)."""
    lead = x.shape[:-2]
    v = x.value.reshape(lead + (1, x.shape[-2] * x.shape[-1]))
    return _record(v, (x,), _reshape_backward, (x.shape,))


def _mean_rows_backward(g, n):
    return (np.repeat(g, n, axis=-2) / n,)


def mean_rows(x: Tensor) -> Tensor:
    n = x.shape[-2]
    return _record(x.value.mean(axis=-2, keepdims=True), (x,), _mean_rows_backward, (n,))


def _sum_backward(g, shape, axis):
    if axis is None:
        return (np.broadcast_to(g, shape).copy(),)
    return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)


def sum_all(x: Tensor) -> Tensor:
    return _record(np.asarray(x.value.sum()), (x,), _sum_backward, (x.shape, None))


def sum_axis(x: Tensor, axis: int) -> Tensor:
    return _record(x.value.sum(axis=axis), (x,), _sum_backward, (x.shape, axis))


def _normalize_backward(g, y, norm):
    return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)


def l2_normalize_row(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm."""
    norm = np.sqrt((x.value * x.value).sum(axis=-1, keepdims=True))
    if np.any(norm <= eps):
        raise DegenerateEmbeddingError(f"cannot normalize a vector with norm {norm.min():.3g}")
    y = x.value / norm
    return _record(y, (x,), _normalize_backward, (y, norm))


def _xent_backward(g, probs, onehot):
    return (g * (probs - onehot),)


def cross_entropy_sum(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Summed negative log-likelihood of integer ``labels`` under row softmax of ``logits``."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape[-2], logits.shape[-1]
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range [0, {c}): {labels.tolist()}")
    z = logits.value - logits.value.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    onehot = np.zeros_like(logp)
    onehot[np.arange(n), labels] = 1.0
    v = np.asarray(-(logp * onehot).sum())
    return _record(v, (logits,), _xent_backward, (np.exp(logp), onehot))


# ---------------------------------------------------------------------------
# checking
# ---------------------------------------------------------------------------

def analytic_gradients(f: Callable[[], Tensor], params: Sequence[Parameter]) -> list[np.ndarray]:
    zero_grads(params)
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    return [p.grad.copy() for p in params]


def gradient_check(f: Callable[[], Tensor], params: Sequence[Parameter], h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    The error for one entry is ``|analytic - numeric| / max(1, |numeric|)``.
    ``f`` must rebuild its graph from the current parameter values each call.
    """
    analytic = analytic_gradients(f, params)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.value.reshape(-1)
        ga = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().value.item()
            flat[i] = orig - h
            fm = f().value.item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            err = abs(ga[i] - num) / max(1.0, abs(num))
            if err > worst:
                worst = err
    return worst
