"""Dense 2-D float64 matrices with tape-based reverse-mode differentiation.

Values are plain C-contiguous ``numpy`` arrays treated as immutable.  A
:class:`Var` wraps a value; operations on vars are recorded on the active
:class:`Tape` (entered with ``with Tape() as tape:``) whenever one of their
inputs requires a gradient.  ``tape.backward(loss)`` walks the recorded
operations in exact reverse order.

Matrix products go through :mod:`aflnet.backend` and accumulate in a fixed
row-major order, so they agree bit-for-bit with a naive triple loop.
"""
from __future__ import annotations

import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from aflnet import backend


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class EvaluationError(ArithmeticError):
    """Raised when a function under gradient check evaluates to non-finite."""


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


class Var:
    """A matrix-valued node; leaves with ``requires_grad`` are parameters."""

    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = as_matrix(value, name or "value")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(value, name: str | None = None) -> Var:
    return Var(value, requires_grad=True, name=name)


@dataclass
class _Op:
    out: Var
    parents: tuple[Var, ...]
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]
    kind: str


_ACTIVE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("aflnet_tape", default=None)
# set by grad_check: relu appends its on/off pattern so kink crossings show up
_KINKS: contextvars.ContextVar["list | None"] = contextvars.ContextVar("aflnet_kinks", default=None)


class Tape:
    """Ordered record of primitive operations for one forward pass."""

    def __init__(self):
        self.ops: list[_Op] = []
        self.visits = 0
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._token)
        self._token = None

    def backward(self, loss: Var, params: Iterable[Var] = ()) -> None:
        """Accumulate d(loss)/d(var) into ``.grad`` of every var on the tape.

        ``params`` are zero-initialised first, so parameters the loss does
        not depend on end up with an all-zero gradient.
        """
        if loss.shape != (1, 1):
            raise DimensionError(f"loss must be 1x1, got {loss.shape}")
        for op in self.ops:
            op.out.grad = None
            for parent in op.parents:
                parent.grad = None
        for p in params:
            p.grad = np.zeros_like(p.value)
        loss.grad = np.ones((1, 1))
        for op in reversed(self.ops):
            self.visits += 1
            g = op.out.grad
            if g is None:
                continue
            grads = op.backward(g)
            for parent, pg in zip(op.parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                parent.grad = pg if parent.grad is None else parent.grad + pg


def active_tape() -> Tape | None:
    return _ACTIVE.get()


def _wrap(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _emit(value: np.ndarray, parents: Sequence[Var], backward, kind: str) -> Var:
    out = Var(value)
    tape = _ACTIVE.get()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.ops.append(_Op(out, tuple(parents), backward, kind))
    return out


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return backend.kernels.matmul(np.ascontiguousarray(a), np.ascontiguousarray(b))


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    out = g
    if shape[0] == 1 and g.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out


def _check_broadcast(a: np.ndarray, b: np.ndarray, opname: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------- primitives


def matmul(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        ga = _mm(g, bv.T) if a.requires_grad else None
        gb = _mm(av.T, g) if b.requires_grad else None
        return ga, gb

    return _emit(_mm(av, bv), (a, b), backward, "matmul")


def add(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.value, b.value, "add")
    sa, sb = a.shape, b.shape
    return _emit(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def sub(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.value, b.value, "sub")
    sa, sb = a.shape, b.shape
    return _emit(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        "sub",
    )


def mul(a, b) -> Var:
    """Elementwise product with row/column broadcasting."""
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.value, b.value, "mul")
    av, bv = a.value, b.value

    def backward(g):
        ga = _unbroadcast(g * bv, av.shape) if a.requires_grad else None
        gb = _unbroadcast(g * av, bv.shape) if b.requires_grad else None
        return ga, gb

    return _emit(av * bv, (a, b), backward, "mul")


def scale(a, c: float) -> Var:
    a = _wrap(a)
    return _emit(a.value * c, (a,), lambda g: (g * c,), "scale")


def linear(x, w, b) -> Var:
    """``x @ w + b`` with ``b`` a single row broadcast over ``x``'s rows."""
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    if x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b.shape != (1, w.shape[1]):
        raise DimensionError(f"linear: bias {b.shape} must be (1, {w.shape[1]})")
    return add(matmul(x, w), b)


def tanh(x) -> Var:
    x = _wrap(x)
    y = np.tanh(x.value)
    return _emit(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(x) -> Var:
    x = _wrap(x)
    on = x.value > 0
    log = _KINKS.get()
    if log is not None:
        log.append(on)
    mask = on.astype(float)
    return _emit(x.value * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x) -> Var:
    x = _wrap(x)
    v = x.value
    # split by sign so exp never overflows
    e = np.exp(-np.abs(v))
    y = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def softmax_rows(x, scale: float = 1.0) -> Var:
    """Row-wise ``softmax(x / scale)``, stabilised by max subtraction."""
    if not scale > 0:
        raise ValueError(f"softmax scale must be positive, got {scale}")
    x = _wrap(x)
    z = x.value / scale
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return ((y * (g - dot)) / scale,)

    return _emit(y, (x,), backward, "softmax_rows")


def transpose(x) -> Var:
    x = _wrap(x)
    return _emit(np.ascontiguousarray(x.value.T), (x,), lambda g: (np.ascontiguousarray(g.T),), "transpose")


def reshape(x, shape: tuple[int, int]) -> Var:
    x = _wrap(x)
    old = x.shape
    return _emit(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def take_rows(x, index) -> Var:
    """Gather rows ``x[index]``; the backward pass scatter-adds."""
    x = _wrap(x)
    idx = np.asarray(index, dtype=np.intp)
    rows = x.shape[0]

    def backward(g):
        out = np.zeros((rows, g.shape[1]))
        np.add.at(out, idx, g)
        return (out,)

    return _emit(x.value[idx], (x,), backward, "take_rows")


def take_cols(x, index) -> Var:
    x = _wrap(x)
    idx = np.asarray(index, dtype=np.intp)
    cols = x.shape[1]

    def backward(g):
        out = np.zeros((g.shape[0], cols))
        np.add.at(out, (slice(None), idx), g)
        return (out,)

    return _emit(np.ascontiguousarray(x.value[:, idx]), (x,), backward, "take_cols")


def concat_rows(parts: Sequence) -> Var:
    parts = [_wrap(p) for p in parts]
    widths = {p.shape[1] for p in parts}
    if len(widths) != 1:
        raise DimensionError(f"concat_rows: column counts differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _emit(np.concatenate([p.value for p in parts], axis=0), parts, backward, "concat_rows")


def concat_cols(parts: Sequence) -> Var:
    parts = [_wrap(p) for p in parts]
    heights = {p.shape[0] for p in parts}
    if len(heights) != 1:
        raise DimensionError(f"concat_cols: row counts differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        return tuple(np.ascontiguousarray(g[:, bounds[i] : bounds[i + 1]]) for i in range(len(parts)))

    return _emit(np.concatenate([p.value for p in parts], axis=1), parts, backward, "concat_cols")


def sum_all(x) -> Var:
    x = _wrap(x)
    shape = x.shape
    return _emit(np.array([[x.value.sum()]]), (x,), lambda g: (np.full(shape, g[0, 0]),), "sum_all")


def squared_error_sum(pred, target) -> Var:
    """``sum((pred - target)**2)`` as a 1x1 var; ``target`` is a constant."""
    pred = _wrap(pred)
    t = as_matrix(target, "target")
    if t.shape != pred.shape:
        raise DimensionError(f"squared_error_sum: {pred.shape} vs target {t.shape}")
    diff = pred.value - t
    return _emit(np.array([[np.sum(diff * diff)]]), (pred,), lambda g: (2.0 * diff * g[0, 0],), "sq_err")


def mse_scalar(pred, target: float) -> Var:
    return squared_error_sum(pred, np.array([[float(target)]]))


# ------------------------------------------------------------ grouped ops
# A "grouped" matrix stacks G equal-height blocks vertically: rows
# [g*t, (g+1)*t) belong to group g.  These ops act independently per group.


def _groups(x: Var, groups: int, opname: str) -> int:
    rows = x.shape[0]
    if groups < 1 or rows % groups:
        raise DimensionError(f"{opname}: {rows} rows do not split into {groups} groups")
    return rows // groups


def group_matmul(a, b, groups: int) -> Var:
    """Per group ``a_g @ b_g``."""
    a, b = _wrap(a), _wrap(b)
    n = _groups(a, groups, "group_matmul")
    m = _groups(b, groups, "group_matmul")
    if a.shape[1] != m:
        raise DimensionError(f"group_matmul: blocks ({n}, {a.shape[1]}) x ({m}, {b.shape[1]})")
    p = b.shape[1]
    a3 = a.value.reshape(groups, n, m)
    b3 = b.value.reshape(groups, m, p)
    bmm = backend.kernels.bmm

    def backward(g):
        g3 = g.reshape(groups, n, p)
        ga = gb = None
        if a.requires_grad:
            ga = bmm(g3, np.ascontiguousarray(b3.transpose(0, 2, 1))).reshape(a.shape)
        if b.requires_grad:
            gb = bmm(np.ascontiguousarray(a3.transpose(0, 2, 1)), g3).reshape(b.shape)
        return ga, gb

    return _emit(bmm(a3, b3).reshape(groups * n, p), (a, b), backward, "group_matmul")


def group_matmul_nt(a, b, groups: int) -> Var:
    """Per group ``a_g @ b_g.T`` (query-key scores)."""
    a, b = _wrap(a), _wrap(b)
    n = _groups(a, groups, "group_matmul_nt")
    m = _groups(b, groups, "group_matmul_nt")
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"group_matmul_nt: widths {a.shape[1]} and {b.shape[1]} differ")
    d = a.shape[1]
    a3 = a.value.reshape(groups, n, d)
    b3 = b.value.reshape(groups, m, d)
    bmm = backend.kernels.bmm
    bt = np.ascontiguousarray(b3.transpose(0, 2, 1))

    def backward(g):
        g3 = g.reshape(groups, n, m)
        ga = gb = None
        if a.requires_grad:
            ga = bmm(g3, b3).reshape(a.shape)
        if b.requires_grad:
            gb = bmm(np.ascontiguousarray(g3.transpose(0, 2, 1)), a3).reshape(b.shape)
        return ga, gb

    return _emit(bmm(a3, bt).reshape(groups * n, m), (a, b), backward, "group_matmul_nt")


def group_concat(parts: Sequence, groups: int) -> Var:
    """Per group, stack the parts' blocks in order (token-axis concatenation)."""
    parts = [_wrap(p) for p in parts]
    heights = [_groups(p, groups, "group_concat") for p in parts]
    widths = {p.shape[1] for p in parts}
    if len(widths) != 1:
        raise DimensionError(f"group_concat: widths differ {[p.shape for p in parts]}")
    d = widths.pop()
    blocks = [p.value.reshape(groups, h, d) for p, h in zip(parts, heights)]
    bounds = np.cumsum([0] + heights)
    total = int(bounds[-1])

    def backward(g):
        g3 = g.reshape(groups, total, d)
        return tuple(
            np.ascontiguousarray(g3[:, bounds[i] : bounds[i + 1]]).reshape(-1, d)
            for i in range(len(parts))
        )

    value = np.concatenate(blocks, axis=1).reshape(groups * total, d)
    return _emit(value, parts, backward, "group_concat")


def group_mean(x, groups: int) -> Var:
    """Mean over each group's rows: (G*t, d) -> (G, d)."""
    x = _wrap(x)
    t = _groups(x, groups, "group_mean")
    d = x.shape[1]
    x3 = x.value.reshape(groups, t, d)

    def backward(g):
        return (np.repeat(g / t, t, axis=0),)

    return _emit(x3.sum(axis=1) / t, (x,), backward, "group_mean")


# ---------------------------------------------------------- initialisation


def init_uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, int]) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# --------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **kwargs) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            **kwargs,
        )


def adam_step(
    params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState
) -> list[np.ndarray]:
    """One bias-corrected Adam update; returns new parameter arrays.

    ``state`` moments and step counter are updated in place.
    """
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise DimensionError(
            f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.m)} moment slots"
        )
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise DimensionError(f"adam_step: param {i} {p.shape} vs grad {g.shape} vs state {state.m[i].shape}")
        m = b1 * state.m[i] + (1.0 - b1) * g
        v = b2 * state.v[i] + (1.0 - b2) * (g * g)
        state.m[i], state.v[i] = m, v
        out.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
    return out


class Adam:
    """Adam over a list of parameter vars."""

    def __init__(self, params: Sequence[Var], lr: float = 5e-4, **kwargs):
        self.params = list(params)
        self.state = AdamState.for_params([p.value for p in self.params], lr=lr, **kwargs)

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.value) for p in self.params]
        new = adam_step([p.value for p in self.params], grads, self.state)
        for p, value in zip(self.params, new):
            p.value = value


# ------------------------------------------------------------ grad check


def grad_check(
    f: Callable[[], Var],
    params: Sequence[Var],
    h: float = 1e-5,
    coords: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> float:
    """Max relative error between tape gradients and finite differences.

    ``f`` builds a 1x1 loss from ``params`` (reading their current values).
    The relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    With ``coords`` set, only that many random coordinates per parameter are
    perturbed.

    The stencil is central unless it crosses a relu kink (the on/off pattern
    at a perturbed point differs from the base point).  Then the coordinate
    is differenced with the second-order one-sided stencil on a side that
    stays on the base linear piece, shrinking ``h`` if neither side does.
    """
    with Tape() as tape:
        loss = f()
    tape.backward(loss, params)
    analytic = [p.grad.copy() for p in params]

    def evaluate() -> tuple[float, bytes]:
        log: list = []
        token = _KINKS.set(log)
        try:
            val = float(f().value[0, 0])
        finally:
            _KINKS.reset(token)
        if not math.isfinite(val):
            raise EvaluationError("function is not finite at a perturbed point")
        return val, b"".join(np.packbits(m).tobytes() for m in log)

    f0, pattern = evaluate()
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat_size = p.value.size
        if coords is not None and coords < flat_size:
            picks = (rng or np.random.default_rng(0)).choice(flat_size, size=coords, replace=False)
        else:
            picks = range(flat_size)
        base = p.value

        def at(r: int, c: int, delta: float) -> tuple[float, bytes]:
            bumped = base.copy()
            bumped[r, c] = base[r, c] + delta
            p.value = bumped
            try:
                return evaluate()
            finally:
                p.value = base

        for idx in picks:
            r, c = divmod(int(idx), base.shape[1])
            (up, pu), (down, pd) = at(r, c, h), at(r, c, -h)
            numeric = (up - down) / (2.0 * h)
            step = h
            while (pu != pattern or pd != pattern) and step > h * 1e-3:
                for sign in (1.0, -1.0):
                    (f1, p1), (f2, p2) = at(r, c, sign * step), at(r, c, 2 * sign * step)
                    if p1 == pattern and p2 == pattern:
                        numeric = sign * (-3.0 * f0 + 4.0 * f1 - f2) / (2.0 * step)
                        pu = pd = pattern
                        break
                else:
                    step /= 10.0
            a = ga[r, c]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst
