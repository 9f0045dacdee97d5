"""A small reverse-mode autodiff core on top of numpy.

Every operation records its parents and a vector-Jacobian closure on the
output tensor; ``backward`` walks the recorded graph in reverse topological
order. Only tensors created with ``requires_grad=True`` (or derived from one)
are recorded, so frozen weights cost nothing on the tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
DEFAULT_LR = 0.01


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None = None

    @classmethod
    def param(cls, data, name: str) -> "Tensor":
        return cls(np.array(data, dtype=np.float64), requires_grad=True, name=name)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (undo numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def square(a) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    y = a.data * s
    return _result(y, (a,), lambda g: (g * (s + y * (1.0 - s)),))


# --- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(np.matmul(a.data, b.data), (a, b), vjp)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    return _result(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([p.data for p in parts], axis=axis), parts, vjp)


def gather_rows(table, index) -> Tensor:
    """``table[index]`` for an integer index array of any shape."""
    table = as_tensor(table)
    index = np.asarray(index, dtype=np.int64)

    def vjp(g):
        out = np.zeros_like(table.data)
        np.add.at(out, index, g)
        return (out,)

    return _result(table.data[index], (table,), vjp)


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return _result(
        np.asarray(a.data.sum() / n),
        (a,),
        lambda g: (np.full(a.shape, float(g) / n),),
    )


def mse(pred, target) -> Tensor:
    """Mean over the leading axes of the squared error summed over the last axis."""
    pred, target = as_tensor(pred), as_tensor(target)
    diff = sub(pred, target)
    per_row = sum_last(square(diff))
    return mean_all(per_row)


def sum_last(a) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.sum(axis=-1), (a,), lambda g: (np.broadcast_to(g[..., None], a.shape).copy(),))


# --- attention primitives ------------------------------------------------------

def softmax_rows(m) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting the row max."""
    m = as_tensor(m)
    if m.ndim < 2:
        raise ShapeError(f"softmax_rows expects a rank-2 (or batched) input, got shape {m.shape}")
    shifted = m.data - m.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (m,), vjp)


def attend(maps, values) -> Tensor:
    """Return ``sum_k maps[..., :, k] (outer) values[..., k, :]``.

    The sum runs term by term in token order, so the result is bitwise equal
    to any scalar evaluation that accumulates the same products in the same
    order.
    """
    maps, values = as_tensor(maps), as_tensor(values)
    if maps.shape[-1] != values.shape[-2]:
        raise ShapeError(f"map has {maps.shape[-1]} token columns but values have {values.shape[-2]} rows")
    m, v = maps.data, values.data
    out = m[..., :, 0:1] * v[..., 0:1, :]
    for k in range(1, m.shape[-1]):
        out = out + m[..., :, k : k + 1] * v[..., k : k + 1, :]

    def vjp(g):
        gm = np.matmul(g, np.swapaxes(v, -1, -2))
        gv = np.matmul(np.swapaxes(m, -1, -2), g)
        return _unbroadcast(gm, maps.shape), _unbroadcast(gv, values.shape)

    return _result(out, (maps, values), vjp)


def add_rows(v, rows: Sequence[int], deltas, where: np.ndarray | None = None) -> Tensor:
    """Add ``deltas[j]`` to row ``rows[j]`` (axis -2) of ``v``.

    ``where`` optionally restricts the update to a boolean subset of the
    leading batch axis. Every other entry is copied untouched.
    """
    v, deltas = as_tensor(v), as_tensor(deltas)
    rows = list(rows)
    if not rows:
        return v
    if deltas.shape != (len(rows), v.shape[-1]):
        raise ShapeError(f"deltas shape {deltas.shape} does not match {len(rows)} rows of width {v.shape[-1]}")
    if where is not None and (v.ndim < 3 or np.shape(where) != v.shape[:1]):
        raise ShapeError("row mask must select along the leading batch axis")
    out = v.data.copy()
    for j, r in enumerate(rows):
        if where is None:
            out[..., r, :] += deltas.data[j]
        else:
            out[where, ..., r, :] += deltas.data[j]

    def vjp(g):
        picked = g if where is None else g[np.asarray(where, dtype=bool)]
        gd = np.stack([picked[..., r, :].reshape(-1, g.shape[-1]).sum(axis=0) for r in rows])
        return g, gd

    return _result(out, (v, deltas), vjp)


# --- gradients ------------------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor] | Sequence[Tensor] | None = None) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar ``loss``.

    With ``params`` given, the result has exactly one entry per parameter;
    parameters the loss does not depend on get zeros. Without ``params``,
    every named leaf reachable from ``loss`` is reported.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    order = _topological(loss) if loss.requires_grad else []
    if order:
        grads[id(loss)] = np.ones_like(loss.data)
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg

    if params is None:
        named = {n.name: n for n in order if n._vjp is None and n.name is not None}
    elif isinstance(params, Mapping):
        named = dict(params)
    else:
        if any(t.name is None for t in params):
            raise ContractError("gradient requested for an unnamed tensor")
        named = {t.name: t for t in params}
    return {
        name: np.array(grads.get(id(t), np.zeros_like(t.data)), dtype=np.float64).reshape(t.shape)
        for name, t in named.items()
    }


def finite_diff_grad(f: Callable[[dict[str, np.ndarray]], float], params: Mapping[str, np.ndarray], h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``f`` at ``params``, one coordinate at a time."""
    if not h > 0:
        raise ContractError(f"step size must be positive, got {h}")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def evaluate(p) -> float:
        val = f(p)
        val = val.item() if isinstance(val, Tensor) else float(val)
        if not math.isfinite(val):
            raise NumericError("objective evaluated to a non-finite value")
        return val

    out: dict[str, np.ndarray] = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = evaluate(base)
            flat[i] = orig - h
            fm = evaluate(base)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        out[name] = g
    return out


# --- optimisation -----------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def fresh(cls, params: Mapping[str, np.ndarray]) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()},
            v={k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()},
            step=0,
        )


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: float = DEFAULT_LR,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One Adam update with bias correction. Inputs are not mutated."""
    if not lr > 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    missing = [k for k in params if k not in grads]
    if missing:
        raise ContractError(f"missing gradient for parameters: {missing}")
    step = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != np.shape(p):
            raise ShapeError(f"gradient for {k!r} has shape {g.shape}, parameter has {np.shape(p)}")
        m = state.m.get(k, np.zeros_like(g))
        v = state.v.get(k, np.zeros_like(g))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        new_m[k], new_v[k] = m, v
        new_params[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return new_params, OptimizerState(m=new_m, v=new_v, step=step)
