"""Tape-based reverse-mode autodiff over dense float32 numpy arrays.

Every primitive records a node on the active :class:`Tape` when at least one
input requires a gradient.  Tensors are never mutated in place; optimizers
rebind ``Tensor.data`` to a fresh array, which keeps shallow copies of a
:class:`ParamStore` valid as immutable snapshots.
"""

from __future__ import annotations

import contextvars
import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping

import numpy as np

DTYPE = np.float32

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "immalab_active_tape", default=None
)


class ShapeError(ValueError):
    def __init__(self, op, *shapes):
        shapes_txt = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shapes_txt}")
        self.op = op
        self.shapes = shapes


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def leaf(data, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    forward: Callable
    backward: Callable


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager to make it the active tape for the primitives
    called inside the block.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._token = None

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.nodes)

    def replay(self):
        """Recompute every node from its recorded inputs.

        Returns the list of recomputed outputs; they match the recorded
        outputs bit for bit because the forward functions are pure.
        """
        values = {}
        out = []
        for node in self.nodes:
            args = [values.get(id(t), t.data) for t in node.inputs]
            val = node.forward(*args)
            values[id(node.output)] = val
            out.append(val)
        return out


def _record(op, inputs, out_data, forward, backward):
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    tape = _active_tape.get()
    if needs and tape is not None:
        tape.nodes.append(Node(op, tuple(inputs), out, forward, backward))
    return out


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    f = np.add
    return _record("add", (a, b), f(a.data, b.data), f, lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    f = np.subtract
    return _record("sub", (a, b), f(a.data, b.data), f, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    f = np.multiply
    ad, bd = a.data, b.data
    return _record("mul", (a, b), f(ad, bd), f, lambda g: (g * bd, g * ad))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)

    def f(x):
        return x * c

    return _record("scale", (a,), f(a.data), f, lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    f = np.matmul
    return _record("matmul", (a, b), f(ad, bd), f, lambda g: (g @ bd.T, ad.T @ g))


def affine(x, w, b) -> Tensor:
    """``x @ w + b`` with ``w`` stored as (in, out) and ``b`` as (out,)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if (
        x.data.ndim != 2
        or w.data.ndim != 2
        or b.data.ndim != 1
        or x.shape[1] != w.shape[0]
        or w.shape[1] != b.shape[0]
    ):
        raise ShapeError("affine", x.shape, w.shape, b.shape)
    xd, wd = x.data, w.data

    def f(xv, wv, bv):
        return xv @ wv + bv

    def back(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return _record("affine", (x, w, b), f(xd, wd, b.data), f, back)


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def silu(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data

    def f(x):
        return x * _sigmoid(x)

    def back(g):
        s = _sigmoid(ad)
        return (g * (s * (1.0 + ad * (1.0 - s))),)

    return _record("silu", (a,), f(ad), f, back)


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    f = np.square
    return _record("square", (a,), f(ad), f, lambda g: (g * 2.0 * ad,))


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    if n == 0:
        raise ShapeError("mean", a.shape)
    shape, dtype = a.shape, a.data.dtype

    def f(x):
        return np.asarray(x.mean(dtype=x.dtype))

    def back(g):
        return (np.full(shape, g / n, dtype=dtype),)

    return _record("mean", (a,), f(a.data), f, back)


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.data.dtype

    def f(x):
        return np.asarray(x.sum(dtype=x.dtype))

    return _record(
        "sum", (a,), f(a.data), f, lambda g: (np.full(shape, g, dtype=dtype),)
    )


def concat(tensors) -> Tensor:
    """Concatenate 2-D tensors along the last axis."""
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts or any(t.data.ndim != 2 for t in ts) or len({t.shape[0] for t in ts}) != 1:
        raise ShapeError("concat", *(t.shape for t in ts))
    widths = np.cumsum([t.shape[1] for t in ts])[:-1]

    def f(*xs):
        return np.concatenate(xs, axis=1)

    def back(g):
        return tuple(np.split(g, widths, axis=1))

    return _record("concat", ts, f(*(t.data for t in ts)), f, back)


def add_rows(x, v) -> Tensor:
    """Broadcast vector ``v`` across the rows of matrix ``x`` and add."""
    x, v = as_tensor(x), as_tensor(v)
    if x.data.ndim != 2 or v.data.ndim != 1 or x.shape[1] != v.shape[0]:
        raise ShapeError("add_rows", x.shape, v.shape)
    f = np.add
    return _record("add_rows", (x, v), f(x.data, v.data), f, lambda g: (g, g.sum(axis=0)))


def gather_rows(table, idx) -> Tensor:
    """Embedding lookup: rows ``idx`` of a 2-D ``table``."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    if table.data.ndim != 2 or idx.ndim != 1:
        raise ShapeError("gather_rows", table.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(
            f"gather_rows: index out of range for table with {table.shape[0]} rows"
        )
    shape, dtype = table.shape, table.data.dtype

    def f(t):
        return t[idx]

    def back(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _record("gather_rows", (table,), f(table.data), f, back)


def stop_gradient(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.data, requires_grad=False)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("softmax_cross_entropy", logits.shape, labels.shape)
    n = logits.shape[0]
    rows = np.arange(n)

    def f(z):
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return np.asarray(-logp[rows, labels].mean(dtype=z.dtype))

    zd = logits.data

    def back(g):
        z = zd - zd.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _record("softmax_cross_entropy", (logits,), f(zd), f, back)


# ------------------------------------------------------------------ backward


def backward(tape: Tape, loss: Tensor, wrt=None):
    """Reverse sweep over ``tape`` seeded with d(loss)/d(loss) = 1.

    ``wrt`` is a name -> Tensor mapping (e.g. a :class:`ParamStore`); the
    result maps each name to its gradient array, zeros for leaves the loss
    never reached.  Without ``wrt`` a dict keyed by ``id(tensor)`` is returned.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    grads = {id(loss): np.ones((), dtype=loss.data.dtype)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if not t.requires_grad:
                continue
            prev = grads.get(id(t))
            grads[id(t)] = gi if prev is None else prev + gi
    if wrt is None:
        return grads
    return {
        name: grads.get(id(t), np.zeros_like(t.data)).astype(t.data.dtype, copy=False)
        for name, t in wrt.items()
    }


def grad(loss_fn: Callable[[], Tensor], wrt):
    """Run ``loss_fn`` on a fresh tape; return (loss value, name -> gradient)."""
    with Tape() as tape:
        loss = loss_fn()
    return float(loss.data), backward(tape, loss, wrt)


# ---------------------------------------------------------------- ParamStore


class ParamStore(Mapping):
    """Named trainable tensors, iterated in lexicographic name order."""

    def __init__(self, arrays=None):
        self._t: dict[str, Tensor] = {}
        for name, value in (arrays or {}).items():
            self[name] = value

    def __setitem__(self, name, value):
        data = value.data if isinstance(value, Tensor) else value
        self._t[name] = Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)

    def __getitem__(self, name) -> Tensor:
        return self._t[name]

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._t))

    def __len__(self):
        return len(self._t)

    def __contains__(self, name):
        return name in self._t

    def assign(self, name, array):
        """Rebind the data of ``name`` without copying or mutating the old array."""
        t = self._t[name]
        if array.shape != t.data.shape:
            raise ShapeError(f"assign[{name}]", t.data.shape, array.shape)
        t.data = array

    def copy(self) -> "ParamStore":
        # Arrays are shared: nothing in the package writes into them in place.
        new = ParamStore()
        for name, t in self._t.items():
            new._t[name] = Tensor(t.data, requires_grad=True, name=name)
        return new

    def select(self, names) -> dict:
        return {n: self._t[n] for n in names}

    def arrays(self) -> dict:
        return {n: self._t[n].data for n in self}

    def num_params(self) -> int:
        return sum(t.data.size for t in self._t.values())

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in self:
            arr = np.ascontiguousarray(self._t[name].data, dtype="<f4")
            h.update(name.encode())
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    def equal(self, other: "ParamStore", names=None) -> bool:
        names = list(self) if names is None else list(names)
        if names == list(self) and set(self) != set(other):
            return False
        return all(
            self._t[n].data.shape == other[n].data.shape
            and np.array_equal(self._t[n].data, other[n].data)
            for n in names
        )

    def __repr__(self):
        return f"ParamStore({len(self)} tensors, {self.num_params()} floats)"


# ---------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(params, grads, state: AdamState, lr: float, maximize=False, names=None):
    """One Adam step on ``names`` (default: every key of ``grads``).

    ``params`` is any name -> Tensor mapping; tensors are rebound to new
    arrays.  ``maximize`` ascends by negating the gradient first.
    """
    if lr < 0:
        raise ValueError(f"adam_update: learning rate must be >= 0, got {lr}")
    names = list(grads) if names is None else list(names)
    missing = [n for n in names if n not in grads]
    if missing:
        raise KeyError(f"adam_update: no gradient for {missing}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for n in names:
        p = params[n]
        g = grads[n]
        if maximize:
            g = -g
        m = state.m.get(n)
        v = state.v.get(n)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[n], state.v[n] = m, v
        upd = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - lr * upd).astype(p.data.dtype, copy=False)
    return params


def sgd_update(params, grads, lr: float, names=None):
    names = list(grads) if names is None else list(names)
    for n in names:
        p = params[n]
        p.data = (p.data - lr * grads[n]).astype(p.data.dtype, copy=False)
    return params


# ------------------------------------------------------- finite differences


def finite_diff_check(loss_fn, params, step=1e-3, dtype=np.float64) -> float:
    """Worst relative error between backward and central differences.

    ``loss_fn(params)`` must build its loss from the tensors in ``params``.
    Both routes are evaluated after promoting the parameters to ``dtype``
    (float64 by default) so the check measures derivative formulas rather
    than float32 cancellation in the difference quotient.  Parameters are
    restored afterwards.
    """
    saved = {n: params[n].data for n in params}
    try:
        for n in params:
            params[n].data = saved[n].astype(dtype)
        with Tape() as tape:
            loss = loss_fn(params)
        analytic = backward(tape, as_tensor(loss), params)
        worst = 0.0
        for n in params:
            base = params[n].data
            flat = base.reshape(-1)
            for i in range(flat.size):
                bumped = flat.copy()
                bumped[i] += step
                params[n].data = bumped.reshape(base.shape)
                up = float(as_tensor(loss_fn(params)).data)
                bumped[i] -= 2 * step
                params[n].data = bumped.reshape(base.shape)
                down = float(as_tensor(loss_fn(params)).data)
                params[n].data = base
                numeric = (up - down) / (2 * step)
                a = float(analytic[n].reshape(-1)[i])
                denom = max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, abs(a - numeric) / denom)
        return worst
    finally:
        for n in params:
            params[n].data = saved[n]
