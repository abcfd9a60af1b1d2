"""Reverse-mode differentiation, the score network and Adam.

Nodes hold numpy arrays rather than single scalars so a whole batch of
event pairs costs a handful of tape entries. Every op also accepts plain
ndarrays, in which case it just returns the numpy result: model code is
written once and runs either with or without a tape.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    def __init__(self, index, op):
        super().__init__(f"non-finite value at tape node {index} ({op})")
        self.index = index
        self.op = op


class Tape:
    """Ordered record of operations; creation order is a topological order."""

    def __init__(self, check_finite=True):
        self.nodes = []
        self.check_finite = check_finite

    def variable(self, value):
        return self._push(np.asarray(value, dtype=np.float64), (), "input")

    def _push(self, value, parents, op):
        node = Var(self, value, parents, op, len(self.nodes))
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError(node.index, op)
        self.nodes.append(node)
        return node

    def backward(self, output):
        if output.tape is not self:
            raise ValueError("output was recorded on a different tape")
        if output.value.size != 1:
            raise ValueError("backward needs a scalar output")
        for node in self.nodes:
            node.adjoint = None
        output.adjoint = np.ones_like(output.value)
        for node in reversed(self.nodes[: output.index + 1]):
            if node.adjoint is None:
                continue
            for parent, vjp in node.parents:
                contrib = vjp(node.adjoint)
                parent.adjoint = contrib if parent.adjoint is None else parent.adjoint + contrib
            if node.parents:
                node.adjoint = None  # interior adjoints are not needed once propagated

    def release(self):
        """Drop node references; nodes and tape form cycles that hold large arrays."""
        for node in self.nodes:
            node.parents = ()
            node.tape = None
        self.nodes = []


class Var:
    __slots__ = ("tape", "value", "parents", "op", "index", "adjoint")
    # make numpy defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, tape, value, parents, op, index):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.op = op
        self.index = index
        self.adjoint = None

    @property
    def shape(self):
        return self.value.shape

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var({self.op}#{self.index}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)


def value_of(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _record(value, op, *links):
    tape = _tape_of(*(x for x, _ in links))
    if tape is None:
        return value
    parents = tuple((x, fn) for x, fn in links if isinstance(x, Var))
    return tape._push(value, parents, op)


# elementwise primitives -------------------------------------------------------

def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    return _record(out, "add",
                   (a, lambda g: _unbroadcast(g, av.shape)),
                   (b, lambda g: _unbroadcast(g, bv.shape)))


def neg(a):
    return _record(-value_of(a), "neg", (a, lambda g: -g))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    return _record(av * bv, "mul",
                   (a, lambda g: _unbroadcast(g * bv, av.shape)),
                   (b, lambda g: _unbroadcast(g * av, bv.shape)))


def div(a, b):
    av, bv = value_of(a), value_of(b)
    out = av / bv
    return _record(out, "div",
                   (a, lambda g: _unbroadcast(g / bv, av.shape)),
                   (b, lambda g: _unbroadcast(-g * out / bv, bv.shape)))


def exp(a):
    out = np.exp(value_of(a))
    return _record(out, "exp", (a, lambda g: g * out))


def log(a):
    av = value_of(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)
    return _record(out, "log", (a, lambda g: g / av))


def tanh(a):
    out = np.tanh(value_of(a))
    return _record(out, "tanh", (a, lambda g: g * (1.0 - out * out)))


def softplus(a):
    av = value_of(a)
    return _record(np.logaddexp(0.0, av), "softplus", (a, lambda g: g * expit(av)))


def maximum(a, b):
    av, bv = value_of(a), value_of(b)
    pick_a = av >= bv
    return _record(np.maximum(av, bv), "max",
                   (a, lambda g: _unbroadcast(g * pick_a, av.shape)),
                   (b, lambda g: _unbroadcast(g * ~pick_a, bv.shape)))


# structural ops ---------------------------------------------------------------

def matmul(a, b):
    av, bv = value_of(a), value_of(b)

    def grad_a(g):
        if bv.ndim == 1:
            return np.multiply.outer(g, bv) if av.ndim == 2 else g * bv
        return g @ bv.T if av.ndim == 2 else bv @ g

    def grad_b(g):
        if av.ndim == 1:
            return np.multiply.outer(av, g) if bv.ndim == 2 else g * av
        return av.T @ g if bv.ndim == 2 else g @ av

    return _record(av @ bv, "matmul", (a, grad_a), (b, grad_b))


def reduce_sum(a, axis=None):
    av = value_of(a)

    def grad(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, av.shape).copy()

    return _record(np.sum(av, axis=axis), "sum", (a, grad))


def getitem(a, idx):
    av = value_of(a)

    def grad(g):
        out = np.zeros_like(av)
        np.add.at(out, idx, g)
        return out

    return _record(av[idx], "getitem", (a, grad))


def _scatter_add(segments, values, n):
    if values.ndim == 1:
        return np.bincount(segments, weights=values, minlength=n)
    if values.ndim == 2:
        cols = [np.bincount(segments, weights=values[:, j], minlength=n) for j in range(values.shape[1])]
        return np.stack(cols, axis=1) if cols else np.zeros((n, 0))
    out = np.zeros((n,) + values.shape[1:])
    np.add.at(out, segments, values)
    return out


def take(a, indices):
    """Gather rows ``a[indices]`` along axis 0."""
    indices = np.asarray(indices, dtype=np.intp)
    av = value_of(a)
    return _record(av[indices], "take", (a, lambda g: _scatter_add(indices, g, av.shape[0])))


def segment_sum(a, segments, n_segments):
    """Sum rows of ``a`` into ``n_segments`` buckets given by ``segments``."""
    segments = np.asarray(segments, dtype=np.intp)
    av = value_of(a)
    out = _scatter_add(segments, av, n_segments)
    return _record(out, "segment_sum", (a, lambda g: g[segments]))


def reshape(a, shape):
    av = value_of(a)
    return _record(av.reshape(shape), "reshape", (a, lambda g: g.reshape(av.shape)))


def concat(items, axis=0):
    values = [value_of(x) for x in items]
    out = np.concatenate(values, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]
    links = []
    for i, x in enumerate(items):
        links.append((x, lambda g, i=i: np.split(g, bounds, axis=axis)[i]))
    return _record(out, "concat", *links)


# gradient driver --------------------------------------------------------------

def gradient(fn, params, check_finite=True):
    """Evaluate ``fn(vars)`` on a fresh tape and return (value, grads).

    ``params`` maps names to arrays; ``grads`` has the same keys.
    """
    tape = Tape(check_finite=check_finite)
    leaves = {name: tape.variable(v) for name, v in params.items()}
    try:
        out = fn(leaves)
        if not isinstance(out, Var):
            # loss did not depend on any parameter
            return float(out), {k: np.zeros_like(np.asarray(v, dtype=float)) for k, v in params.items()}
        tape.backward(out)
        grads = {}
        for name, leaf in leaves.items():
            grads[name] = (np.zeros_like(leaf.value) if leaf.adjoint is None
                           else leaf.adjoint.reshape(leaf.value.shape))
        return float(out.value), grads
    finally:
        tape.release()


# score network ----------------------------------------------------------------

def init_mlp(rng, n_in, hidden=32, prefix=""):
    """Glorot-uniform weights, zero biases, for in -> hidden -> hidden -> 1."""
    shapes = [(n_in, hidden), (hidden, hidden), (hidden, 1)]
    out = {}
    for i, (fan_in, fan_out) in enumerate(shapes, start=1):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        out[f"{prefix}W{i}"] = rng.uniform(-a, a, size=(fan_in, fan_out))
        out[f"{prefix}b{i}"] = np.zeros(fan_out)
    return out


def mlp_forward(theta, x, prefix=""):
    """Positive scalar output per input row: softplus(tanh(tanh(x W1) W2) W3)."""
    xv = value_of(x)
    if xv.ndim == 1:
        x = reshape(x, (1, -1)) if isinstance(x, Var) else xv[None, :]
        return mlp_forward(theta, x, prefix)[0]
    n_in = value_of(theta[f"{prefix}W1"]).shape[0]
    if xv.shape[1] != n_in:
        raise ValueError(f"input dimension {xv.shape[1]} does not match network input {n_in}")
    h = tanh(matmul(x, theta[f"{prefix}W1"]) + theta[f"{prefix}b1"])
    h = tanh(matmul(h, theta[f"{prefix}W2"]) + theta[f"{prefix}b2"])
    z = matmul(h, theta[f"{prefix}W3"]) + theta[f"{prefix}b3"]
    out = softplus(z)
    return reshape(out, (-1,)) if isinstance(out, Var) else out.reshape(-1)


# optimizer --------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """One bias-corrected Adam update. Returns new params; ``state`` is advanced in place."""
    if set(grads) != set(params):
        raise ValueError("gradient keys do not match parameter keys")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    new = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != np.shape(p):
            raise ValueError(f"shape mismatch for {name}: {g.shape} vs {np.shape(p)}")
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        new[name] = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return new


def clip_by_global_norm(grads, max_norm):
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm



# checkpoints ------------------------------------------------------------------

def save_checkpoint(path, arrays, config=None):
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": config or {},
        "params": {
            name: {"shape": list(np.shape(a)), "data": np.asarray(a, dtype=float).ravel().tolist()}
            for name, a in sorted(arrays.items())
        },
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n")


def load_checkpoint(path):
    payload = json.loads(Path(path).read_text())
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    arrays = {
        name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in payload["params"].items()
    }
    return arrays, payload.get("config", {})
