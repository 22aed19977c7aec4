"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive is a pair of pure numpy functions (forward, vjp) registered in
``PRIMITIVES``.  Calling a primitive on tensors that live on a :class:`Tape`
appends a :class:`Node` holding the input values and attributes, so the tape can
be replayed forward or walked backward.

Reduction order: ``np.sum``/``np.matmul`` are used throughout.  For a fixed
shape and memory layout their summation order is fixed, which is what the
determinism tests rely on.  Gradient contributions to a node that is consumed
several times are accumulated in reverse tape order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """Input shapes do not fit a primitive's signature."""


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "tape", "id", "name")

    def __init__(self, data, requires_grad=False, tape=None, id=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.tape = tape
        self.id = id
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    op: str
    input_ids: tuple[int | None, ...]
    output_id: int
    inputs: tuple[np.ndarray, ...]
    output: np.ndarray
    attrs: dict[str, Any]
    needs: tuple[bool, ...]


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Node ids are assigned in creation order, so every node's inputs have
    smaller ids than its output (topological order by construction).
    """

    nodes: list[Node] = field(default_factory=list)
    leaves: dict[int, Tensor] = field(default_factory=dict)
    _next_id: int = 0

    def _new_id(self) -> int:
        i = self._next_id
        self._next_id += 1
        return i

    def leaf(self, data, requires_grad=True, name=None) -> Tensor:
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite value in input {name or ''}".strip())
        t = Tensor(arr, requires_grad=requires_grad, tape=self, id=self._new_id(), name=name)
        self.leaves[t.id] = t
        return t

    def release(self) -> None:
        """Drop recorded nodes and leaves.

        Leaves and the tape reference each other, so without this every recorded
        activation lives until the cyclic collector runs.
        """
        for leaf in self.leaves.values():
            leaf.tape = None
        self.nodes = []
        self.leaves = {}

    def replay(self) -> bool:
        """Re-run every node from its recorded inputs; True if outputs match bitwise."""
        for node in self.nodes:
            fwd = PRIMITIVES[node.op][0]
            out = fwd(*node.inputs, **node.attrs)
            if out.shape != node.output.shape or out.tobytes() != node.output.tobytes():
                return False
        return True

    def __len__(self):
        return len(self.nodes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _apply(op: str, *args, **attrs) -> Tensor:
    fwd, _ = PRIMITIVES[op]
    ins = [_as_tensor(a) for a in args]
    tapes = {id(t.tape): t.tape for t in ins if t.tape is not None}
    if len(tapes) > 1:
        raise TapeError(f"{op}: inputs come from different tapes")
    out = fwd(*(t.data for t in ins), **attrs)
    if not tapes:
        return Tensor(out)
    tape = next(iter(tapes.values()))
    needs = tuple(t.requires_grad for t in ins)
    res = Tensor(out, requires_grad=any(needs), tape=tape, id=tape._new_id())
    tape.nodes.append(
        Node(op, tuple(t.id for t in ins), res.id, tuple(t.data for t in ins), out, attrs, needs)
    )
    return res


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------------

def _broadcast_check(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def _add_f(a, b):
    _broadcast_check("add", a, b)
    return a + b


def _add_b(g, out, a, b, needs):
    return (_unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None)


def _sub_f(a, b):
    _broadcast_check("sub", a, b)
    return a - b


def _sub_b(g, out, a, b, needs):
    return (_unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(-g, b.shape) if needs[1] else None)


def _mul_f(a, b):
    _broadcast_check("mul", a, b)
    return a * b


def _mul_b(g, out, a, b, needs):
    return (_unbroadcast(g * b, a.shape) if needs[0] else None,
            _unbroadcast(g * a, b.shape) if needs[1] else None)


def _relu_f(x):
    return np.maximum(x, 0.0)


def _relu_b(g, out, x, needs):
    return (g * (x > 0),)


# -- linear algebra ------------------------------------------------------------

def _matmul_f(a, b):
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return a @ b


def _matmul_b(g, out, a, b, needs):
    ga = g @ b.T if needs[0] else None
    gb = None
    if needs[1]:
        a2 = a.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, g.shape[-1])
    return ga, gb


def _im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    """NHWC -> (N, Ho, Wo, k*k*C) patches, patch layout (dy, dx, c)."""
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    # win: (N, Ho, Wo, C, k, k) -> (N, Ho, Wo, k, k, C)
    win = win.transpose(0, 1, 2, 4, 5, 3)
    n, ho, wo = win.shape[:3]
    return win.reshape(n, ho, wo, -1)


def _conv2d_f(x, w, padding):
    if x.ndim != 4 or w.ndim != 4 or w.shape[0] != w.shape[1] or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} with kernel {w.shape}")
    k = w.shape[0]
    if x.shape[1] + 2 * padding < k or x.shape[2] + 2 * padding < k:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {x.shape}")
    cols = _im2col(x, k, padding)
    return cols @ w.reshape(-1, w.shape[3])


def _conv2d_b(g, out, x, w, needs, padding):
    k = w.shape[0]
    gx = gw = None
    if needs[0]:
        # col2im: scatter each kernel tap's contribution back onto the padded input
        n, h, wd, cin = x.shape
        ho, wo = g.shape[1], g.shape[2]
        gxp = np.zeros((n, h + 2 * padding, wd + 2 * padding, cin))
        for dy in range(k):
            for dx in range(k):
                gxp[:, dy:dy + ho, dx:dx + wo, :] += g @ w[dy, dx].T
        gx = gxp[:, padding:padding + h, padding:padding + wd, :]
    if needs[1]:
        cols = _im2col(x, k, padding)
        gw = (cols.reshape(-1, cols.shape[-1]).T @ g.reshape(-1, g.shape[-1])).reshape(w.shape)
    return gx, gw


def _avg_pool_f(x, size):
    n, h, w, c = x.shape
    if h % size or w % size:
        raise ShapeError(f"avg_pool: spatial {h}x{w} not divisible by {size}")
    return x.reshape(n, h // size, size, w // size, size, c).mean(axis=(2, 4))


def _avg_pool_b(g, out, x, needs, size):
    gx = np.repeat(np.repeat(g, size, axis=1), size, axis=2) / (size * size)
    return (gx,)


def _reshape_f(x, shape):
    try:
        return x.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: {x.shape} -> {shape}") from None


def _reshape_b(g, out, x, needs, shape):
    return (g.reshape(x.shape),)


def _pad2d_f(x, top, bottom, left, right):
    return np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)))


def _pad2d_b(g, out, x, needs, top, bottom, left, right):
    h, w = x.shape[1], x.shape[2]
    return (g[:, top:top + h, left:left + w, :],)


# -- normalization -------------------------------------------------------------

def _bn_check(x, gamma, beta, mean, var):
    c = x.shape[-1]
    for name, v in (("gamma", gamma), ("beta", beta), ("running_mean", mean), ("running_var", var)):
        if v.shape != (c,):
            raise ShapeError(f"batch_norm: {name} shape {v.shape} != ({c},)")


def _batch_norm_f(x, gamma, beta, running_mean, running_var, training, eps):
    _bn_check(x, gamma, beta, running_mean, running_var)
    if training:
        axes = tuple(range(x.ndim - 1))
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        return (x - mu) / np.sqrt(var + eps) * gamma + beta
    scale = gamma / np.sqrt(running_var + eps)
    return x * scale + (beta - running_mean * scale)


def _batch_norm_b(g, out, x, gamma, beta, running_mean, running_var, needs, training, eps):
    axes = tuple(range(x.ndim - 1))
    if training:
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv if (training or needs[1]) else None
    gx = None
    if needs[0]:
        if training:
            gxhat = g * gamma
            m = x.size // x.shape[-1]
            gx = inv / m * (m * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))
        else:
            gx = g * (gamma * inv)
    ggamma = (g * xhat).sum(axis=axes) if needs[1] else None
    gbeta = g.sum(axis=axes) if needs[2] else None
    return gx, ggamma, gbeta, None, None


def _layer_norm_f(x, gamma, beta, eps):
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} for {c} channels")
    axes = tuple(range(1, x.ndim))
    mu = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def _layer_norm_b(g, out, x, gamma, beta, needs, eps):
    axes = tuple(range(1, x.ndim))
    mu = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    red = tuple(range(x.ndim - 1))
    gx = None
    if needs[0]:
        gxhat = g * gamma
        m = x[0].size
        gx = inv / m * (m * gxhat - gxhat.sum(axis=axes, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
    ggamma = (g * xhat).sum(axis=red) if needs[1] else None
    gbeta = g.sum(axis=red) if needs[2] else None
    return gx, ggamma, gbeta


# -- softmax family and reductions ----------------------------------------------

def _log_softmax_f(x):
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _log_softmax_b(g, out, x, needs):
    return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)


def _softmax_f(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_b(g, out, x, needs):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _sum_f(x, axis):
    return np.asarray(x.sum(axis=axis))


def _sum_b(g, out, x, needs, axis):
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def _mean_f(x, axis):
    return np.asarray(x.mean(axis=axis))


def _mean_b(g, out, x, needs, axis):
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g / n, x.shape).copy(),)


def _gather_f(x, index):
    """Row-wise pick: x (..., C), index (...) of ints -> x[..., index]."""
    idx = np.asarray(index, dtype=np.int64)
    if x.ndim == 1:
        return np.asarray(x[idx])
    if idx.shape != x.shape[:-1]:
        raise ShapeError(f"gather: index shape {idx.shape} vs rows {x.shape[:-1]}")
    return np.take_along_axis(x, idx[..., None], axis=-1)[..., 0]


def _gather_b(g, out, x, needs, index):
    idx = np.asarray(index, dtype=np.int64)
    gx = np.zeros_like(x)
    if x.ndim == 1:
        np.add.at(gx, idx, g)
    else:
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
    return (gx,)


# -- bilinear resize -------------------------------------------------------------

def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) interpolation matrix, half-pixel centres, edge-clamped."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def _resize_f(x, height, width):
    ry = bilinear_matrix(x.shape[1], height)
    rx = bilinear_matrix(x.shape[2], width)
    return (ry @ x.transpose(0, 3, 1, 2) @ rx.T).transpose(0, 2, 3, 1)


def _resize_b(g, out, x, needs, height, width):
    ry = bilinear_matrix(x.shape[1], height)
    rx = bilinear_matrix(x.shape[2], width)
    return ((ry.T @ g.transpose(0, 3, 1, 2) @ rx).transpose(0, 2, 3, 1),)


PRIMITIVES: dict[str, tuple[Callable, Callable]] = {
    "add": (_add_f, _add_b),
    "sub": (_sub_f, _sub_b),
    "mul": (_mul_f, _mul_b),
    "relu": (_relu_f, _relu_b),
    "matmul": (_matmul_f, _matmul_b),
    "conv2d": (_conv2d_f, _conv2d_b),
    "avg_pool": (_avg_pool_f, _avg_pool_b),
    "reshape": (_reshape_f, _reshape_b),
    "pad2d": (_pad2d_f, _pad2d_b),
    "batch_norm": (_batch_norm_f, _batch_norm_b),
    "layer_norm": (_layer_norm_f, _layer_norm_b),
    "log_softmax": (_log_softmax_f, _log_softmax_b),
    "softmax": (_softmax_f, _softmax_b),
    "sum": (_sum_f, _sum_b),
    "mean": (_mean_f, _mean_b),
    "gather": (_gather_f, _gather_b),
    "resize": (_resize_f, _resize_b),
}


# -- public op wrappers --------------------------------------------------------------

def add(a, b): return _apply("add", a, b)
def sub(a, b): return _apply("sub", a, b)
def mul(a, b): return _apply("mul", a, b)
def relu(x): return _apply("relu", x)
def matmul(a, b): return _apply("matmul", a, b)
def avg_pool(x, size=2): return _apply("avg_pool", x, size=size)
def reshape(x, shape): return _apply("reshape", x, shape=tuple(shape))
def log_softmax(x): return _apply("log_softmax", x)
def softmax(x): return _apply("softmax", x)
def sum(x, axis=None): return _apply("sum", x, axis=axis)  # noqa: A001
def mean(x, axis=None): return _apply("mean", x, axis=axis)


def conv2d(x, w, padding=0):
    """Stride-1 convolution (cross-correlation), NHWC input, (k, k, Cin, Cout) kernel."""
    return _apply("conv2d", x, w, padding=padding)


def flatten(x):
    x = _as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def pad2d(x, top, bottom, left, right):
    return _apply("pad2d", x, top=top, bottom=bottom, left=left, right=right)


def batch_norm(x, gamma, beta, running_mean, running_var, training=False, eps=1e-5):
    return _apply("batch_norm", x, gamma, beta, running_mean, running_var,
                  training=training, eps=eps)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize each sample over all non-batch axes; per-channel affine."""
    return _apply("layer_norm", x, gamma, beta, eps=eps)


def gather(x, index):
    return _apply("gather", x, index=np.asarray(index, dtype=np.int64))


def resize_bilinear(x, height, width):
    return _apply("resize", x, height=int(height), width=int(width))


# -- evaluation and differentiation --------------------------------------------------

def forward_eval(program: Callable[..., Any], inputs: Mapping[str, Any],
                 requires_grad: bool | Sequence[str] = True):
    """Run ``program(**leaves)`` on a fresh tape.

    ``requires_grad`` is either a flag for all inputs or the names that need
    gradients.  Returns ``(outputs, tape)`` where outputs is a dict of Tensors
    (a bare Tensor result is returned under the key ``"out"``).
    """
    tape = Tape()
    leaves = {}
    for name, value in inputs.items():
        rg = requires_grad if isinstance(requires_grad, bool) else name in requires_grad
        leaves[name] = tape.leaf(value, requires_grad=rg, name=name)
    out = program(**leaves)
    if isinstance(out, Tensor):
        out = {"out": out}
    return dict(out), tape


def backward(tape: Tape, seed: Tensor) -> dict[int, np.ndarray]:
    """d(seed)/d(node) for every requires_grad node reached, keyed by node id."""
    if seed.tape is not tape or seed.id is None:
        raise TapeError("seed is not a node of this tape")
    if seed.data.size != 1:
        raise TapeError(f"seed must be scalar, got shape {seed.shape}")
    grads: dict[int, np.ndarray] = {seed.id: np.ones_like(seed.data)}
    for node in reversed(tape.nodes):
        g = grads.get(node.output_id)
        if g is None:
            continue
        vjp = PRIMITIVES[node.op][1]
        in_grads = vjp(g, node.output, *node.inputs, needs=node.needs, **node.attrs)
        for iid, need, ig in zip(node.input_ids, node.needs, in_grads):
            if not need or ig is None:
                continue
            if iid in grads:
                grads[iid] = grads[iid] + ig
            else:
                grads[iid] = ig
    out = {}
    for lid, leaf in tape.leaves.items():
        if leaf.requires_grad:
            out[lid] = grads.get(lid, np.zeros_like(leaf.data))
    for k, v in grads.items():
        out.setdefault(k, v)
    return out


def grad(seed: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Convenience: gradients of ``seed`` with respect to the given leaves."""
    g = backward(seed.tape, seed)
    return [g[t.id] if t.id in g else np.zeros_like(t.data) for t in wrt]


def finite_diff_grad(fn: Callable[[np.ndarray], float], point, h: float = 1e-4) -> np.ndarray:
    """Central differences, one coordinate at a time."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(point, dtype=np.float64)
    shape = x.shape
    flat = x.reshape(-1)
    out = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn(flat.reshape(shape)))
        flat[i] = orig - h
        fm = float(fn(flat.reshape(shape)))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite function value at coordinate {i}")
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(shape)
