"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every op accepts plain arrays, python scalars or :class:`DiffTensor` inputs.
When no input is a :class:`DiffTensor` the op simply returns a numpy array,
so model code (dynamics, moment equations) can be shared between plain
simulation and differentiable ELBO construction.

A :class:`Trace` owns an append-only list of nodes; append order is a valid
topological order, which is what :func:`backward` walks in reverse.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from lfmflow.errors import ConfigError, NumericalError, ShapeError, TraceError

JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)


class Trace:
    """Append-only record of differentiable operations."""

    def __init__(self, seed: int = 0):
        self.nodes: list[DiffTensor] = []
        self.rng_seed = int(seed)
        self.rng = np.random.default_rng(self.rng_seed)

    def leaf(self, values, name: str | None = None) -> "DiffTensor":
        """Register a differentiable input on this trace."""
        return self._record(np.array(values, dtype=np.float64), (), name=name)

    def normal(self, shape) -> np.ndarray:
        """Standard-normal draw from the trace's own generator."""
        return self.rng.standard_normal(shape)

    def _record(self, values, parents, name=None) -> "DiffTensor":
        t = DiffTensor(values, self, parents, name)
        t.index = len(self.nodes)
        self.nodes.append(t)
        return t

    def release(self) -> None:
        """Drop the recorded graph; leaf values and gradients stay readable."""
        for n in self.nodes:
            n.parents = ()
        self.nodes.clear()

    @property
    def leaves(self) -> list["DiffTensor"]:
        return [n for n in self.nodes if not n.parents]


class DiffTensor:
    """A value on a :class:`Trace` together with its adjoint bookkeeping."""

    __slots__ = ("values", "trace", "parents", "grad", "index", "name")
    __array_priority__ = 1000.0

    def __init__(self, values, trace, parents=(), name=None):
        self.values = values
        self.trace = trace
        self.parents = parents  # tuple of (DiffTensor, vjp)
        self.grad = None
        self.index = -1
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def mT(self):
        return swapaxes(self, -1, -2)

    def __repr__(self):
        return f"DiffTensor(shape={self.shape}, name={self.name!r})"

    def __len__(self):
        return len(self.values)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


# ----------------------------------------------------------------------------
# plumbing


def value(x) -> np.ndarray:
    """Numeric value of a tensor, array or scalar."""
    if isinstance(x, DiffTensor):
        return x.values
    return np.asarray(x, dtype=np.float64)


def is_tensor(x) -> bool:
    return isinstance(x, DiffTensor)


def _trace_of(*xs) -> Trace | None:
    tr = None
    for x in xs:
        if isinstance(x, DiffTensor):
            if tr is None:
                tr = x.trace
            elif x.trace is not tr:
                raise TraceError("operands belong to different traces")
    return tr


def _make(out, pairs):
    """Wrap ``out`` as a traced node if any of ``pairs`` carries a tensor.

    ``pairs`` is a sequence of (input, vjp) where vjp maps the output
    adjoint to the input adjoint.
    """
    tr = _trace_of(*(p for p, _ in pairs))
    if tr is None:
        return out
    parents = tuple((p, fn) for p, fn in pairs if isinstance(p, DiffTensor))
    return tr._record(out, parents)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(a, b, fwd):
    av, bv = value(a), value(b)
    try:
        np.broadcast_shapes(av.shape, bv.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {av.shape} with {bv.shape}") from exc
    return av, bv, fwd(av, bv)


# ----------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    av, bv, out = _binary(a, b, np.add)
    return _make(out, [(a, lambda g: _unbroadcast(g, av.shape)),
                       (b, lambda g: _unbroadcast(g, bv.shape))])


def subtract(a, b):
    av, bv, out = _binary(a, b, np.subtract)
    return _make(out, [(a, lambda g: _unbroadcast(g, av.shape)),
                       (b, lambda g: _unbroadcast(-g, bv.shape))])


def multiply(a, b):
    av, bv, out = _binary(a, b, np.multiply)
    return _make(out, [(a, lambda g: _unbroadcast(g * bv, av.shape)),
                       (b, lambda g: _unbroadcast(g * av, bv.shape))])


def divide(a, b):
    av, bv, out = _binary(a, b, np.divide)
    return _make(out, [(a, lambda g: _unbroadcast(g / bv, av.shape)),
                       (b, lambda g: _unbroadcast(-g * out / bv, bv.shape))])


def negate(a):
    return _make(-value(a), [(a, lambda g: -g)])


def power(a, p: float):
    """Elementwise ``a ** p`` for a constant exponent."""
    av = value(a)
    out = av ** p
    return _make(out, [(a, lambda g: g * p * av ** (p - 1))])


def square(a):
    av = value(a)
    return _make(av * av, [(a, lambda g: 2.0 * g * av)])


def exp(a):
    out = np.exp(value(a))
    return _make(out, [(a, lambda g: g * out)])


def log(a):
    av = value(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)
    return _make(out, [(a, lambda g: g / av)])


def sqrt(a):
    out = np.sqrt(value(a))
    return _make(out, [(a, lambda g: 0.5 * g / out)])


def sin(a):
    av = value(a)
    return _make(np.sin(av), [(a, lambda g: g * np.cos(av))])


def cos(a):
    av = value(a)
    return _make(np.cos(av), [(a, lambda g: -g * np.sin(av))])


def tanh(a):
    out = np.tanh(value(a))
    return _make(out, [(a, lambda g: g * (1.0 - out * out))])


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    av = value(a)
    out = _sigmoid(np.atleast_1d(av)).reshape(av.shape)
    return _make(out, [(a, lambda g: g * out * (1.0 - out))])


def softplus(a):
    av = value(a)
    out = np.logaddexp(0.0, av)
    return _make(out, [(a, lambda g: g * _sigmoid(np.atleast_1d(av)).reshape(av.shape))])


def log_sigmoid(a):
    """``log(sigmoid(a))`` evaluated without overflow."""
    av = value(a)
    out = -np.logaddexp(0.0, -av)
    return _make(out, [(a, lambda g: g * _sigmoid(np.atleast_1d(-av)).reshape(av.shape))])


def elu(a):
    av = value(a)
    neg = np.expm1(np.minimum(av, 0.0))
    out = np.where(av > 0, av, neg)
    return _make(out, [(a, lambda g: g * np.where(av > 0, 1.0, neg + 1.0))])


# ----------------------------------------------------------------------------
# reductions and shape manipulation


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a, axis=None, keepdims=False):
    av = value(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)
    axes = _norm_axes(axis, av.ndim)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return np.broadcast_to(g, av.shape).copy()

    return _make(np.asarray(out, dtype=np.float64), [(a, vjp)])


def mean(a, axis=None, keepdims=False):
    av = value(a)
    axes = _norm_axes(axis, av.ndim)
    n = int(np.prod([av.shape[i] for i in axes])) if axes else 1
    return sum_(a, axis, keepdims) / float(n)


def reshape(a, shape):
    av = value(a)
    try:
        out = av.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {av.shape} to {shape}") from exc
    return _make(out, [(a, lambda g: g.reshape(av.shape))])


def broadcast_to(a, shape):
    av = value(a)
    try:
        out = np.broadcast_to(av, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {av.shape} to {shape}") from exc
    return _make(out, [(a, lambda g: _unbroadcast(g, av.shape))])


def transpose(a, axes=None):
    av = value(a)
    out = np.transpose(av, axes)
    inv = np.argsort(axes) if axes is not None else None
    return _make(out, [(a, lambda g: np.transpose(g, inv))])


def swapaxes(a, ax1, ax2):
    av = value(a)
    return _make(np.swapaxes(av, ax1, ax2), [(a, lambda g: np.swapaxes(g, ax1, ax2))])


def expand_dims(a, axis):
    av = value(a)
    return reshape(a, np.expand_dims(av, axis).shape)


def getitem(a, idx):
    """Basic or advanced indexing (the ``slice`` op)."""
    av = value(a)
    out = av[idx]

    def vjp(g):
        full = np.zeros_like(av)
        np.add.at(full, idx, g)
        return full

    return _make(np.array(out, dtype=np.float64), [(a, vjp)])


def concatenate(xs: Sequence, axis: int = 0):
    vals = [value(x) for x in xs]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [v.shape[ax] for v in vals])

    def piece(i):
        sl = [slice(None)] * out.ndim
        sl[ax] = slice(bounds[i], bounds[i + 1])
        return lambda g: g[tuple(sl)]

    return _make(out, [(x, piece(i)) for i, x in enumerate(xs)])


def stack(xs: Sequence, axis: int = 0):
    vals = [value(x) for x in xs]
    try:
        shape = np.broadcast_shapes(*[v.shape for v in vals])
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    parts = [expand_dims(broadcast_to(x, shape) if value(x).shape != shape else x, axis)
             for x in xs]
    return concatenate(parts, axis=axis)


# ----------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """Batched matrix product following numpy broadcasting rules."""
    av, bv = value(a), value(b)
    if av.ndim == 0 or bv.ndim == 0:
        raise ShapeError("matmul requires at least 1-D operands")
    if av.ndim == 1:
        r = matmul(reshape(a, (1, av.shape[0])), b)
        rs = value(r).shape
        return reshape(r, rs[:-2] + rs[-1:])
    if bv.ndim == 1:
        r = matmul(a, reshape(b, (bv.shape[0], 1)))
        return reshape(r, value(r).shape[:-1])
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {av.shape} @ {bv.shape}")
    try:
        out = np.matmul(av, bv)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return _make(out, [
        (a, lambda g: _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape)),
        (b, lambda g: _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape)),
    ])


def _tril_solve(L, B):
    """Solve ``L X = B`` for batched lower-triangular ``L``."""
    return np.linalg.solve(L, B)


def _chol_single(A):
    scale = max(float(np.mean(np.abs(np.diag(A)))), 1e-300)
    eye = np.eye(A.shape[-1])
    for j in JITTER_LADDER:
        try:
            return np.linalg.cholesky(A + j * scale * eye) if j else np.linalg.cholesky(A)
        except np.linalg.LinAlgError:
            continue
    raise NumericalError("matrix is not positive definite even after jitter")


def cholesky_values(A: np.ndarray) -> np.ndarray:
    """Batched Cholesky factor with a per-matrix jitter ladder.

    Jitter escalates from 1e-10 to 1e-4 (relative to the mean diagonal).
    """
    if A.shape[-1] != A.shape[-2]:
        raise ShapeError(f"cholesky needs square matrices, got {A.shape}")
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        pass
    flat = A.reshape((-1,) + A.shape[-2:])
    out = np.empty_like(flat)
    for i, m in enumerate(flat):
        out[i] = _chol_single(m)
    return out.reshape(A.shape)


def cholesky(a):
    """Lower Cholesky factor with jitter; the adjoint treats jitter as constant."""
    av = value(a)
    L = cholesky_values(av)

    def vjp(gL):
        # Phi(L^T gL) with halved diagonal, then S = L^{-T} Phi L^{-1}
        P = np.tril(np.swapaxes(L, -1, -2) @ gL)
        n = L.shape[-1]
        P[..., np.arange(n), np.arange(n)] *= 0.5
        Linv = np.linalg.inv(L)
        S = np.swapaxes(Linv, -1, -2) @ P @ Linv
        return 0.5 * (S + np.swapaxes(S, -1, -2))

    return _make(L, [(a, vjp)])


def solve_triangular(L, B):
    """``X = L^{-1} B`` using the lower triangle of ``L`` (batched)."""
    Lv, Bv = np.tril(value(L)), value(B)
    if Lv.shape[-1] != Bv.shape[-2]:
        raise ShapeError(f"solve dimensions differ: {Lv.shape} vs {Bv.shape}")
    Lb = np.broadcast_to(Lv, np.broadcast_shapes(Lv.shape[:-2], Bv.shape[:-2]) + Lv.shape[-2:])
    X = _tril_solve(Lb, np.broadcast_to(Bv, Lb.shape[:-2] + Bv.shape[-2:]))

    def vjp_b(g):
        gB = np.linalg.solve(np.swapaxes(Lb, -1, -2), g)
        return _unbroadcast(gB, Bv.shape)

    def vjp_l(g):
        gB = np.linalg.solve(np.swapaxes(Lb, -1, -2), g)
        return _unbroadcast(-np.tril(gB @ np.swapaxes(X, -1, -2)), Lv.shape)

    return _make(X, [(L, vjp_l), (B, vjp_b)])


def psd_floor(a, floor: float):
    """Project symmetric matrices onto eigenvalues >= ``floor``.

    The adjoint is the Daleckii-Krein derivative of the spectral map
    ``lambda -> max(lambda, floor)``.
    """
    av = value(a)
    w, V = np.linalg.eigh(av)
    fw = np.maximum(w, floor)
    out = (V * fw[..., None, :]) @ np.swapaxes(V, -1, -2)

    def vjp(g):
        gs = 0.5 * (g + np.swapaxes(g, -1, -2))
        inner = np.swapaxes(V, -1, -2) @ gs @ V
        dw = w[..., :, None] - w[..., None, :]
        df = fw[..., :, None] - fw[..., None, :]
        deriv = (w > floor).astype(np.float64)
        close = np.abs(dw) < 1e-12
        with np.errstate(divide="ignore", invalid="ignore"):
            F = np.where(close, 0.5 * (deriv[..., :, None] + deriv[..., None, :]), df / dw)
        return V @ (F * inner) @ np.swapaxes(V, -1, -2)

    return _make(out, [(a, vjp)])


# ----------------------------------------------------------------------------
# network layers


def causal_conv1d(x, kernel, bias, strict: bool = True):
    """1-D causal convolution over axis -2 of ``x`` (shape ``[..., T, C_in]``).

    ``kernel`` has shape ``[k, C_in, C_out]``. With ``strict`` the output at
    position ``i`` reads inputs ``i-k .. i-1``; otherwise ``i-k+1 .. i``.
    """
    xv, Wv, bv = value(x), value(kernel), value(bias)
    if Wv.ndim != 3:
        raise ShapeError(f"kernel must be [k, C_in, C_out], got {Wv.shape}")
    k, cin, cout = Wv.shape
    if k <= 0:
        raise ConfigError("kernel width must be >= 1")
    if xv.ndim < 2 or xv.shape[-1] != cin:
        raise ShapeError(f"input {xv.shape} does not match kernel {Wv.shape}")
    if bv.shape != (cout,):
        raise ShapeError(f"bias must have shape ({cout},), got {bv.shape}")
    T = xv.shape[-2]
    pad = k if strict else k - 1
    widths = [(0, 0)] * (xv.ndim - 2) + [(pad, 0), (0, 0)]
    xp = np.pad(xv, widths)
    win = sliding_window_view(xp, k, axis=-2)[..., :T, :, :]  # [..., T, C_in, k]
    # 2-D products: batched 3-D matmul is far slower in numpy
    cols = np.swapaxes(win, -1, -2).reshape(-1, k * cin)
    W2 = Wv.reshape(k * cin, cout)
    out = (cols @ W2 + bv).reshape(xv.shape[:-1] + (cout,))

    def vjp_x(g):
        gcols = (g.reshape(-1, cout) @ W2.T).reshape(xv.shape[:-1] + (k, cin))
        gxp = np.zeros(xp.shape)
        for j in range(k):
            gxp[..., j:j + T, :] += gcols[..., j, :]
        return gxp[..., pad:, :]

    def vjp_w(g):
        return (cols.T @ g.reshape(-1, cout)).reshape(Wv.shape)

    def vjp_b(g):
        return g.reshape(-1, cout).sum(axis=0)

    return _make(out, [(x, vjp_x), (kernel, vjp_w), (bias, vjp_b)])


@dataclass
class BatchNormState:
    """Running moments per (position, channel)."""

    mean: np.ndarray | None = None
    var: np.ndarray | None = None
    momentum: float = 0.9


def batch_norm(x, scale, offset, state: BatchNormState, mode: str = "train", eps: float = 1e-5):
    """Normalize over the leading (Monte Carlo sample) axis.

    In ``train`` mode the batch moments are used and ``state`` is updated;
    in ``eval`` mode the running moments are used and nothing is mutated.
    """
    xv = value(x)
    if mode == "train":
        if xv.shape[0] < 2:
            raise ConfigError("batch norm in train mode needs at least 2 samples")
        mu = mean(x, axis=0, keepdims=True)
        centred = x - mu
        var = mean(square(centred), axis=0, keepdims=True)
        bm, bvar = value(mu)[0], value(var)[0]
        if state.mean is None:
            state.mean, state.var = bm.copy(), bvar.copy()
        else:
            m = state.momentum
            state.mean = m * state.mean + (1 - m) * bm
            state.var = m * state.var + (1 - m) * bvar
        normed = centred / sqrt(var + eps)
    elif mode == "eval":
        if state.mean is None:
            rm, rv = np.zeros(xv.shape[1:]), np.ones(xv.shape[1:])
        else:
            rm, rv = state.mean, state.var
        normed = (x - rm) / np.sqrt(rv + eps)
    else:
        raise ConfigError(f"unknown batch norm mode {mode!r}")
    return normed * scale + offset


# ----------------------------------------------------------------------------
# backward pass


def backward(root: DiffTensor) -> list[np.ndarray]:
    """Accumulate gradients of scalar ``root`` into every leaf's ``grad``.

    Returns the leaf gradients in trace order.
    """
    if not isinstance(root, DiffTensor):
        raise TraceError("backward needs a traced tensor")
    if root.values.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    tr = root.trace
    adj: dict[int, np.ndarray] = {root.index: np.ones_like(root.values)}
    for node in reversed(tr.nodes[: root.index + 1]):
        g = adj.pop(node.index, None)
        if g is None:
            continue
        if not node.parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, vjp in node.parents:
            gp = vjp(g)
            prev = adj.get(parent.index)
            adj[parent.index] = gp if prev is None else prev + gp
    leaves = tr.leaves
    for leaf in leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.values)
    return [leaf.grad for leaf in leaves]


# Public op registry; every entry is gradient-checked in the test suite.
OPS: dict[str, Callable] = {
    "add": add,
    "subtract": subtract,
    "multiply": multiply,
    "divide": divide,
    "negate": negate,
    "power": power,
    "square": square,
    "matmul": matmul,
    "transpose": transpose,
    "swapaxes": swapaxes,
    "sum": sum_,
    "mean": mean,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "sin": sin,
    "cos": cos,
    "tanh": tanh,
    "softplus": softplus,
    "log_sigmoid": log_sigmoid,
    "elu": elu,
    "sigmoid": sigmoid,
    "concatenate": concatenate,
    "stack": stack,
    "getitem": getitem,
    "reshape": reshape,
    "expand_dims": expand_dims,
    "broadcast_to": broadcast_to,
    "cholesky": cholesky,
    "solve_triangular": solve_triangular,
    "psd_floor": psd_floor,
    "causal_conv1d": causal_conv1d,
    "batch_norm": batch_norm,
}
