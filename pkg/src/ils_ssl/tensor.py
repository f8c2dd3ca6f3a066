"""Small tape-based reverse-mode autodiff over numpy arrays.

Every op builds a new ``Tensor`` that remembers its parents and a closure
mapping the output gradient to parent gradients.  ``backward`` replays the
tape in reverse topological order.  All math is float64.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

FP16_MAX = 65504.0


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""

    def __init__(self, op: str, a, b):
        self.op = op
        self.shapes = (tuple(a), tuple(b))
        super().__init__(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = "", name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward = _backward
        self.op = op
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    # -- operators -------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, True, tuple(parents), backward_fn, op)


def custom_op(data, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap a value computed outside the tape.  ``backward_fn(g)`` returns one grad per parent."""
    return _make(data, parents, backward_fn, op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise binary -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)), "div")


def power(a: Tensor, p: float) -> Tensor:
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "matmul")


# -- elementwise unary ---------------------------------------------------------

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sin(a: Tensor) -> Tensor:
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """tanh form of GELU; within 1e-3 of the erf form and about ten times cheaper here."""
    x = a.data
    # in-place arithmetic: these arrays are the largest in the model
    t = x * x
    t *= _GELU_A
    t += 1.0
    t *= x
    t *= _GELU_C
    np.tanh(t, out=t)
    out = t + 1.0
    out *= x
    out *= 0.5

    def bw(g):
        d = x * x
        d *= 3.0 * _GELU_A
        d += 1.0
        d *= _GELU_C
        d *= 1.0 - t * t
        d *= x
        d += 1.0
        d += t
        d *= 0.5
        d *= g
        return (d,)

    return _make(out, (a,), bw, "gelu")


# -- reductions and shape ops ------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, (a,), bw, "getitem")


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``table[index]`` along axis 0; backward scatters with bincount."""
    index = np.asarray(index)
    out = table.data[index]

    def bw(g):
        flat = g.reshape(-1, *table.shape[1:]) if table.ndim > 1 else g.reshape(-1)
        idx = index.reshape(-1)
        if table.ndim == 1:
            return (np.bincount(idx, weights=flat, minlength=table.shape[0]),)
        full = np.zeros_like(table.data)
        np.add.at(full, idx, flat)
        return (full,)

    return _make(out, (table,), bw, "take_rows")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, bw, "concat")


def pad_time(a: Tensor, left: int, right: int) -> Tensor:
    """Zero-pad axis 1 of a (B, T, C) tensor."""
    widths = [(0, 0), (left, right)] + [(0, 0)] * (a.ndim - 2)
    out = np.pad(a.data, widths)
    end = out.shape[1] - right
    return _make(out, (a,), lambda g: (g[:, left:end],), "pad")


# -- fused nn ops ------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


def layer_norm(a: Tensor, weight: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply optional affine."""
    x = a.data
    xhat = x - x.mean(axis=-1, keepdims=True)
    var = np.einsum("...i,...i->...", xhat, xhat)[..., None]
    var /= x.shape[-1]
    var += eps
    rstd = 1.0 / np.sqrt(var)
    xhat *= rstd
    parents = [a]
    out = xhat
    if weight is not None:
        if weight.shape != (x.shape[-1],):
            raise ShapeError("layer_norm", x.shape, weight.shape)
        out = out * weight.data
        parents.append(weight)
    if bias is not None:
        out = out + bias.data if out is not xhat else xhat + bias.data
        parents.append(bias)

    def bw(g):
        gx = g * weight.data if weight is not None else g.copy()
        n = x.shape[-1]
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = np.einsum("...i,...i->...", gx, xhat)[..., None]
        m2 /= n
        gx -= m1
        gx -= xhat * m2
        gx *= rstd
        grads = [gx]
        red = tuple(range(g.ndim - 1))
        if weight is not None:
            n_rows = g.size // n
            grads.append(np.einsum("ri,ri->i", g.reshape(n_rows, n), xhat.reshape(n_rows, n)))
        if bias is not None:
            grads.append(g.sum(axis=red))
        return tuple(grads)

    return _make(out, parents, bw, "layer_norm")


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, groups: int = 1) -> Tensor:
    """Valid 1-D convolution, channels last. x: (B, L, Cin), w: (Cout, Cin/groups, K) -> (B, Lout, Cout)."""
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError("conv1d", x.shape, w.shape)
    B, L, cin = x.shape
    cout, cin_g, K = w.shape
    if cin != cin_g * groups or cout % groups or L < K:
        raise ShapeError("conv1d", x.shape, w.shape)
    lout = (L - K) // stride + 1
    cout_g = cout // groups
    # windows: (B, lout, cin, K)
    win = np.lib.stride_tricks.sliding_window_view(x.data, K, axis=1)[:, ::stride][:, :lout]
    if groups == 1:
        cols = win.reshape(B, lout, cin * K)
        wm = w.data.reshape(cout, cin * K)
        out = cols @ wm.T
    else:
        cols = win.reshape(B, lout, groups, cin_g * K).transpose(0, 2, 1, 3)
        wm = w.data.reshape(groups, cout_g, cin_g * K)
        out = np.matmul(cols, np.swapaxes(wm, -1, -2)).transpose(0, 2, 1, 3).reshape(B, lout, cout)
    parents = [x, w]
    if b is not None:
        out = out + b.data
        parents.append(b)

    def bw(g):
        if groups == 1:
            g2 = g.reshape(B * lout, cout)
            gw = (g2.T @ cols.reshape(B * lout, cin * K)).reshape(cout, cin_g, K)
            gcols = (g2 @ wm).reshape(B, lout, cin, K) if x.requires_grad else None
        else:
            gg = g.reshape(B, lout, groups, cout_g).transpose(2, 3, 0, 1).reshape(groups, cout_g, B * lout)
            gw = np.matmul(gg, cols.transpose(1, 0, 2, 3).reshape(groups, B * lout, cin_g * K)).reshape(cout, cin_g, K)
            gcols = None
            if x.requires_grad:
                gcols = np.matmul(np.swapaxes(gg, -1, -2), wm)  # (groups, B*lout, cin_g*K)
                gcols = gcols.reshape(groups, B, lout, cin_g, K).transpose(1, 2, 0, 3, 4).reshape(B, lout, cin, K)
        gx = None
        if gcols is not None:
            # the input waveform needs no gradient, which saves this scatter on the first layer
            gx = np.zeros_like(x.data)
            span = stride * (lout - 1) + 1
            for k in range(K):
                gx[:, k:k + span:stride] += gcols[..., k]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 1)))
        return tuple(grads)

    return _make(out, parents, bw, "conv1d")


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 0.0) -> Tensor:
    """Cosine similarity over the last axis with broadcasting of leading axes.

    a: (..., D), b: (C, D) -> (..., C).  Zero-norm vectors raise.
    """
    na = np.sqrt((a.data * a.data).sum(-1, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(-1, keepdims=True))
    if np.any(na <= eps) or np.any(nb <= eps):
        raise ValueError("cosine_similarity: zero-norm vector, similarity undefined")
    au = a.data / na
    bu = b.data / nb
    out = au @ bu.T

    def bw(g):
        # d/da of (a/|a|).bu = (bu - au (au.bu)) / |a|
        gau = g @ bu
        ga = (gau - au * (gau * au).sum(-1, keepdims=True)) / na
        gbu = np.tensordot(g, au, axes=(tuple(range(g.ndim - 1)), tuple(range(au.ndim - 1))))
        gb = (gbu - bu * (gbu * bu).sum(-1, keepdims=True)) / nb
        return ga, gb

    return _make(out, (a, b), bw, "cosine_similarity")


# -- backward -----------------------------------------------------------------

def _topo(root: Tensor) -> list[Tensor]:
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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Leaves listed in ``params`` that are unreachable get a zero gradient.
    Gradients accumulate into existing ``.grad`` buffers.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if not p.requires_grad or pg is None:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


def finite_difference_grad(f: Callable[[], float], p: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` w.r.t. ``p`` (perturbed in place)."""
    if step <= 0:
        raise ValueError("step must be positive")
    flat = p.data.reshape(-1)
    out = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f())
        flat[i] = orig - step
        fm = float(f())
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * step)
    return out.reshape(p.shape)


def fp16_round(x) -> np.ndarray:
    """Round to the nearest IEEE half-precision value, returned as float64.

    Magnitudes past the half-precision range saturate to signed infinity.
    """
    with np.errstate(over="ignore"):
        return np.asarray(x, dtype=np.float64).astype(np.float16).astype(np.float64)
