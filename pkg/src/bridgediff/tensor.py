"""Dense N-D arrays with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a contiguous row-major NumPy array (f32 or f64).
Operations record a dynamic graph of closures; :func:`backward` walks it in
reverse topological order and accumulates gradients into every leaf that
has ``requires_grad`` set. Every forward op validates that its result is
finite and raises :class:`NonFiniteError` otherwise.

Broadcasting in the elementwise ops is deliberately restricted to scalars
and equal shapes; shape-changing broadcasts go through the explicit
:func:`broadcast_to` op so every gradient reduction is visible.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

__all__ = [
    "Tensor", "TensorError", "ShapeError", "NonFiniteError", "GraphError",
    "tensor", "constant", "no_grad",
    "add", "sub", "mul", "div", "neg", "scale", "silu", "exp", "log", "sqrt",
    "power", "reshape", "transpose", "concat", "broadcast_to", "tsum", "tmean",
    "matmul", "softmax", "attention", "conv2d", "bilinear_resize",
    "avg_pool2", "upsample_nearest2", "backward", "grad_check",
]

DTYPES = {"f32": np.float32, "f64": np.float64}
_DTYPE_CODES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}

_node_ids = itertools.count(1)
_grad_enabled = True


class TensorError(Exception):
    pass


class ShapeError(TensorError):
    pass


class NonFiniteError(TensorError):
    pass


class GraphError(TensorError):
    pass


class no_grad:
    """Context manager that suspends graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev


def _as_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        if dtype not in DTYPES:
            raise TensorError(f"unsupported dtype {dtype!r}")
        return np.dtype(DTYPES[dtype])
    d = np.dtype(dtype)
    if d not in _DTYPE_CODES:
        raise TensorError(f"unsupported dtype {d}")
    return d


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "_parents", "_backward", "_op")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        if isinstance(data, Tensor):
            raise TensorError("wrap raw arrays, not Tensors")
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(_as_dtype(dtype), copy=False)
        elif arr.dtype not in _DTYPE_CODES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id = next(_node_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def dtype_code(self) -> str:
        return _DTYPE_CODES[self.data.dtype]

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        return t

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype_code}, op={self._op})"

    # operator sugar; scalars only, per the elementwise contract
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(constant(np.full(self.shape, other, dtype=self.dtype)), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


def tensor(data, dtype="f32", requires_grad=False) -> Tensor:
    return Tensor(data, dtype=dtype, requires_grad=requires_grad)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype, requires_grad=False)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {op}")


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray], None] | None) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(data)
    out.grad = None
    out.node_id = next(_node_ids)
    out._op = op
    record = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = record
    if record:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _coerce_pair(a, b, op: str):
    """Apply the elementwise contract: tensor-tensor requires equal shapes
    and dtypes; python scalars are promoted to the tensor's dtype."""
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
        if a.dtype != b.dtype:
            raise TensorError(f"{op}: dtype mismatch {a.dtype_code} vs {b.dtype_code}")
        return a, b, None
    if isinstance(a, Tensor):
        return a, None, a.dtype.type(b)
    raise TensorError(f"{op}: first operand must be a Tensor")


def add(a: Tensor, b) -> Tensor:
    a, bt, s = _coerce_pair(a, b, "add")
    if bt is None:
        def back(g, a=a):
            if a.requires_grad:
                _accum(a, g)
        return _make(a.data + s, "add", (a,), back)

    def back(g, a=a, bt=bt):
        if a.requires_grad:
            _accum(a, g)
        if bt.requires_grad:
            _accum(bt, g)
    return _make(a.data + bt.data, "add", (a, bt), back)


def sub(a: Tensor, b) -> Tensor:
    a, bt, s = _coerce_pair(a, b, "sub")
    if bt is None:
        def back(g, a=a):
            if a.requires_grad:
                _accum(a, g)
        return _make(a.data - s, "sub", (a,), back)

    def back(g, a=a, bt=bt):
        if a.requires_grad:
            _accum(a, g)
        if bt.requires_grad:
            _accum(bt, -g)
    return _make(a.data - bt.data, "sub", (a, bt), back)


def mul(a: Tensor, b) -> Tensor:
    a, bt, s = _coerce_pair(a, b, "mul")
    if bt is None:
        def back(g, a=a, s=s):
            if a.requires_grad:
                _accum(a, g * s)
        return _make(a.data * s, "mul", (a,), back)

    def back(g, a=a, bt=bt):
        if a.requires_grad:
            _accum(a, g * bt.data)
        if bt.requires_grad:
            _accum(bt, g * a.data)
    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data * bt.data
    return _make(out, "mul", (a, bt), back)


def div(a: Tensor, b) -> Tensor:
    a, bt, s = _coerce_pair(a, b, "div")
    if bt is None:
        return mul(a, 1.0 / s)

    def back(g, a=a, bt=bt):
        if a.requires_grad:
            _accum(a, g / bt.data)
        if bt.requires_grad:
            _accum(bt, -g * a.data / (bt.data * bt.data))
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out = a.data / bt.data
    return _make(out, "div", (a, bt), back)


def neg(a: Tensor) -> Tensor:
    return mul(a, -1.0)


def scale(a: Tensor, s: float) -> Tensor:
    return mul(a, s)


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    with np.errstate(over="ignore"):  # exp(-x) -> inf is fine: sigmoid -> 0
        sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig

    def back(g, a=a, sig=sig):
        if a.requires_grad:
            _accum(a, g * (sig * (1.0 + a.data * (1.0 - sig))))
    return _make(out, "silu", (a,), back)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        e = np.exp(a.data)

    def back(g, a=a, e=e):
        if a.requires_grad:
            _accum(a, g * e)
    return _make(e, "exp", (a,), back)


def log(a: Tensor) -> Tensor:
    def back(g, a=a):
        if a.requires_grad:
            _accum(a, g / a.data)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(a.data)
    return _make(out, "log", (a,), back)


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        r = np.sqrt(a.data)

    def back(g, a=a, r=r):
        if a.requires_grad:
            _accum(a, g * (0.5 / r))
    return _make(r, "sqrt", (a,), back)


def power(a: Tensor, p: float) -> Tensor:
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.power(a.data, p)

    def back(g, a=a, p=p):
        if a.requires_grad:
            _accum(a, g * p * np.power(a.data, p - 1))
    return _make(out, "power", (a,), back)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)

    def back(g, a=a):
        if a.requires_grad:
            _accum(a, g.reshape(a.shape))
    return _make(a.data.reshape(shape), "reshape", (a,), back)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def back(g, a=a, inv=inv):
        if a.requires_grad:
            _accum(a, np.ascontiguousarray(g.transpose(inv)))
    return _make(a.data.transpose(axes), "transpose", (a,), back)


def concat(parts: Iterable[Tensor], axis: int) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of no tensors")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g, parts=parts, offsets=offsets, axis=axis):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(p, np.ascontiguousarray(g[tuple(idx)]))
    return _make(np.concatenate([p.data for p in parts], axis=axis), "concat", parts, back)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape)

    def back(g, a=a, shape=shape):
        if not a.requires_grad:
            return
        extra = len(shape) - a.data.ndim
        g = g.sum(axis=tuple(range(extra))) if extra else g
        keep = tuple(i for i, d in enumerate(a.shape) if d == 1 and g.shape[i] != 1)
        if keep:
            g = g.sum(axis=keep, keepdims=True)
        _accum(a, g)
    return _make(out.copy(), "broadcast_to", (a,), back)


def _axis_tuple(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = _axis_tuple(axis, a.data.ndim)
    out = a.data.sum(axis=ax, keepdims=keepdims)

    def back(g, a=a, ax=ax, keepdims=keepdims):
        if not a.requires_grad:
            return
        if ax is None:
            _accum(a, np.full_like(a.data, g if np.isscalar(g) else g.reshape(())))
            return
        if not keepdims:
            g = np.expand_dims(g, ax)
        _accum(a, np.broadcast_to(g, a.shape).copy())
    return _make(np.asarray(out), "sum", (a,), back)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = _axis_tuple(axis, a.data.ndim)
    count = a.data.size if ax is None else int(np.prod([a.shape[i] for i in ax]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D or batched 3-D matrix product; batch dims must match exactly,
    except that a 2-D right operand is allowed against a batched left one
    (shared weights)."""
    if a.dtype != b.dtype:
        raise TensorError("matmul: dtype mismatch")
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dims {ad.shape} @ {bd.shape}")
    if ad.ndim == 3 and bd.ndim == 3 and ad.shape[0] != bd.shape[0]:
        raise ShapeError("matmul: batch mismatch")
    out = ad @ bd

    def back(g, a=a, b=b):
        ad, bd = a.data, b.data
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
            _accum(a, ga)
        if b.requires_grad:
            gb = np.swapaxes(ad, -1, -2) @ g
            if bd.ndim < gb.ndim:
                gb = gb.sum(axis=tuple(range(gb.ndim - bd.ndim)))
            _accum(b, gb)
    return _make(out, "matmul", (a, b), back)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax built from primitive ops (the shift by the
    detached max has zero gradient)."""
    m = constant(np.broadcast_to(a.data.max(axis=axis, keepdims=True), a.shape).copy())
    e = exp(sub(a, m))
    denom = tsum(e, axis=axis, keepdims=True)
    return div(e, broadcast_to(denom, a.shape))


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention over (batch, tokens, dim) inputs."""
    if q.data.ndim != 3 or k.data.ndim != 3 or v.data.ndim != 3:
        raise ShapeError("attention expects (batch, tokens, dim) inputs")
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[1] != v.shape[1]:
        raise ShapeError("attention: key/value token counts differ")
    scores = scale(matmul(q, transpose(k, (0, 2, 1))), 1.0 / math.sqrt(q.shape[-1]))
    return matmul(softmax(scores, axis=-1), v)


def conv2d(x: Tensor, w: Tensor, b: Tensor, pad: int = 0) -> Tensor:
    """2-D cross-correlation, stride 1, kernel 1x1 or 3x3, pad 0 or 1."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and OIHW weight")
    kh, kw = w.shape[2], w.shape[3]
    if (kh, kw) not in ((1, 1), (3, 3)):
        raise ShapeError(f"unsupported kernel size {kh}x{kw}")
    if pad not in (0, 1):
        raise ShapeError(f"unsupported pad {pad}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, weight expects {w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ShapeError("conv2d: bias must have one entry per output channel")
    if x.dtype != w.dtype or x.dtype != b.dtype:
        raise TensorError("conv2d: dtype mismatch")
    out = kernels.conv2d_forward(x.data, w.data, b.data, pad)

    def back(g, x=x, w=w, b=b, pad=pad, kh=kh, kw=kw):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            _accum(x, kernels.conv2d_grad_input(g, w.data, pad))
        if w.requires_grad:
            _accum(w, kernels.conv2d_grad_weight(x.data, g, pad, kh, kw))
        if b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))
    return _make(out, "conv2d", (x, w, b), back)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Align-corners bilinear resize of an NCHW tensor."""
    if x.data.ndim != 4:
        raise ShapeError("bilinear_resize expects NCHW input")
    if x.data.size == 0:
        raise ShapeError("bilinear_resize of empty tensor")
    if out_h < 1 or out_w < 1:
        raise ShapeError("target dims must be >= 1")
    ih, iw = x.shape[2], x.shape[3]
    out = kernels.bilinear_forward(x.data, out_h, out_w)

    def back(g, x=x, ih=ih, iw=iw):
        if x.requires_grad:
            _accum(x, kernels.bilinear_grad_input(np.ascontiguousarray(g), ih, iw))
    return _make(out, "bilinear_resize", (x,), back)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling (stride 2); spatial dims must be even."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def back(g, x=x, h=h, w=w):
        if x.requires_grad:
            up = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
            _accum(x, 0.25 * up)
    return _make(out, "avg_pool2", (x,), back)


def upsample_nearest2(x: Tensor) -> Tensor:
    """2x nearest-neighbor upsampling."""
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def back(g, x=x):
        if x.requires_grad:
            n, c, h, w = x.shape
            _accum(x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))
    return _make(out, "upsample_nearest2", (x,), back)


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a recorded scalar loss.

    Returns a map from every reachable ``requires_grad`` leaf to its
    gradient (also accumulated into ``leaf.grad``). The traversed graph is
    released afterwards.
    """
    if loss.data.size != 1:
        raise GraphError("backward requires a scalar loss")
    if not loss._parents:
        raise GraphError("loss is not connected to a recorded graph")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.node_id not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)

    grads: dict[Tensor, np.ndarray] = {}
    for node in topo:
        if node._parents:  # interior: release graph and buffers
            node._parents = ()
            node._backward = None
            node.grad = None
        elif node.requires_grad and node.grad is not None:
            grads[node] = node.grad
    return grads


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor],
               eps: float = 1e-5, max_coords: int = 8, rng=None) -> float:
    """Max relative error between reverse-mode and central-difference
    gradients of a deterministic scalar function.

    ``f`` is re-evaluated with perturbed parameter entries; up to
    ``max_coords`` coordinates per parameter are probed (all of them when the
    parameter is small). Disagreement between two unperturbed evaluations of
    ``f`` means the function is not deterministic and is an error.
    """
    v1 = f()
    v2 = f()
    if v1.item() != v2.item():
        raise GraphError("grad_check: function is not deterministic")
    for p in params:
        p.grad = None
    grads = backward(f())
    ad = {p: grads.get(p, np.zeros_like(p.data)) for p in params}

    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        n = flat.size
        if n <= max_coords:
            coords = range(n)
        elif rng is not None:
            coords = sorted(set(int(i) for i in rng.integers(0, n, size=max_coords)))
        else:
            coords = range(0, n, max(1, n // max_coords))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            dn = f().item()
            flat[i] = orig
            fd = (up - dn) / (2 * eps)
            g = float(ad[p].reshape(-1)[i])
            err = abs(g - fd) / max(abs(g), abs(fd), 1e-8)
            worst = max(worst, err)
    return worst
