"""Minimal dense-array reverse-mode autodiff.

A Tensor wraps one numpy float array. Ops record a backward closure and their
parents on the result; the graph is rebuilt on every forward pass (define by
run) and consumed by a single backward() call. Only the op kinds listed in
supported_ops() exist; there is no broadcasting anywhere except scalar-with-
tensor, so every shape mismatch is an error instead of a silent expansion.

Training runs in float32; grad_check and the test oracles use float64.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes (or dtypes) do not match the op contract."""


class UnsupportedOpError(ValueError):
    """forward_op was asked for an op kind that does not exist."""


_GRAD_ENABLED = True

# exp/log clamp limits per dtype, chosen so the forward result stays finite.
_EXP_MAX = {np.dtype(np.float32): 80.0, np.dtype(np.float64): 700.0}
_LOG_MIN = {np.dtype(np.float32): 1e-30, np.dtype(np.float64): 1e-300}


class no_grad:
    """Context manager: ops executed inside build no graph."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype.kind in "iub":
        arr = arr.astype(np.float64)
    if arr.dtype.kind != "f":
        raise ShapeError(f"tensor data must be real-valued, got dtype {arr.dtype}")
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_done")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _op="leaf", _backward=None):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(_parents)
        self._backward = _backward
        self._op = _op
        self._done = False

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, op={self._op!r})"

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- arithmetic sugar ----------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def square(self):
        return square(self)

    def cos(self):
        return cos(self)

    def sin(self):
        return sin(self)

    def relu(self):
        return relu(self)

    def leaky_relu(self, alpha: float = 0.01):
        return leaky_relu(self, alpha)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def moveaxis(self, src: int, dst: int):
        return moveaxis(self, src, dst)

    def backward(self):
        backward(self)


def _tracked(*tensors) -> bool:
    return _GRAD_ENABLED and any(t.requires_grad for t in tensors)


def _make(data, parents, op, backward_fn):
    if _tracked(*parents):
        return Tensor(data, requires_grad=True, _parents=parents, _op=op, _backward=backward_fn)
    return Tensor(data)


def _check_same_shape(op: str, a: Tensor, b: Tensor):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: dtypes {a.data.dtype} and {b.data.dtype} differ")


# -- elementwise binary ------------------------------------------------


def add(a: Tensor, b):
    if not isinstance(b, Tensor):
        s = float(b)
        return _make(a.data + s, (a,), "add", lambda g: (g,))
    _check_same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a: Tensor, b):
    if not isinstance(b, Tensor):
        s = float(b)
        return _make(a.data - s, (a,), "sub", lambda g: (g,))
    _check_same_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a: Tensor, b):
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), "mul", lambda g: (g * bd, g * ad))


def div(a: Tensor, b):
    if not isinstance(b, Tensor):
        s = float(b)
        if s == 0.0:
            raise ZeroDivisionError("div: scalar denominator is zero")
        return scale(a, 1.0 / s)
    _check_same_shape("div", a, b)
    if np.any(b.data == 0.0):
        raise ZeroDivisionError("div: denominator contains zero")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), "div", lambda g: (g / bd, -g * ad / (bd * bd)))


def scale(a: Tensor, s: float):
    s = float(s)
    return _make(a.data * s, (a,), "scale", lambda g: (g * s,))


# -- elementwise unary -------------------------------------------------


def relu(a: Tensor):
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), "relu", lambda g: (g * mask,))


def leaky_relu(a: Tensor, alpha: float = 0.01):
    slope = np.where(a.data > 0, 1.0, alpha).astype(a.data.dtype)
    return _make(a.data * slope, (a,), "leaky_relu", lambda g: (g * slope,))


def exp(a: Tensor):
    limit = _EXP_MAX[a.data.dtype]
    clipped = np.minimum(a.data, limit)
    out = np.exp(clipped)
    live = a.data <= limit  # zero gradient in the clamped region
    return _make(out, (a,), "exp", lambda g: (g * out * live,))


def log(a: Tensor):
    floor = _LOG_MIN[a.data.dtype]
    clipped = np.maximum(a.data, floor)
    out = np.log(clipped)
    live = a.data >= floor
    return _make(out, (a,), "log", lambda g: (g * live / clipped,))


def square(a: Tensor):
    ad = a.data
    return _make(ad * ad, (a,), "square", lambda g: (g * 2.0 * ad,))


def sqrt(a: Tensor):
    if np.any(a.data < 0):
        raise ValueError("sqrt: negative input")
    out = np.sqrt(a.data)
    tiny = np.finfo(a.data.dtype).tiny
    return _make(out, (a,), "sqrt", lambda g: (g * 0.5 / np.maximum(out, tiny),))


def cos(a: Tensor):
    ad = a.data
    return _make(np.cos(ad), (a,), "cos", lambda g: (-g * np.sin(ad),))


def sin(a: Tensor):
    ad = a.data
    return _make(np.sin(ad), (a,), "sin", lambda g: (g * np.cos(ad),))


# -- reductions --------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False):
    shape = a.data.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def back(g):
        return (_expand_reduced(g, shape, axis, keepdims).copy(),)

    return _make(out, (a,), "sum", back)


def tmean(a: Tensor, axis=None, keepdims: bool = False):
    shape = a.data.shape
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.size / out.size

    def back(g):
        return (_expand_reduced(g, shape, axis, keepdims) / count,)

    return _make(out, (a,), "mean", back)


# -- linear algebra ----------------------------------------------------


def matmul(a: Tensor, b: Tensor):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: needs 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), "matmul", lambda g: (g @ bd.T, ad.T @ g))


# -- structural --------------------------------------------------------


def reshape(a: Tensor, shape):
    shape = tuple(int(s) for s in shape)
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(old),))


def moveaxis(a: Tensor, src: int, dst: int):
    return _make(
        np.moveaxis(a.data, src, dst).copy(),
        (a,),
        "moveaxis",
        lambda g: (np.moveaxis(g, dst, src).copy(),),
    )


def concat_channels(tensors):
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat_channels: empty input list")
    first = tensors[0].data
    if first.ndim < 2:
        raise ShapeError("concat_channels: operands must have at least 2 axes")
    for t in tensors[1:]:
        if t.data.ndim != first.ndim or t.data.dtype != first.dtype:
            raise ShapeError("concat_channels: rank or dtype mismatch")
        if t.data.shape[:1] + t.data.shape[2:] != first.shape[:1] + first.shape[2:]:
            raise ShapeError(
                f"concat_channels: non-channel dims differ, {t.data.shape} vs {first.shape}"
            )
    widths = [t.data.shape[1] for t in tensors]
    splits = np.cumsum(widths)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=1)

    def back(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=1))

    return _make(out, tensors, "concat_channels", back)


def gather_rows(a: Tensor, idx):
    if a.data.ndim != 2:
        raise ShapeError(f"gather_rows: needs a 2-D tensor, got {a.data.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows: index must be 1-D")
    n = a.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows: index out of range for {n} rows")
    shape = a.data.shape
    out = a.data[idx]

    def back(g):
        acc = np.zeros(shape, dtype=g.dtype)
        np.add.at(acc, idx, g)
        return (acc,)

    return _make(out, (a,), "gather_rows", back)


# -- image ops (N, C, H, W) --------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None):
    """Stride-1 'same' 2-D convolution; odd square kernels only."""
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeError(f"conv2d: needs 4-D input/weight, got {xd.shape} and {wd.shape}")
    co, ci, kh, kw = wd.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be odd and square, got {kh}x{kw}")
    if xd.shape[1] != ci:
        raise ShapeError(f"conv2d: input has {xd.shape[1]} channels, weight expects {ci}")
    if b is not None and b.data.shape != (co,):
        raise ShapeError(f"conv2d: bias shape {b.data.shape}, expected ({co},)")
    n, _, h, wdt = xd.shape
    p = kh // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wdt, ci * kh * kw)
    wflat = wd.reshape(co, ci * kh * kw)
    out = cols @ wflat.T
    if b is not None:
        out = out + b.data
    out = np.ascontiguousarray(out.reshape(n, h, wdt, co).transpose(0, 3, 1, 2))

    def back(g):
        grs = g.transpose(0, 2, 3, 1).reshape(n * h * wdt, co)
        gw = (grs.T @ cols).reshape(wd.shape)
        gcols = (grs @ wflat).reshape(n, h, wdt, ci, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros((n, ci, h + 2 * p, wdt + 2 * p), dtype=g.dtype)
        for u in range(kh):
            for v in range(kw):
                gxp[:, :, u : u + h, v : v + wdt] += gcols[:, :, :, :, u, v]
        gx = np.ascontiguousarray(gxp[:, :, p : p + h, p : p + wdt])
        if b is None:
            return (gx, gw)
        return (gx, gw, g.sum(axis=(0, 2, 3)))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, "conv2d", back)


def maxpool2x2(x: Tensor):
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"maxpool2x2: needs a 4-D tensor, got {xd.shape}")
    n, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2: H and W must be even, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    win = xd.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = win.argmax(axis=-1)  # first max wins on ties
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gwin = np.zeros((n, c, h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (np.ascontiguousarray(gx),)

    return _make(np.ascontiguousarray(out), (x,), "maxpool2x2", back)


def upsample2x(x: Tensor):
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"upsample2x: needs a 4-D tensor, got {xd.shape}")
    n, c, h, w = xd.shape
    out = np.repeat(np.repeat(xd, 2, axis=2), 2, axis=3)

    def back(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), "upsample2x", back)


def softmax_channels(x: Tensor):
    xd = x.data
    if xd.ndim < 2:
        raise ShapeError(f"softmax_channels: needs at least 2 axes, got {xd.shape}")
    shifted = xd - xd.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make(p, (x,), "softmax_channels", back)


# -- dispatch ----------------------------------------------------------

_OPS = {
    "add": lambda ins, at: add(ins[0], ins[1] if len(ins) > 1 else at["scalar"]),
    "sub": lambda ins, at: sub(ins[0], ins[1] if len(ins) > 1 else at["scalar"]),
    "mul": lambda ins, at: mul(ins[0], ins[1] if len(ins) > 1 else at["scalar"]),
    "div": lambda ins, at: div(ins[0], ins[1] if len(ins) > 1 else at["scalar"]),
    "scale": lambda ins, at: scale(ins[0], at["scalar"]),
    "matmul": lambda ins, at: matmul(ins[0], ins[1]),
    "conv2d": lambda ins, at: conv2d(ins[0], ins[1], ins[2] if len(ins) > 2 else None),
    "maxpool2x2": lambda ins, at: maxpool2x2(ins[0]),
    "upsample2x": lambda ins, at: upsample2x(ins[0]),
    "concat_channels": lambda ins, at: concat_channels(ins),
    "relu": lambda ins, at: relu(ins[0]),
    "leaky_relu": lambda ins, at: leaky_relu(ins[0], at.get("alpha", 0.01)),
    "exp": lambda ins, at: exp(ins[0]),
    "log": lambda ins, at: log(ins[0]),
    "square": lambda ins, at: square(ins[0]),
    "sqrt": lambda ins, at: sqrt(ins[0]),
    "cos": lambda ins, at: cos(ins[0]),
    "sin": lambda ins, at: sin(ins[0]),
    "sum": lambda ins, at: tsum(ins[0], axis=at.get("axis"), keepdims=at.get("keepdims", False)),
    "mean": lambda ins, at: tmean(ins[0], axis=at.get("axis"), keepdims=at.get("keepdims", False)),
    "softmax_channels": lambda ins, at: softmax_channels(ins[0]),
    "gather_rows": lambda ins, at: gather_rows(ins[0], at["indices"]),
    "reshape": lambda ins, at: reshape(ins[0], at["shape"]),
    "moveaxis": lambda ins, at: moveaxis(ins[0], at["src"], at["dst"]),
}


def supported_ops() -> tuple[str, ...]:
    return tuple(sorted(_OPS))


def forward_op(kind: str, inputs, attrs: dict | None = None) -> Tensor:
    if kind not in _OPS:
        raise UnsupportedOpError(f"unknown op kind {kind!r}")
    return _OPS[kind](list(inputs), attrs or {})


# -- backward ----------------------------------------------------------


def _topo(root: Tensor) -> list[Tensor]:
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(root: Tensor):
    """Reverse-mode sweep from a scalar root; consumes the graph."""
    if root.data.size != 1:
        raise ValueError(f"backward: root must be a scalar, got shape {root.data.shape}")
    if root._done:
        raise RuntimeError("backward: graph already consumed; rebuild the forward pass")
    root._done = True
    if root._backward is None and not (root.requires_grad and root._op == "leaf"):
        return  # constant root, nothing to do

    order = _topo(root)
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._op == "leaf":
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            continue
        if node._backward is None:
            raise RuntimeError("backward: graph node already consumed")
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    for node in order:
        if node._op != "leaf":
            node._parents = ()
            node._backward = None
            node._done = True


# -- finite-difference oracle ------------------------------------------


def grad_check(f, x: Tensor, eps: float = 1e-5, max_coords: int | None = None, rng=None) -> float:
    """Compare backward() against central differences.

    f maps a Tensor to a scalar Tensor. Returns the worst relative error
    |analytic - numeric| / max(1, |analytic|, |numeric|) over the checked
    coordinates (all of them unless max_coords subsamples).
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ValueError(f"grad_check: eps {eps} outside [1e-6, 1e-3]")
    if x.data.dtype != np.float64:
        raise ValueError("grad_check: input must be float64")

    probe = Tensor(x.data.copy(), requires_grad=True)
    y = f(probe)
    if y.data.size != 1 or not np.isfinite(y.data).all():
        raise ValueError("grad_check: f must return a finite scalar")
    y.backward()
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    flat = x.data.copy().reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and max_coords < flat.size:
        gen = rng if rng is not None else np.random.default_rng(0)
        coords = gen.choice(flat.size, size=max_coords, replace=False)

    worst = 0.0
    aflat = analytic.reshape(-1)
    with no_grad():
        for i in coords:
            keep = flat[i]
            flat[i] = keep + eps
            hi = f(Tensor(flat.reshape(x.data.shape))).item()
            flat[i] = keep - eps
            lo = f(Tensor(flat.reshape(x.data.shape))).item()
            flat[i] = keep
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(aflat[i] - numeric) / max(1.0, abs(aflat[i]), abs(numeric))
            worst = max(worst, err)
    return worst
