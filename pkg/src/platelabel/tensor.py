"""Dense numpy-backed tensors with reverse-mode automatic differentiation.

Every op in the catalog is a small class with a ``forward`` that works on raw
arrays and a ``backward`` that maps the output gradient to one gradient per
input. Graph nodes keep the op, its parents and whatever the backward rule
saved; :func:`backward` walks them in reverse topological order.
"""

from __future__ import annotations

import contextlib
import struct
from typing import Any, BinaryIO, Callable, Sequence

import numpy as np

from .errors import (
    BadMagic,
    DetachedGraph,
    NonFinite,
    NotScalar,
    ShapeMismatch,
    TruncatedFile,
    UnsupportedOp,
)

DTYPES = {"float32": np.float32, "float64": np.float64}

_state = {"grad_enabled": True, "check_finite": False}


@contextlib.contextmanager
def no_grad():
    """Run forward passes without recording the graph."""
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


@contextlib.contextmanager
def detect_nonfinite():
    """Debug mode: raise :class:`NonFinite` as soon as an op emits NaN/Inf."""
    prev = _state["check_finite"]
    _state["check_finite"] = True
    try:
        yield
    finally:
        _state["check_finite"] = prev


def _as_float_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    if dtype is None:
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            return data
        dtype = np.float64
    return np.asarray(data, dtype=DTYPES.get(dtype, dtype))


class GraphNode:
    __slots__ = ("op_kind", "op", "parents", "saved")

    def __init__(self, op_kind: str, op: "Op", parents: tuple, saved: dict):
        self.op_kind = op_kind
        self.op = op
        self.parents = parents
        self.saved = saved


class Tensor:
    """A real array plus optional gradient buffer and graph linkage."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: GraphNode | None = None
        self.retain_grad = False

    # -- descriptors -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operator sugar --------------------------------------------------
    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        return forward("add", [self, self._coerce(other)])

    def __radd__(self, other):
        return forward("add", [self._coerce(other), self])

    def __sub__(self, other):
        return forward("sub", [self, self._coerce(other)])

    def __rsub__(self, other):
        return forward("sub", [self._coerce(other), self])

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return forward("scalar_mul", [self], scale=float(other))
        return forward("mul", [self, self._coerce(other)])

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return forward("scalar_mul", [self], scale=1.0 / float(other))
        return self * forward("power", [self._coerce(other)], exponent=-1.0)

    def __neg__(self):
        return forward("scalar_mul", [self], scale=-1.0)

    def __matmul__(self, other):
        return forward("matmul", [self, self._coerce(other)])

    def __pow__(self, exponent):
        return forward("power", [self], exponent=float(exponent))

    def relu(self):
        return forward("relu", [self])

    def sigmoid(self):
        return forward("sigmoid", [self])

    def log_sigmoid(self):
        return forward("log_sigmoid", [self])

    def log(self):
        return forward("log", [self])

    def exp(self):
        return forward("exp", [self])

    def softmax(self):
        return forward("softmax_lastdim", [self])

    def sum(self, axes=None, keepdims=False):
        return forward("sum_axes", [self], axes=axes, keepdims=keepdims)

    def mean(self, axes=None, keepdims=False):
        return forward("mean_axes", [self], axes=axes, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return forward("reshape", [self], shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return forward("transpose", [self], axes=axes or None)


# ---------------------------------------------------------------------------
# op catalog
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(*shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast shapes {shapes}") from exc


def _norm_axes(axes, ndim) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ShapeMismatch(f"axis {a} out of range for rank {ndim}")
        out.append(a % ndim)
    return tuple(sorted(set(out)))


class Op:
    """One entry of the catalog. ``arity`` is the number of tensor inputs."""

    arity = 1

    def check(self, shapes, **attrs):
        pass

    def forward(self, ctx: dict, *xs: np.ndarray, **attrs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, ctx: dict, g: np.ndarray) -> tuple:
        raise NotImplementedError


class Add(Op):
    arity = 2

    def check(self, shapes, **attrs):
        _broadcast_shape(*shapes)

    def forward(self, ctx, a, b):
        ctx["shapes"] = (a.shape, b.shape)
        return a + b

    def backward(self, ctx, g):
        sa, sb = ctx["shapes"]
        return _unbroadcast(g, sa), _unbroadcast(g, sb)


class Sub(Add):
    def forward(self, ctx, a, b):
        ctx["shapes"] = (a.shape, b.shape)
        return a - b

    def backward(self, ctx, g):
        sa, sb = ctx["shapes"]
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)


class Mul(Add):
    def forward(self, ctx, a, b):
        ctx["a"], ctx["b"] = a, b
        return a * b

    def backward(self, ctx, g):
        a, b = ctx["a"], ctx["b"]
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


class ScalarMul(Op):
    def forward(self, ctx, a, scale=1.0):
        ctx["scale"] = scale
        return a * a.dtype.type(scale)

    def backward(self, ctx, g):
        return (g * g.dtype.type(ctx["scale"]),)


class MatMul(Op):
    """Batched ``(..., n, k) @ (..., k, m)``; batch dims broadcast."""

    arity = 2

    def check(self, shapes, **attrs):
        sa, sb = shapes
        if len(sa) < 2 or len(sb) < 2:
            raise ShapeMismatch(f"matmul needs rank >= 2 operands, got {sa} and {sb}")
        if sa[-1] != sb[-2]:
            raise ShapeMismatch(f"matmul inner dims differ: {sa} @ {sb}")
        _broadcast_shape(sa[:-2], sb[:-2])

    def forward(self, ctx, a, b):
        ctx["a"], ctx["b"] = a, b
        return a @ b

    def backward(self, ctx, g):
        a, b = ctx["a"], ctx["b"]
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _conv_out(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


class Conv2d(Op):
    """NHWC input, (kh, kw, Cin, Cout) weight, zero padding, integer stride."""

    arity = 2

    def check(self, shapes, stride=1, padding=0):
        sx, sw = shapes
        if len(sx) != 4 or len(sw) != 4:
            raise ShapeMismatch(f"conv2d expects NHWC input and 4-d weight, got {sx}, {sw}")
        if sx[3] != sw[2]:
            raise ShapeMismatch(f"conv2d channel mismatch: input {sx[3]}, weight {sw[2]}")
        if stride < 1 or padding < 0:
            raise ShapeMismatch("conv2d needs stride >= 1 and padding >= 0")
        if _conv_out(sx[1], sw[0], stride, padding) < 1 or _conv_out(sx[2], sw[1], stride, padding) < 1:
            raise ShapeMismatch(f"conv2d kernel {sw[:2]} larger than padded input {sx[1:3]}")

    def forward(self, ctx, x, w, stride=1, padding=0):
        kh, kw, cin, cout = w.shape
        xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x
        ho = _conv_out(x.shape[1], kh, stride, padding)
        wo = _conv_out(x.shape[2], kw, stride, padding)
        cols = np.empty((x.shape[0], ho, wo, kh, kw, cin), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, :, i, j, :] = xp[:, i : i + stride * (ho - 1) + 1 : stride,
                                            j : j + stride * (wo - 1) + 1 : stride, :]
        cols = cols.reshape(x.shape[0], ho, wo, kh * kw * cin)
        ctx.update(cols=cols, w=w, xshape=x.shape, stride=stride, padding=padding)
        return cols @ w.reshape(kh * kw * cin, cout)

    def backward(self, ctx, g):
        cols, w, stride, padding = ctx["cols"], ctx["w"], ctx["stride"], ctx["padding"]
        kh, kw, cin, cout = w.shape
        b, h, wd, _ = ctx["xshape"]
        ho, wo = g.shape[1], g.shape[2]
        gw = cols.reshape(-1, cols.shape[-1]).T @ g.reshape(-1, cout)
        gcols = (g @ w.reshape(-1, cout).T).reshape(b, ho, wo, kh, kw, cin)
        gxp = np.zeros((b, h + 2 * padding, wd + 2 * padding, cin), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + stride * (ho - 1) + 1 : stride,
                    j : j + stride * (wo - 1) + 1 : stride, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, padding : padding + h, padding : padding + wd, :] if padding else gxp
        return gx, gw.reshape(w.shape)


class Relu(Op):
    def forward(self, ctx, x):
        mask = x > 0
        ctx["mask"] = mask
        return np.where(mask, x, x.dtype.type(0))

    def backward(self, ctx, g):
        return (g * ctx["mask"],)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)


class Sigmoid(Op):
    def forward(self, ctx, x):
        y = _stable_sigmoid(x)
        ctx["y"] = y
        return y

    def backward(self, ctx, g):
        y = ctx["y"]
        return (g * y * (1 - y),)


class LogSigmoid(Op):
    """log(sigmoid(x)) evaluated as -softplus(-x)."""

    def forward(self, ctx, x):
        ctx["x"] = x
        return -(np.maximum(-x, 0) + np.log1p(np.exp(-np.abs(x))))

    def backward(self, ctx, g):
        return (g * _stable_sigmoid(-ctx["x"]),)


class SoftmaxLastdim(Op):
    def forward(self, ctx, x):
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        y = e / e.sum(axis=-1, keepdims=True)
        ctx["y"] = y
        return y

    def backward(self, ctx, g):
        y = ctx["y"]
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


class Log(Op):
    def forward(self, ctx, x):
        ctx["x"] = x
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(x)

    def backward(self, ctx, g):
        return (g / ctx["x"],)


class Exp(Op):
    def forward(self, ctx, x):
        y = np.exp(x)
        ctx["y"] = y
        return y

    def backward(self, ctx, g):
        return (g * ctx["y"],)


class Power(Op):
    """Elementwise ``x ** exponent`` for a constant real exponent."""

    def forward(self, ctx, x, exponent=1.0):
        ctx["x"], ctx["p"] = x, exponent
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.power(x, x.dtype.type(exponent))

    def backward(self, ctx, g):
        x, p = ctx["x"], ctx["p"]
        if p == 0:
            return (np.zeros_like(g),)
        if p == 1:
            return (g,)
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g * x.dtype.type(p) * np.power(x, x.dtype.type(p - 1)),)


class SumAxes(Op):
    def forward(self, ctx, x, axes=None, keepdims=False):
        axes = _norm_axes(axes, x.ndim)
        ctx.update(shape=x.shape, axes=axes, keepdims=keepdims)
        return np.sum(x, axis=axes, keepdims=keepdims)

    def _expand(self, ctx, g):
        if not ctx["keepdims"]:
            g = np.expand_dims(g, ctx["axes"])
        return np.broadcast_to(g, ctx["shape"])

    def backward(self, ctx, g):
        return (np.array(self._expand(ctx, g)),)


class MeanAxes(SumAxes):
    def forward(self, ctx, x, axes=None, keepdims=False):
        out = super().forward(ctx, x, axes=axes, keepdims=keepdims)
        n = int(np.prod([x.shape[a] for a in ctx["axes"]]))
        ctx["n"] = n
        return out / x.dtype.type(n)

    def backward(self, ctx, g):
        return (self._expand(ctx, g) / g.dtype.type(ctx["n"]),)


class Reshape(Op):
    def check(self, shapes, shape=()):
        (sx,) = shapes
        shape = tuple(shape)
        if -1 not in shape and int(np.prod(shape)) != int(np.prod(sx)):
            raise ShapeMismatch(f"cannot reshape {sx} into {shape}")

    def forward(self, ctx, x, shape=()):
        ctx["shape"] = x.shape
        try:
            return x.reshape(shape)
        except ValueError as exc:
            raise ShapeMismatch(str(exc)) from exc

    def backward(self, ctx, g):
        return (g.reshape(ctx["shape"]),)


class Transpose(Op):
    def check(self, shapes, axes=None):
        (sx,) = shapes
        if axes is not None and sorted(a % len(sx) for a in axes) != list(range(len(sx))):
            raise ShapeMismatch(f"axes {axes} are not a permutation of rank {len(sx)}")

    def forward(self, ctx, x, axes=None):
        axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(a % x.ndim for a in axes)
        ctx["inv"] = tuple(np.argsort(axes))
        return np.transpose(x, axes)

    def backward(self, ctx, g):
        return (np.transpose(g, ctx["inv"]),)


class LayerNormLastdim(Op):
    """Normalise to zero mean and unit variance over the last axis (no affine)."""

    def forward(self, ctx, x, eps=1e-5):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + x.dtype.type(eps))
        y = xc * inv
        ctx["y"], ctx["inv"] = y, inv
        return y

    def backward(self, ctx, g):
        y, inv = ctx["y"], ctx["inv"]
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)


class Pad2d(Op):
    """Zero padding of the two spatial axes of an NHWC tensor."""

    def check(self, shapes, pads=(0, 0, 0, 0)):
        if len(shapes[0]) != 4:
            raise ShapeMismatch(f"pad2d expects NHWC input, got {shapes[0]}")
        if len(pads) != 4 or min(pads) < 0:
            raise ShapeMismatch("pad2d needs four non-negative pads (top, bottom, left, right)")

    def forward(self, ctx, x, pads=(0, 0, 0, 0)):
        top, bottom, left, right = pads
        ctx["crop"] = (top, top + x.shape[1], left, left + x.shape[2])
        return np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)))

    def backward(self, ctx, g):
        t, b, l, r = ctx["crop"]
        return (g[:, t:b, l:r, :],)


class MaxPool2d(Op):
    """Non-overlapping ``size x size`` max pooling on NHWC input."""

    def check(self, shapes, size=2):
        sx = shapes[0]
        if len(sx) != 4:
            raise ShapeMismatch(f"max_pool2d expects NHWC input, got {sx}")
        if size < 1 or sx[1] % size or sx[2] % size:
            raise ShapeMismatch(f"pool size {size} does not divide spatial dims {sx[1:3]}")

    def forward(self, ctx, x, size=2):
        b, h, w, c = x.shape
        win = x.reshape(b, h // size, size, w // size, size, c).transpose(0, 1, 3, 5, 2, 4)
        win = win.reshape(b, h // size, w // size, c, size * size)
        arg = win.argmax(axis=-1)
        ctx.update(arg=arg, shape=x.shape, size=size)
        return np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(self, ctx, g):
        b, h, w, c = ctx["shape"]
        size = ctx["size"]
        win = np.zeros(g.shape + (size * size,), dtype=g.dtype)
        np.put_along_axis(win, ctx["arg"][..., None], g[..., None], axis=-1)
        win = win.reshape(b, h // size, w // size, c, size, size).transpose(0, 1, 4, 2, 5, 3)
        return (win.reshape(b, h, w, c),)


OPS: dict[str, Op] = {
    "add": Add(),
    "sub": Sub(),
    "mul": Mul(),
    "scalar_mul": ScalarMul(),
    "matmul": MatMul(),
    "conv2d": Conv2d(),
    "relu": Relu(),
    "sigmoid": Sigmoid(),
    "log_sigmoid": LogSigmoid(),
    "softmax_lastdim": SoftmaxLastdim(),
    "log": Log(),
    "exp": Exp(),
    "power": Power(),
    "mean_axes": MeanAxes(),
    "sum_axes": SumAxes(),
    "reshape": Reshape(),
    "transpose": Transpose(),
    "layer_norm_lastdim": LayerNormLastdim(),
    "pad2d": Pad2d(),
    "max_pool2d": MaxPool2d(),
}


def forward(op_kind: str, inputs: Sequence[Tensor], **attrs: Any) -> Tensor:
    """Apply catalog op ``op_kind`` to ``inputs`` and link the result into the graph."""
    try:
        op = OPS[op_kind]
    except KeyError:
        raise UnsupportedOp(f"unknown op {op_kind!r}") from None
    if len(inputs) != op.arity:
        raise ShapeMismatch(f"{op_kind} takes {op.arity} input(s), got {len(inputs)}")
    dtypes = {t.dtype for t in inputs}
    if len(dtypes) > 1:
        raise ShapeMismatch(f"{op_kind} got mixed precisions {sorted(map(str, dtypes))}")
    op.check([t.shape for t in inputs], **attrs)
    ctx: dict = {}
    out = Tensor(op.forward(ctx, *(t.data for t in inputs), **attrs))
    if _state["check_finite"] and not np.all(np.isfinite(out.data)):
        raise NonFinite(f"{op_kind} produced non-finite values")
    if _state["grad_enabled"] and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = GraphNode(op_kind, op, tuple(inputs), ctx)
    return out


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable trainable leaf."""
    if loss.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise DetachedGraph("loss is not attached to any trainable tensor")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(_topological(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None or t.retain_grad:
            t.grad = g.copy() if t.grad is None else t.grad + g
        if t.node is None:
            continue
        parent_grads = t.node.op.backward(t.node.saved, g)
        for p, pg in zip(t.node.parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            pg = np.asarray(pg, dtype=p.dtype)
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


def finite_difference_check(
    f: Callable[..., Tensor],
    point: Tensor | Sequence[Tensor],
    epsilon: float = 1e-5,
) -> float:
    """Largest relative gap between backprop and central-difference gradients.

    ``point`` may be a single tensor or a list of tensors; ``f`` receives them
    positionally and must return a scalar tensor. Everything runs at float64.
    """
    single = isinstance(point, Tensor)
    base = [point] if single else list(point)
    arrays = [np.array(t.data, dtype=np.float64) for t in base]

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = f(*leaves)
    if not np.all(np.isfinite(out.data)):
        raise NonFinite("f is not finite at the probe point")
    if out.requires_grad:
        backward(out)
    analytic = [l.grad if l.grad is not None else np.zeros_like(l.data) for l in leaves]

    def probe(k: int, flat_index: int, delta: float) -> float:
        xs = [Tensor(a) for a in arrays]
        xs[k].data = arrays[k].copy()
        xs[k].data.reshape(-1)[flat_index] += delta
        with no_grad():
            v = f(*xs)
        val = float(np.asarray(v.data).reshape(-1)[0])
        if not np.isfinite(val):
            raise NonFinite(f"f is not finite at probe {flat_index} of input {k}")
        return val

    worst = 0.0
    for k, a in enumerate(arrays):
        ga = analytic[k].reshape(-1)
        for idx in range(a.size):
            num = (probe(k, idx, epsilon) - probe(k, idx, -epsilon)) / (2 * epsilon)
            ana = float(ga[idx])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-12)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# binary serialization
# ---------------------------------------------------------------------------

TENSOR_MAGIC = b"TNSR"


def write_tensor(fp: BinaryIO, array) -> None:
    """Write one TNSR record: magic, u8 bytes/element, u32 rank, u32 dims, payload."""
    arr = np.asarray(array.data if isinstance(array, Tensor) else array)
    if arr.dtype == np.float32:
        tag, fmt = 4, "<f4"
    elif arr.dtype == np.float64:
        tag, fmt = 8, "<f8"
    else:
        raise ValueError(f"only float32/float64 tensors are serializable, got {arr.dtype}")
    fp.write(TENSOR_MAGIC)
    fp.write(struct.pack("<BI", tag, arr.ndim))
    fp.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fp.write(np.ascontiguousarray(arr, dtype=fmt).tobytes())


def _read_exact(fp: BinaryIO, n: int) -> bytes:
    buf = fp.read(n)
    if len(buf) != n:
        raise TruncatedFile(f"expected {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fp: BinaryIO) -> np.ndarray:
    magic = _read_exact(fp, 4)
    if magic != TENSOR_MAGIC:
        raise BadMagic(f"expected {TENSOR_MAGIC!r}, found {magic!r}")
    tag, rank = struct.unpack("<BI", _read_exact(fp, 5))
    if tag not in (4, 8):
        raise BadMagic(f"unknown precision tag {tag}")
    dims = struct.unpack(f"<{rank}I", _read_exact(fp, 4 * rank))
    count = int(np.prod(dims, dtype=np.int64))
    dtype = np.dtype("<f4" if tag == 4 else "<f8")
    payload = _read_exact(fp, count * tag)
    native = np.float32 if tag == 4 else np.float64
    return np.frombuffer(payload, dtype=dtype).astype(native).reshape(dims)
