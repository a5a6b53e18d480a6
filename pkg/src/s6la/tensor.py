"""Dense tensors with tape-based reverse-mode differentiation.

Storage is a row-major numpy array. Operations executed while a :class:`Tape`
is active are recorded together with a closure that maps the output gradient
to input gradients; :func:`backward` replays the tape in reverse.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Parameter", "Tape", "backward", "no_record", "zero_grad",
    "finite_difference_check", "as_tensor",
    "add", "sub", "mul", "div", "neg", "matmul", "exp", "log", "tanh",
    "sigmoid", "softplus", "relu", "sum", "mean", "reshape", "transpose",
    "concat", "split", "softmax_rows", "layer_norm", "conv2d", "avg_pool2d",
    "cross_entropy",
]

_FLOAT_DTYPES = (np.dtype(np.float64), np.dtype(np.float32))
_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def _active() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("id", "inputs", "backward")

    def __init__(self, id: int, inputs: tuple, backward: Callable):
        self.id = id
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager; tapes are thread-confined.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, out: "Tensor", inputs: tuple, fn: Callable) -> None:
        node = _Node(len(self.nodes), inputs, fn)
        self.nodes.append(node)
        out.node = node.id
        out._tape = self


@contextlib.contextmanager
def no_record():
    """Suspend recording on this thread."""
    _stack().append(None)
    try:
        yield
    finally:
        _stack().pop()


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.array(data, dtype=dtype, copy=True) if dtype is not None else np.array(data, copy=True)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: int | None = None
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.node = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

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

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False): return sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def transpose(self, *axes): return transpose(self, axes or None)
    def exp(self): return exp(self)
    def tanh(self): return tanh(self)


class Parameter(Tensor):
    """Named trainable leaf. ``grad`` always has the value's shape."""

    def __init__(self, name: str, value, trainable: bool = True, dtype=None):
        super().__init__(value, dtype=dtype, requires_grad=trainable)
        self.name = name
        self.grad = np.zeros_like(self.data)

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @property
    def value(self) -> Tensor:
        return self

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    if dtype is None and isinstance(x, np.ndarray) and x.dtype in _FLOAT_DTYPES:
        dtype = x.dtype
    return Tensor._wrap(np.asarray(x, dtype=dtype or np.float64))


def _tracked(t: Tensor, tape: Tape) -> bool:
    return t.requires_grad or (t.node is not None and t._tape is tape)


def _emit(data: np.ndarray, inputs: tuple, fn: Callable) -> Tensor:
    out = Tensor._wrap(data)
    tape = _active()
    if tape is not None and any(_tracked(t, tape) for t in inputs):
        tape._record(out, inputs, fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return _emit(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _emit(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # two-branch form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(np.zeros((), a.dtype), a.data)
    return _emit(out, (a,), lambda g: (g * _sigmoid(a.data),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0).astype(a.dtype, copy=False), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# shape and reductions


def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _emit(np.asarray(out), (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)
    return _emit(np.asarray(out), (a,), back)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = np.argsort(axes)
    return _emit(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    ref = ts[0].ndim
    ax = axis % ref
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _emit(np.concatenate([t.data for t in ts], axis=ax), ts,
                 lambda g: tuple(np.split(g, bounds, axis=ax)))


def split(a, sections: Sequence[int], axis: int = -1) -> list[Tensor]:
    """Split into consecutive pieces of the given extents along ``axis``."""
    a = as_tensor(a)
    ax = axis % a.ndim
    if int(np.sum(sections)) != a.shape[ax]:
        raise ValueError(f"split sizes {list(sections)} do not cover extent {a.shape[ax]}")
    outs = []
    start = 0
    for n in sections:
        idx = [slice(None)] * a.ndim
        idx[ax] = slice(start, start + n)
        idx = tuple(idx)

        def back(g, idx=idx):
            full = np.zeros_like(a.data)
            full[idx] = g
            return (full,)
        outs.append(_emit(a.data[idx].copy(), (a,), back))
        start += n
    return outs


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch-broadcasting over leading axes."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _emit(a.data @ b.data, (a, b), back)


def softmax_rows(a) -> Tensor:
    """Softmax over the last axis, with per-row max subtraction."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)
    return _emit(out, (a,), back)


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance (no affine part)."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)
    return _emit(xhat, (a,), back)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    rows = np.arange(n)
    loss = (lse - z[rows, labels]).mean()

    def back(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)
    return _emit(np.asarray(loss, dtype=logits.dtype), (logits,), back)


# ---------------------------------------------------------------------------
# convolution and pooling (channels-last)


def conv2d(x, kernel, padding: str = "same") -> Tensor:
    """Cross-correlate ``x`` [..., H, W, Cin] with ``kernel`` [kh, kw, Cin, Cout]."""
    x, kernel = _pair(x, kernel)
    kh, kw, cin, cout = kernel.shape
    if kh not in (1, 3) or kw not in (1, 3):
        raise ValueError(f"unsupported kernel size {kh}x{kw}; expected 1 or 3")
    if x.shape[-1] != cin:
        raise ValueError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if padding not in ("same", "valid"):
        raise ValueError(f"unknown padding {padding!r}")
    lead = x.shape[:-3]
    h, w = x.shape[-3:-1]
    xd = x.data.reshape((-1, h, w, cin))
    if kh == 1 and kw == 1:
        kmat = kernel.data.reshape(cin, cout)
        out = (xd.reshape(-1, cin) @ kmat).reshape(lead + (h, w, cout))

        def back1(g):
            g2 = g.reshape(-1, cout)
            gx = (g2 @ kmat.T).reshape(x.shape)
            gk = (xd.reshape(-1, cin).T @ g2).reshape(kernel.shape)
            return gx, gk
        return _emit(out, (x, kernel), back1)

    ph, pw = ((kh - 1) // 2, (kw - 1) // 2) if padding == "same" else (0, 0)
    xp = np.pad(xd, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    ho, wo = xp.shape[1] - kh + 1, xp.shape[2] - kw + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"input {x.shape} too small for valid {kh}x{kw} convolution")
    # one matmul per kernel tap keeps memory at the size of the input
    taps = [(i, j) for i in range(kh) for j in range(kw)]
    kd = kernel.data
    out = np.zeros((xd.shape[0], ho, wo, cout), dtype=np.result_type(xd, kd))
    for i, j in taps:
        out += xp[:, i:i + ho, j:j + wo, :] @ kd[i, j]
    out = out.reshape(lead + (ho, wo, cout))

    def back(g):
        g4 = g.reshape(-1, ho, wo, cout)
        g2 = g4.reshape(-1, cout)
        gk = np.empty_like(kd)
        gxp = np.zeros_like(xp)
        for i, j in taps:
            win = xp[:, i:i + ho, j:j + wo, :]
            gk[i, j] = win.reshape(-1, cin).T @ g2
            gxp[:, i:i + ho, j:j + wo, :] += g4 @ kd[i, j].T
        gx = gxp[:, ph:ph + h, pw:pw + w, :].reshape(x.shape)
        return gx, gk
    return _emit(out, (x, kernel), back)


def avg_pool2d(x, factor: int = 2) -> Tensor:
    """Non-overlapping ``factor`` x ``factor`` average pooling over axes (-3, -2)."""
    x = as_tensor(x)
    h, w, c = x.shape[-3:]
    if h % factor or w % factor:
        raise ValueError(f"spatial extents {h}x{w} not divisible by {factor}")
    lead = x.shape[:-3]
    blocks = x.data.reshape(lead + (h // factor, factor, w // factor, factor, c))
    nd = len(lead)
    out = blocks.mean(axis=(nd + 1, nd + 3))

    def back(g):
        g = np.expand_dims(g, (nd + 1, nd + 3)) / (factor * factor)
        return (np.broadcast_to(g, blocks.shape).reshape(x.shape).copy(),)
    return _emit(out, (x,), back)


# ---------------------------------------------------------------------------
# differentiation


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or loss.node is None:
        return
    grads = {loss.node: np.ones_like(loss.data)}
    for node in reversed(tape.nodes[: loss.node + 1]):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None:
                continue
            if inp.node is not None and inp._tape is tape:
                prev = grads.get(inp.node)
                grads[inp.node] = gi if prev is None else prev + gi
            elif inp.requires_grad:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += gi


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


def finite_difference_check(f: Callable[[], Tensor], p: Tensor, eps: float = 1e-6) -> float:
    """Max relative error between backward() and central differences for ``p``.

    ``f`` takes no arguments and must read ``p`` on every call.
    Error per entry is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if p.dtype != np.float64:
        raise ValueError("finite_difference_check requires 64-bit parameters")
    saved = p.grad
    was = p.requires_grad
    p.requires_grad = True
    p.grad = np.zeros_like(p.data)
    try:
        with Tape():
            loss = f()
            backward(loss)
        analytic = p.grad.copy()
    finally:
        p.grad = saved
        p.requires_grad = was

    worst = 0.0
    with no_record():
        for idx in np.ndindex(p.shape):
            orig = p.data[idx]
            p.data[idx] = orig + eps
            fp = f().item()
            p.data[idx] = orig - eps
            fm = f().item()
            p.data[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite probe at entry {idx} of {getattr(p, 'name', 'tensor')}")
            numeric = (fp - fm) / (2 * eps)
            worst = max(worst, abs(analytic[idx] - numeric) / max(1.0, abs(numeric)))
    return worst
