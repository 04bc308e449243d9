"""Dense tensors with reverse-mode differentiation over an explicit tape.

Operations executed while a :class:`Tape` is active are appended to it in
execution order. :func:`backward` walks that list in reverse, so every
recorded operation is visited once and after all of its consumers.

Outside an active tape nothing is recorded, which doubles as a no-grad mode::

    with Tape():
        loss = (x * w).sum()
        backward(loss)
"""

from __future__ import annotations

import threading
import weakref
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

ArrayLike = Union[np.ndarray, float, int, Sequence]

_default_dtype = np.float32
_local = threading.local()

# Upper bound on im2col buffer size (elements) before conv2d works in batch chunks.
_IM2COL_BUDGET = 8_000_000


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


@contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors (float64 for gradient checks)."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def current_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Suspend recording, even inside an active tape."""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Tensor:
    """An n-dimensional array that can take part in a gradient tape.

    ``requires_grad`` marks leaves (parameters) that accumulate ``grad``.
    Tensors produced by recorded operations carry ``tape_id``, their index in
    the tape, and receive ``grad`` during :func:`backward` as well.
    """

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        self.data = np.array(data, dtype=dtype or _default_dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.tape_id: Optional[int] = None
        self._tape_ref = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.asarray(data)
        t.grad = None
        t.requires_grad = False
        t.name = None
        t.tape_id = None
        t._tape_ref = None
        return t

    @property
    def _tape(self) -> Optional["Tape"]:
        # weak, so a finished tape and its intermediates are freed by refcounting alone
        return None if self._tape_ref is None else self._tape_ref()

    @property
    def shape(self) -> tuple:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        extra = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{extra})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_over_axes(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class Node:
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    name: str = ""


class Tape:
    """Ordered record of differentiable operations for one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def participates(self, t: Tensor) -> bool:
        return t.requires_grad or t._tape is self

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward_fn, name: str = "") -> None:
        output.tape_id = len(self.nodes)
        output._tape_ref = weakref.ref(self)
        self.nodes.append(Node(tuple(inputs), output, backward_fn, name))


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _emit(data: np.ndarray, inputs: Sequence[Tensor], backward_fn, name: str = "") -> Tensor:
    out = Tensor._wrap(data)
    tape = current_tape()
    if tape is not None and any(tape.participates(t) for t in inputs):
        tape.record(inputs, out, backward_fn, name)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into ``grad`` of every tensor on loss's tape.

    Repeated calls accumulate; clear with ``zero_grad`` between steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        if loss.requires_grad:
            _accumulate(loss, np.ones_like(loss.data))
            return
        raise ContractError("loss was not recorded on a tape")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes[: loss.tape_id + 1]):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        _accumulate(node.output, g)
        input_grads = node.backward(g)
        if len(input_grads) != len(node.inputs):
            raise DimensionError(f"{node.name or 'node'} backward returned {len(input_grads)} grads "
                                 f"for {len(node.inputs)} inputs")
        for inp, gi in zip(node.inputs, input_grads):
            if gi is None or not tape.participates(inp):
                continue
            gi = np.asarray(gi)
            if gi.shape != inp.shape:
                raise DimensionError(f"{node.name or 'node'} backward produced gradient of shape "
                                     f"{gi.shape} for input of shape {inp.shape}")
            key = id(inp)
            if key in pending:
                pending[key] = pending[key] + gi
            else:
                pending[key] = gi
            if inp._tape is not tape:
                leaves[key] = inp
    for key, t in leaves.items():
        if key in pending:
            _accumulate(t, pending.pop(key))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = g.astype(t.data.dtype, copy=False)
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad = t.grad + g


# ---------------------------------------------------------------------------
# broadcasting (trailing-aligned, extra axes only in front)


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    long_, short = (a, b) if len(a) >= len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise DimensionError(f"shapes {a} and {b} are not broadcast-compatible "
                             "(only leading axes may be added)")
    return long_


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = a.data.dtype.type(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,), "scale")


def heaviside_detached(x, threshold: float = 0.0) -> Tensor:
    """Step function ``x > threshold`` (strict). Records nothing, so passes no gradient."""
    x = as_tensor(x)
    return Tensor._wrap((x.data > threshold).astype(x.data.dtype))


def sum_over_axes(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.asarray(out), (a,), grad_fn, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum_over_axes(a, axis, keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _emit(out, (a,), lambda g: (g.reshape(old),), "reshape")


def flatten(a, start: int = 1) -> Tensor:
    a = as_tensor(a)
    return reshape(a, a.shape[:start] + (-1,))


def index_select(a, index) -> Tensor:
    """Basic (non-advanced) indexing, e.g. ``x[t]`` or ``x[:, 2:5]``."""
    a = as_tensor(a)
    shape, dtype = a.shape, a.data.dtype

    def grad_fn(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] += g
        return (full,)

    return _emit(np.array(a.data[index]), (a,), grad_fn, "index")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack needs equal shapes, got {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _emit(out, tensors,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)), "stack")


def repeat_leading(a, n: int) -> Tensor:
    """Tile ``a`` along a new leading axis of length ``n`` (constant-current injection)."""
    a = as_tensor(a)
    out = np.broadcast_to(a.data, (n,) + a.shape).copy()
    return _emit(out, (a,), lambda g: (g.sum(axis=0),), "repeat")


def custom_node(inputs, forward: Callable[..., np.ndarray], backward_fn: Callable, name: str = "custom") -> Tensor:
    """Apply a user-defined operation.

    ``forward`` maps the input arrays to the output array. ``backward_fn``
    maps the upstream gradient to one gradient (or ``None``) per input; a
    shape disagreement raises :class:`DimensionError` during :func:`backward`.
    """
    if isinstance(inputs, Tensor):
        inputs = (inputs,)
    inputs = tuple(as_tensor(t) for t in inputs)
    out = np.asarray(forward(*(t.data for t in inputs)))

    def grad_fn(g):
        grads = backward_fn(g)
        if isinstance(grads, np.ndarray) or grads is None:
            grads = (grads,)
        return tuple(grads)

    return _emit(out, inputs, grad_fn, name)


# ---------------------------------------------------------------------------
# linear algebra and spatial ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data
    return _emit(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation of ``N×C×H×W`` input with ``O×C×kh×kw`` kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    o, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"kernel expects {kc} input channels, input has {c}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"invalid stride {stride} / padding {padding}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h}x{w} (padding {padding})")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xd, kd = x.data, kernel.data
    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(xd, pad) if padding else xd
    per_sample = c * ho * wo * kh * kw
    chunk = max(1, _IM2COL_BUDGET // max(per_sample, 1))

    def windows(lo, hi):
        v = sliding_window_view(xp[lo:hi], (kh, kw), axis=(2, 3))
        return v[:, :, ::stride, ::stride][:, :, :ho, :wo]

    out = np.empty((n, o, ho, wo), dtype=np.result_type(xd, kd))
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        r = np.tensordot(windows(lo, hi), kd, axes=([1, 4, 5], [1, 2, 3]))
        out[lo:hi] = r.transpose(0, 3, 1, 2)

    def grad_fn(g):
        dk = np.zeros_like(kd)
        dxp = np.zeros_like(xp)
        for lo in range(0, n, chunk):
            hi = min(n, lo + chunk)
            gc = g[lo:hi]
            dk += np.tensordot(gc, windows(lo, hi), axes=([0, 2, 3], [0, 2, 3]))
            dcols = np.tensordot(gc, kd, axes=([1], [0]))  # n, ho, wo, c, kh, kw
            for i in range(kh):
                for j in range(kw):
                    dxp[lo:hi, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        return (np.ascontiguousarray(dx), dk)

    return _emit(out, (x, kernel), grad_fn, "conv2d")


def avgpool2d(x, window: int) -> Tensor:
    """Non-overlapping mean pooling over the last two axes."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise DimensionError("avgpool2d needs at least 2 spatial axes")
    h, w = x.shape[-2:]
    if window < 1 or h % window or w % window:
        raise DimensionError(f"spatial size {h}x{w} not divisible by window {window}")
    lead = x.shape[:-2]
    shaped = x.data.reshape(lead + (h // window, window, w // window, window))
    out = shaped.mean(axis=(-3, -1))
    inv = x.data.dtype.type(1.0 / (window * window))

    def grad_fn(g):
        return (np.repeat(np.repeat(g, window, axis=-2), window, axis=-1) * inv,)

    return _emit(out, (x,), grad_fn, "avgpool2d")
