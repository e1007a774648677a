"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable primitive computes its forward result with numpy and, when
a :class:`Tape` is active and at least one input requires a gradient, appends a
node holding a closure that maps the output gradient to input gradients.
Recording order is a valid topological order, so the backward pass simply walks
the node list in reverse.

Training runs in float32. ``precision(np.float64)`` switches newly created
tensors to float64, which the gradient checker uses to tighten tolerances.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericError, UsageError

_dtype = np.float32
_local = threading.local()


def get_dtype():
    return _dtype


def set_dtype(dtype) -> None:
    global _dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ConfigError(f"unsupported float type {dtype!r}")
    _dtype = dtype


@contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors."""
    old = _dtype
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(old)


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """An n-d float array that may take part in a differentiation graph.

    ``grad_id`` is ``(tape_uid, handle)`` while the tensor lives on a tape and
    ``None`` otherwise. ``grad`` is filled in for leaves by ``Tape.backward``.
    """

    __slots__ = ("data", "requires_grad", "grad", "grad_id", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=_dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.grad_id: Optional[tuple[int, int]] = None
        self.name = name

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)


def _not_scalar(t: Tensor):
    raise UsageError(f"expected a single-element tensor, got shape {t.shape}")


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive operations for one unit of work.

    Use as a context manager to make it the active tape of the current thread::

        with Tape() as tape:
            loss = model.loss(x, y)
        tape.backward(loss)
    """

    _uids = itertools.count(1)

    def __init__(self):
        self.uid = next(Tape._uids)
        self.nodes: list[tuple[int, list[Optional[int]], Callable]] = []
        self.leaves: dict[int, Tensor] = {}
        self._next_handle = 0

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def _new_handle(self) -> int:
        h = self._next_handle
        self._next_handle += 1
        return h

    def _handle_of(self, t: Tensor) -> int:
        if t.grad_id is not None and t.grad_id[0] == self.uid:
            return t.grad_id[1]
        # parameters and tensors detached from older tapes enter as leaves
        h = self._new_handle()
        t.grad_id = (self.uid, h)
        self.leaves[h] = t
        return h

    def record(self, data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
        out = Tensor(data, requires_grad=True)
        in_ids = [self._handle_of(t) if t.requires_grad else None for t in inputs]
        h = self._new_handle()
        out.grad_id = (self.uid, h)
        self.nodes.append((h, in_ids, backward))
        return out

    def owns(self, t: Tensor) -> bool:
        return t.grad_id is not None and t.grad_id[0] == self.uid

    def backward(
        self,
        loss: Tensor,
        grad: Optional[np.ndarray] = None,
        leaves: Iterable[Tensor] = (),
    ) -> dict[Tensor, np.ndarray]:
        """Propagate gradients from ``loss`` to every leaf on this tape.

        ``grad`` seeds the output gradient for a non-scalar ``loss``. Tensors
        listed in ``leaves`` receive a zero gradient when the loss does not
        depend on them.
        """
        if grad is None:
            if loss.size != 1:
                raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
            if not np.isfinite(loss.data).all():
                raise NumericError("loss is not finite")
            grad = np.ones_like(loss.data)
        else:
            grad = np.asarray(grad, dtype=loss.data.dtype)
            if grad.shape != loss.shape:
                raise ConfigError(f"seed gradient shape {grad.shape} != output shape {loss.shape}")

        results: dict[Tensor, np.ndarray] = {}
        if self.owns(loss):
            grads: dict[int, np.ndarray] = {loss.grad_id[1]: grad}
            for out_id, in_ids, fn in reversed(self.nodes):
                g = grads.pop(out_id, None)
                if g is None:
                    continue
                for hid, ig in zip(in_ids, fn(g)):
                    if hid is None or ig is None:
                        continue
                    prev = grads.get(hid)
                    grads[hid] = ig if prev is None else prev + ig
            for h, t in self.leaves.items():
                g = grads.get(h)
                t.grad = np.zeros_like(t.data) if g is None else g
                results[t] = t.grad
        elif loss.grad_id is not None:
            raise UsageError("loss was recorded on a different or cleared tape")
        elif loss.requires_grad:
            # the loss itself is a leaf
            loss.grad = grad
            results[loss] = grad

        for t in leaves:
            if t not in results:
                t.grad = np.zeros_like(t.data)
                results[t] = t.grad
        return results

    def clear(self) -> None:
        """Drop all nodes and saved buffers; outstanding handles become invalid."""
        self.nodes = []
        self.leaves = {}
        self._next_handle = 0
        self.uid = next(Tape._uids)


def _finish(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        return tape.record(data, inputs, backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ConfigError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _finish(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _finish(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _finish(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _finish(out, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return _finish(x.data * c, (x,), lambda g: (g * c,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _finish(xd * xd, (x,), lambda g: (2 * g * xd,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            gx = np.where(out > 0, g / (2 * out), 0)
        return (gx.astype(out.dtype, copy=False),)

    return _finish(out, (x,), backward)


@contextmanager
def record_kinks():
    """Collect the active-side mask of every relu evaluated inside the block.

    Finite differences are meaningless across a kink, so the gradient checker
    compares the masks seen at both ends of a stencil.
    """
    log: list[np.ndarray] = []
    prev = getattr(_local, "kinks", None)
    _local.kinks = log
    try:
        yield log
    finally:
        _local.kinks = prev


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    log = getattr(_local, "kinks", None)
    if log is not None:
        log.append(mask)
    return _finish(np.where(mask, x.data, 0).astype(x.data.dtype, copy=False), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1 / (1 + e), e / (1 + e)).astype(xd.dtype, copy=False)
    return _finish(out, (x,), lambda g: (g * out * (1 - out),))


# ---------------------------------------------------------------------------
# shape and reductions
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ConfigError(f"cannot reshape {old} into {tuple(shape)}") from None
    return _finish(out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _finish(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _finish(np.asarray(out, dtype=x.data.dtype), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ConfigError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    ad, bd = a.data, b.data
    try:
        out = ad @ bd
    except ValueError:
        raise ConfigError(f"matmul: shapes {a.shape} and {b.shape} are incompatible") from None

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _finish(out, (a, b), backward)


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1) -> Tensor:
    """Valid (unpadded) 2-d cross-correlation.

    ``x`` is ``[B, C, H, W]`` and ``kernels`` is ``[K, C, kh, kw]``; the result
    is ``[B, K, (H-kh)//stride+1, (W-kw)//stride+1]``. Lowered to one matmul
    over an im2col buffer.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if x.ndim != 4 or kernels.ndim != 4 or x.shape[1] != kernels.shape[1]:
        raise ConfigError(f"conv2d: input {x.shape} does not match kernels {kernels.shape}")
    if stride < 1:
        raise ConfigError(f"conv2d: stride must be positive, got {stride}")
    B, C, H, W = x.shape
    K, _, kh, kw = kernels.shape
    if H < kh or W < kw:
        raise ConfigError(f"conv2d: input {x.shape} is smaller than kernels {kernels.shape}")
    Ho, Wo = (H - kh) // stride + 1, (W - kw) // stride + 1

    windows = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    kflat = kernels.data.reshape(K, C * kh * kw)
    out = (cols @ kflat.T).reshape(B, Ho, Wo, K).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, K)
        gk = (g2.T @ cols).reshape(K, C, kh, kw) if kernels.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ kflat).reshape(B, Ho, Wo, C, kh, kw)
            gx = np.zeros_like(x.data)
            # scatter one output position at a time; each slice is a contiguous block
            for oh in range(Ho):
                for ow in range(Wo):
                    r, c = oh * stride, ow * stride
                    gx[:, :, r : r + kh, c : c + kw] += gcols[:, oh, ow]
        return gx, gk

    return _finish(out, (x, kernels), backward)


# ---------------------------------------------------------------------------
# normalisers and losses
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not np.isfinite(x.data).all():
        raise NumericError("softmax: non-finite logits")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _finish(out, (x,), backward)


def l2norm(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at the zero vector is zero."""
    x = as_tensor(x)
    xd = x.data
    n = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            gx = np.where(n > 0, g * xd / n, 0)
        return (gx.astype(xd.dtype, copy=False),)

    return _finish(n if keepdims else np.squeeze(n, axis=axis), (x,), backward)


def mse(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ConfigError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray((diff * diff).sum() / n, dtype=diff.dtype)

    def backward(g):
        ga = g * (2.0 / n) * diff
        return (ga.astype(diff.dtype, copy=False) if a.requires_grad else None,
                (-ga).astype(diff.dtype, copy=False) if b.requires_grad else None)

    return _finish(out, (a, b), backward)
