"""
Dense tensors with tape-based reverse-mode differentiation.

Only the operations that the segmentation network and its losses need are
provided. Values are 64-bit floats; tensors are never mutated once built, and
an operation records itself onto the innermost active :class:`Tape` only when
one of its inputs has gradients enabled.

Typical use::

    with Tape():
        loss = reduce_mean(relu(conv2d(x, k, b, stride=1, padding=1)))
        backward(loss)
    k.grad  # now populated
"""

from contextlib import contextmanager
import threading
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tape",
    "Tensor",
    "add",
    "avgpool2",
    "backward",
    "channel_concat",
    "clamp_min",
    "const",
    "conv2d",
    "div",
    "log",
    "maxpool2",
    "mul",
    "nearest_upsample2x",
    "no_grad",
    "reduce_mean",
    "reduce_sum",
    "relu",
    "scale",
    "softmax_channels",
    "sub",
]

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor(object):
    """
    An immutable N-D array of float64 values, optionally tracked for
    gradients.
    """

    grad: Optional[np.ndarray] = None
    "Gradient of the last replayed loss with respect to this tensor."

    def __init__(self, values: ArrayLike, grad_enabled: bool = False):
        arr = np.array(values, dtype=np.float64)
        arr.flags.writeable = False
        self._values = arr
        self.grad_enabled = bool(grad_enabled)
        self.grad = None
        self._tape = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, grad_enabled: bool) -> "Tensor":
        # Internal constructor for op outputs; the array is freshly computed.
        inst = cls.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        inst._values = arr
        inst.grad_enabled = grad_enabled
        inst.grad = None
        inst._tape = None
        return inst

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._values.shape

    @property
    def size(self) -> int:
        return self._values.size

    def item(self) -> float:
        if self._values.size != 1:
            raise ValueError(f"item() needs a single-element tensor; got shape {self.shape}")
        return float(self._values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self._values.copy()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad_enabled={self.grad_enabled})"


def const(values: ArrayLike) -> Tensor:
    """A tensor that never receives gradients."""
    return Tensor(values, grad_enabled=False)


class _Record(object):
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output: Tensor, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    if not stack:
        return None
    return stack[-1]


class Tape(object):
    """
    An ordered record of executed differentiable operations. A tape belongs to
    the thread that activated it.
    """

    def __init__(self):
        self._records: List[_Record] = []
        self._consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *args):
        _tape_stack().pop()

    def __len__(self):
        return len(self._records)

    def record(self, output: Tensor, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn):
        if self._consumed:
            raise RuntimeError("cannot record onto a tape that was already replayed; reset() it first")
        self._records.append(_Record(output, inputs, backward_fn))
        output._tape = self

    def reset(self):
        """Forget all records so the tape can be reused."""
        for rec in self._records:
            rec.output._tape = None
        self._records = []
        self._consumed = False

    def backward(self, loss: Tensor):
        if self._consumed:
            raise RuntimeError("backward() was already run on this tape; reset() it first")
        if loss.size != 1:
            raise ValueError(f"backward() needs a scalar loss; got shape {loss.shape}")

        grads = {id(loss): np.ones(loss.shape, dtype=np.float64)}
        seen = {id(loss): loss}

        for rec in reversed(self._records):
            g = grads.get(id(rec.output))
            if g is None:
                continue

            input_grads = rec.backward_fn(g)

            for inp, ig in zip(rec.inputs, input_grads):
                if ig is None or not inp.grad_enabled:
                    continue

                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                    seen[key] = inp

        for key, t in seen.items():
            t.grad = grads[key]

        self._consumed = True


@contextmanager
def no_grad():
    """Suspend recording: operations inside produce constants."""
    _tape_stack().append(None)
    try:
        yield
    finally:
        _tape_stack().pop()


def backward(loss: Tensor):
    """
    Populate ``grad`` on every gradient-enabled ancestor of ``loss``.
    """
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss; got shape {loss.shape}")
    if loss._tape is None:
        raise RuntimeError("loss was not recorded on a tape; compute it inside `with Tape():`")
    loss._tape.backward(loss)


def _emit(out: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    tape = _active_tape()
    track = tape is not None and any(t.grad_enabled for t in inputs)
    result = Tensor._wrap(out, track)

    if track:
        tape.record(result, inputs, backward_fn)

    return result


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad

    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)

    for dim, extent in enumerate(shape):
        if extent == 1 and grad.shape[dim] != 1:
            grad = grad.sum(axis=dim, keepdims=True)

    return grad


def _broadcast_shape(a: Tensor, b: Tensor, opname: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{opname}: shapes {a.shape} and {b.shape} are not broadcastable")


# Elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit(
        a.values + b.values,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit(
        a.values - b.values,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    """
    Elementwise product with broadcasting, e.g. a ``[B,1,...]`` weight map
    against ``[B,K,...]`` probabilities.
    """
    _broadcast_shape(a, b, "mul")
    av, bv = a.values, b.values
    return _emit(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "div")
    av, bv = a.values, b.values
    out = av / bv
    return _emit(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / bv, av.shape),
            _unbroadcast(-g * out / bv, bv.shape),
        ),
    )


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _emit(x.values * factor, (x,), lambda g: (g * factor,))


def log(x: Tensor) -> Tensor:
    xv = x.values
    return _emit(np.log(xv), (x,), lambda g: (g / xv,))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    xv = x.values
    keep = xv > floor
    return _emit(np.maximum(xv, floor), (x,), lambda g: (g * keep,))


def relu(x: Tensor) -> Tensor:
    """
    Elementwise max(0, x). The subgradient at 0 is 0.
    """
    xv = x.values
    keep = xv > 0
    return _emit(np.where(keep, xv, 0.0), (x,), lambda g: (g * keep,))


# Reductions


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = x.values.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(a % len(shape) for a in axes)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.asarray(out), (x,), bw)


def reduce_mean(x: Tensor) -> Tensor:
    """Mean over all elements, as a scalar tensor."""
    shape = x.shape
    n = x.size
    return _emit(
        np.asarray(x.values.mean()),
        (x,),
        lambda g: (np.full(shape, float(g) / n),),
    )


# Channel-wise operations


def softmax_channels(x: Tensor) -> Tensor:
    """
    Softmax over axis 1 of a ``[B,K,...]`` tensor, computed after subtracting
    the per-voxel maximum.
    """
    if x.values.ndim < 2 or x.shape[1] < 2:
        raise ValueError(f"softmax_channels needs at least 2 channels; got shape {x.shape}")

    shifted = x.values - x.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _emit(s, (x,), bw)


def channel_concat(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != b.values.ndim or a.shape[:1] != b.shape[:1] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"channel_concat: shapes {a.shape} and {b.shape} differ outside axis 1")

    ca = a.shape[1]
    return _emit(
        np.concatenate([a.values, b.values], axis=1),
        (a, b),
        lambda g: (g[:, :ca], g[:, ca:]),
    )


# Spatial operations (2D, NCHW)


def _check_nchw(x: Tensor, opname: str):
    if x.values.ndim != 4:
        raise ValueError(f"{opname} needs a [B,C,H,W] tensor; got shape {x.shape}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """
    2D cross-correlation (no kernel flip) of ``x[B,Cin,H,W]`` with
    ``kernel[Cout,Cin,kh,kw]``, plus ``bias[Cout]``.
    """
    _check_nchw(x, "conv2d")
    if kernel.values.ndim != 4:
        raise ValueError(f"conv2d: kernel must be [Cout,Cin,kh,kw]; got shape {kernel.shape}")

    B, cin, H, W = x.shape
    cout, kcin, kh, kw = kernel.shape

    if kcin != cin:
        raise ValueError(
            f"conv2d: input shape {x.shape} has {cin} channels but kernel shape {kernel.shape} expects {kcin}"
        )
    if bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match kernel shape {kernel.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel extents must be odd; got kernel shape {kernel.shape}")
    if padding < 0 or stride < 1:
        raise ValueError(f"conv2d: need padding >= 0 and stride >= 1; got {padding}, {stride}")

    span_h = H + 2 * padding - kh
    span_w = W + 2 * padding - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ValueError(
            f"conv2d: input shape {x.shape} and kernel shape {kernel.shape} give a non-integral "
            f"output size with stride {stride} and padding {padding}"
        )
    oh = span_h // stride + 1
    ow = span_w // stride + 1

    xp = np.pad(x.values, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    kv = kernel.values
    out = np.einsum("bchwij,ocij->bohw", windows, kv, optimize=True)
    out = out + bias.values[None, :, None, None]

    def bw(g):
        gk = np.einsum("bchwij,bohw->ocij", windows, g, optimize=True)
        gb = g.sum(axis=(0, 2, 3))
        gxp = np.zeros_like(xp)

        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += np.einsum(
                    "bohw,oc->bchw", g, kv[:, :, i, j], optimize=True
                )

        gx = gxp[:, :, padding : padding + H, padding : padding + W]
        return (gx, gk, gb)

    return _emit(out, (x, kernel, bias), bw)


def _check_even(x: Tensor, opname: str):
    _check_nchw(x, opname)
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"{opname} needs even spatial extents; got shape {x.shape}")


def maxpool2(x: Tensor) -> Tensor:
    """
    2×2 max pooling with stride 2. Ties route the gradient to the first
    maximal element in row-major window order.
    """
    _check_even(x, "maxpool2")
    B, C, H, W = x.shape
    blocks = x.values.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(B, C, H // 2, W // 2, 4)
    winner = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, winner[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, winner[..., None], g[..., None], axis=-1)
        gb = gb.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(B, C, H, W),)

    return _emit(out, (x,), bw)


def avgpool2(x: Tensor) -> Tensor:
    _check_even(x, "avgpool2")
    B, C, H, W = x.shape
    out = x.values.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0,)

    return _emit(out, (x,), bw)


def nearest_upsample2x(x: Tensor) -> Tensor:
    """
    Replicate each voxel into a 2×2 block; the gradient sums each block.
    """
    _check_nchw(x, "nearest_upsample2x")
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.values, 2, axis=2), 2, axis=3)

    def bw(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _emit(out, (x,), bw)
