"""Dense tensors with reverse-mode automatic differentiation on an explicit tape.

Entering a ``Tape`` context records every operation whose inputs require
gradients; ``Tape.backward`` replays the records in reverse order,
accumulating gradients over fan-out.  Tensor values are immutable by
convention after creation; only the ``grad`` buffer is mutated (the
optimizer rebinds parameter values rather than writing in place).

Training runs use float32 buffers, verification (gradient-check) runs use
float64; the scalar type is chosen per tensor at construction.  The only
broadcast the engine permits is ``bias_add`` (a vector added to each
matrix row); every other shape mismatch is an error.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, ValidationError

DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_tls = threading.local()


def _tape_stack() -> list:
    if not hasattr(_tls, "frames"):
        _tls.frames = []
    return _tls.frames


def active_tape():
    """The innermost Tape of the current thread, or None."""
    frames = _tape_stack()
    return frames[-1] if frames else None


class Tensor:
    """N-dimensional value, optionally tracked on the active tape."""

    __slots__ = ("data", "requires_grad", "grad", "node_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self) -> str:
        return (
            f"Tensor(shape={self.shape}, dtype={self.data.dtype},"
            f" requires_grad={self.requires_grad})"
        )


@dataclass
class TapeNode:
    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence]


class Tape:
    """Append-only record of differentiable operations.

    A tape is confined to one thread; independent tapes may run in
    parallel.  Node inputs always precede the node output, so the list is
    topologically ordered by construction.  A tape can be backpropagated
    exactly once; a second ``backward`` raises.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._spent = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self, "tape contexts exited out of order"
        return False

    def record(self, name, inputs, output, backward_fn) -> None:
        output.node_id = len(self.nodes)
        self.nodes.append(TapeNode(name, tuple(inputs), output, backward_fn))

    def backward(self, root: Tensor) -> None:
        """Accumulate d(root)/d(tensor) into ``grad`` for every reachable
        requires_grad tensor.  ``root`` must be a scalar recorded on this tape."""
        if self._spent:
            raise ValidationError("tape has already been backpropagated; build a new tape")
        if root.data.size != 1:
            raise ValidationError(f"backward root must be scalar, got shape {root.shape}")
        nid = root.node_id
        if nid is None or nid >= len(self.nodes) or self.nodes[nid].output is not root:
            raise ValidationError("backward root was not recorded on this tape")
        self._spent = True

        pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        holders: dict[int, Tensor] = {id(root): root}
        for node in reversed(self.nodes):
            out_grad = pending.pop(id(node.output), None)
            if out_grad is None:
                continue
            out = node.output
            if out.requires_grad:
                out.grad = out_grad if out.grad is None else out.grad + out_grad
            for tensor, grad in zip(node.inputs, node.backward_fn(out_grad)):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in pending:
                    pending[key] = pending[key] + grad
                else:
                    pending[key] = grad
                    holders[key] = tensor
        # whatever is left belongs to leaves (parameters and inputs)
        for key, grad in pending.items():
            leaf = holders[key]
            leaf.grad = grad if leaf.grad is None else leaf.grad + grad


def apply_op(name: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    """Wrap ``out_data`` in a Tensor and record the op on the active tape.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input,
    each matching that input's shape.  Recording happens only when a tape
    is active and some input requires a gradient.
    """
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires, dtype=out_data.dtype)
    tape = active_tape()
    if tape is not None and requires:
        tape.record(name, inputs, out, backward_fn)
    return out


def _same_dtype(name: str, *tensors: Tensor):
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ValidationError(f"{name}: mixed scalar types {dt} and {t.data.dtype}")
    return dt


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("add", a, b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return apply_op("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("mul", a, b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return apply_op("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, alpha: float) -> Tensor:
    alpha = float(alpha)
    out = a.data * a.data.dtype.type(alpha)
    return apply_op("scale", (a,), out, lambda g: (g * alpha,))


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(dtype=a.data.dtype))
    shape, dt = a.shape, a.data.dtype
    return apply_op("sum", (a,), out, lambda g: (np.full(shape, g.item(), dtype=dt),))


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return apply_op("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValidationError("concat: empty tensor list")
    _same_dtype("concat", *tensors)
    ndim = tensors[0].data.ndim
    for t in tensors[1:]:
        if t.data.ndim != ndim:
            raise DimensionError(f"concat: rank mismatch {tensors[0].shape} vs {t.shape}")
        for ax in range(ndim):
            if ax != axis and t.shape[ax] != tensors[0].shape[ax]:
                raise DimensionError(
                    f"concat: non-axis dims disagree {tensors[0].shape} vs {t.shape}"
                )
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return apply_op("concat", tuple(tensors), out, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return apply_op("relu", (x,), x.data * mask, lambda g: (g * mask,))


def signed_sqrt(x: Tensor, eps: float = 1e-8) -> Tensor:
    """sign(x)*sqrt(|x|), smoothed near zero as x/sqrt(|x|+eps)."""
    ax = np.abs(x.data)
    u = 1.0 / np.sqrt(ax + eps)
    out = x.data * u
    local = u - 0.5 * ax * u / (ax + eps)
    return apply_op("signed_sqrt", (x,), out, lambda g: (g * local,))


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """x / ||x|| along ``axis``; zero vectors stay zero via the epsilon."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True) + eps)
    y = x.data / norm

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - y * dot) / norm,)

    return apply_op("l2_normalize", (x,), y, backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("matmul", a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul: expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions disagree: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def backward(g):
        return (
            g @ bd.T if need_a else None,
            ad.T @ g if need_b else None,
        )

    return apply_op("matmul", (a, b), ad @ bd, backward)


def bias_add(a: Tensor, b: Tensor) -> Tensor:
    """Add vector ``b`` to every row of matrix ``a`` (the one permitted broadcast)."""
    _same_dtype("bias_add", a, b)
    if a.data.ndim != 2 or b.data.ndim != 1 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"bias_add: expects (m,n)+(n,), got {a.shape} and {b.shape}")
    return apply_op("bias_add", (a, b), a.data + b.data[None, :], lambda g: (g, g.sum(axis=0)))


# ---------------------------------------------------------------------------
# convolution / pooling
# ---------------------------------------------------------------------------


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """(B,C,Hp,Wp) -> (C*k*k, B*oh*ow) patch matrix."""
    b, c = xp.shape[0], xp.shape[1]
    cols = np.empty((c, k, k, b, oh, ow), dtype=xp.dtype)
    for ki in range(k):
        for kj in range(k):
            view = xp[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride]
            cols[:, ki, kj] = view.transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, b * oh * ow)


def _col2im(gcols: np.ndarray, xp_shape, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    b, c = xp_shape[0], xp_shape[1]
    gxp = np.zeros(xp_shape, dtype=gcols.dtype)
    gc = gcols.reshape(c, k, k, b, oh, ow)
    for ki in range(k):
        for kj in range(k):
            target = gxp[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride]
            target += gc[:, ki, kj].transpose(1, 0, 2, 3)
    return gxp


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is (C_in,H,W) or batched (B,C_in,H,W); ``w`` is (C_out,C_in,k,k).
    """
    _same_dtype("conv2d", x, w)
    single = x.data.ndim == 3
    if x.data.ndim not in (3, 4) or w.data.ndim != 4:
        raise DimensionError(f"conv2d: expects (B,C,H,W) or (C,H,W) and (O,C,k,k), got {x.shape} and {w.shape}")
    xd = x.data[None] if single else x.data
    b, c_in, h, wd_ = xd.shape
    c_out, wc, k, k2 = w.shape
    if wc != c_in or k != k2:
        raise DimensionError(f"conv2d: kernel {w.shape} does not match input {x.shape}")
    if stride < 1 or pad < 0:
        raise ValidationError(f"conv2d: bad stride/pad ({stride},{pad})")
    oh, ow = _out_size(h, k, stride, pad), _out_size(wd_, k, stride, pad)
    if k > h + 2 * pad or k > wd_ + 2 * pad or oh <= 0 or ow <= 0:
        raise DimensionError(
            f"conv2d: non-positive output for input {x.shape}, kernel {w.shape},"
            f" stride {stride}, pad {pad}"
        )
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols = _im2col(xp, k, stride, oh, ow)
    wm = w.data.reshape(c_out, -1)
    out4 = (wm @ cols).reshape(c_out, b, oh, ow).transpose(1, 0, 2, 3)
    need_x, need_w = x.requires_grad, w.requires_grad
    w_shape, x_shape, xp_shape = w.shape, x.shape, xp.shape

    def backward(g):
        g4 = g[None] if single else g
        gm = np.ascontiguousarray(g4.transpose(1, 0, 2, 3)).reshape(c_out, -1)
        gw = gx = None
        if need_w:
            gw = (gm @ cols.T).reshape(w_shape)
        if need_x:
            gxp = _col2im(wm.T @ gm, xp_shape, k, stride, oh, ow)
            gx = gxp[:, :, pad : pad + h, pad : pad + wd_] if pad else gxp
            if single:
                gx = gx[0]
            gx = np.ascontiguousarray(gx)
        return gx, gw

    out = out4[0] if single else out4
    return apply_op("conv2d", (x, w), np.ascontiguousarray(out), backward)


def maxpool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    """Max pooling; gradient routes to the argmax cell, ties to the lowest
    linear index."""
    stride = k if stride is None else stride
    single = x.data.ndim == 3
    if x.data.ndim not in (3, 4):
        raise DimensionError(f"maxpool2d: expects (B,C,H,W) or (C,H,W), got {x.shape}")
    xd = x.data[None] if single else x.data
    b, c, h, w = xd.shape
    oh, ow = _out_size(h, k, stride, 0), _out_size(w, k, stride, 0)
    if k > h or k > w or oh <= 0 or ow <= 0:
        raise DimensionError(f"maxpool2d: window {k} does not fit input {x.shape}")
    windows = np.empty((b, c, k * k, oh, ow), dtype=xd.dtype)
    for ki in range(k):
        for kj in range(k):
            windows[:, :, ki * k + kj] = xd[
                :, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride
            ]
    arg = windows.argmax(axis=2)
    out4 = np.take_along_axis(windows, arg[:, :, None], axis=2)[:, :, 0]

    def backward(g):
        g4 = g[None] if single else g
        gx = np.zeros_like(xd)
        for ki in range(k):
            for kj in range(k):
                sel = (arg == ki * k + kj) * g4
                gx[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += sel
        return (gx[0] if single else gx,)

    return apply_op("maxpool2d", (x,), out4[0] if single else out4, backward)


# ---------------------------------------------------------------------------
# classification loss
# ---------------------------------------------------------------------------


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stabilized softmax (plain arrays, no tape)."""
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]; max-subtraction
    keeps large logits from overflowing."""
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: expects (B,K) logits, got {logits.shape}")
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    bsz, k = logits.shape
    if lab.shape[0] != bsz:
        raise DimensionError(
            f"softmax_cross_entropy: {bsz} logit rows vs {lab.shape[0]} labels"
        )
    if not np.all(np.isfinite(logits.data)):
        raise ValidationError("softmax_cross_entropy: non-finite logits")
    if lab.size and (lab.min() < 0 or lab.max() >= k):
        raise ValidationError(f"softmax_cross_entropy: label out of range [0,{k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(bsz), lab]
    out = np.asarray(nll.mean(), dtype=logits.data.dtype)
    probs = np.exp(z - lse[:, None])

    def backward(g):
        gl = probs.copy()
        gl[np.arange(bsz), lab] -= 1
        gl *= g.item() / bsz
        return (gl,)

    return apply_op("softmax_cross_entropy", (logits,), out, backward)
