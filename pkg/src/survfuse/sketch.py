"""Compact bilinear pooling primitives.

A frozen pair of count-sketch hashes defines a low-dimensional feature map
whose inner products approximate those of the full sum-of-outer-products
descriptor.  The degree-2 map is the circular convolution of two
independent count sketches; the convolution ships with a direct O(d^2)
reference and a radix-2 FFT fast path that must agree.

``exact_bilinear`` is a test oracle only and never enters the model path.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import DimensionError, ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SketchPlan:
    """Frozen count-sketch hash pair; the same plan is reused for every
    sample in a run so the feature map stays fixed during training."""

    c: int
    d: int
    h1: np.ndarray
    h2: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    seed: int

    def __post_init__(self):
        for name in ("h1", "h2", "s1", "s2"):
            arr = getattr(self, name)
            if arr.shape != (self.c,):
                raise DimensionError(f"SketchPlan.{name}: expected length {self.c}, got {arr.shape}")
            arr.setflags(write=False)
        for h in (self.h1, self.h2):
            if h.size and (h.min() < 0 or h.max() >= self.d):
                raise ValidationError(f"SketchPlan: hash indices must lie in [0,{self.d})")
        for s in (self.s1, self.s2):
            if not np.all(np.abs(s) == 1):
                raise ValidationError("SketchPlan: sign entries must be +1 or -1")


def make_plan(c: int, d: int, seed: int) -> SketchPlan:
    """Sample a reproducible plan: identical seed, identical plan."""
    if c < 1 or d < 1:
        raise ValidationError(f"make_plan: dimensions must be positive, got c={c}, d={d}")
    rng = np.random.default_rng(seed)
    h1 = rng.integers(0, d, size=c, dtype=np.int64)
    h2 = rng.integers(0, d, size=c, dtype=np.int64)
    s1 = (rng.integers(0, 2, size=c, dtype=np.int64) * 2 - 1).astype(np.int8)
    s2 = (rng.integers(0, 2, size=c, dtype=np.int64) * 2 - 1).astype(np.int8)
    return SketchPlan(c=c, d=d, h1=h1, h2=h2, s1=s1, s2=s2, seed=seed)


def _dense_sketch_matrix(h: np.ndarray, s: np.ndarray, d: int, dtype) -> np.ndarray:
    m = np.zeros((h.shape[0], d), dtype=dtype)
    m[np.arange(h.shape[0]), h] = s
    return m


@dataclass
class DescriptorSet:
    """A nonempty set of equal-dimension local descriptor vectors."""

    vectors: list = field(default_factory=list)

    def __post_init__(self):
        self.vectors = [np.asarray(v, dtype=np.float64) for v in self.vectors]
        if not self.vectors:
            raise ValidationError("DescriptorSet: empty descriptor set")
        dim = self.vectors[0].shape
        if len(dim) != 1:
            raise DimensionError(f"DescriptorSet: descriptors must be vectors, got {dim}")
        for v in self.vectors:
            if v.shape != dim:
                raise DimensionError(f"DescriptorSet: mixed descriptor shapes {dim} vs {v.shape}")

    @property
    def dim(self) -> int:
        return self.vectors[0].shape[0]

    def __len__(self) -> int:
        return len(self.vectors)


def _as_set(x) -> DescriptorSet:
    return x if isinstance(x, DescriptorSet) else DescriptorSet(list(x))


# ---------------------------------------------------------------------------
# plain-array paths
# ---------------------------------------------------------------------------


def count_sketch(x: np.ndarray, h: np.ndarray, s: np.ndarray, d: int) -> np.ndarray:
    """out[j] = sum_{i: h[i]=j} s[i]*x[i]; linear in x."""
    x = np.asarray(x)
    if x.ndim != 1 or x.shape[0] != h.shape[0]:
        raise DimensionError(f"count_sketch: input {x.shape} vs hash length {h.shape[0]}")
    return np.bincount(h, weights=s * x, minlength=d).astype(x.dtype, copy=False)


def is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@lru_cache(maxsize=16)
def _bit_reversal(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for _ in range(bits):
        rev = (rev << 1) | (idx & 1)
        idx >>= 1
    rev.setflags(write=False)
    return rev


def fft_radix2(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Iterative radix-2 Cooley-Tukey transform along the last axis.

    Length must be a power of two; leading axes are transformed in batch.
    """
    n = x.shape[-1]
    if not is_power_of_two(n):
        raise ValidationError(f"fft_radix2: length {n} is not a power of two")
    a = np.ascontiguousarray(np.asarray(x, dtype=np.complex128)[..., _bit_reversal(n)])
    length = 2
    sign = 1.0 if inverse else -1.0
    while length <= n:
        half = length // 2
        tw = np.exp(sign * 2j * np.pi * np.arange(half) / length)
        shaped = a.reshape(*a.shape[:-1], n // length, length)
        hi = shaped[..., half:] * tw
        lo = shaped[..., :half].copy()
        shaped[..., :half] = lo + hi
        shaped[..., half:] = lo - hi
        length *= 2
    if inverse:
        a /= n
    return a


def _check_conv_pair(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise DimensionError(f"circular_convolve: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim not in (1, 2):
        raise DimensionError(f"circular_convolve: expects vectors or row batches, got {a.shape}")


def circular_convolve_direct(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Reference O(d^2) circular convolution: out[k] = sum_j a[j] b[(k-j) mod d]."""
    a, b = np.asarray(a), np.asarray(b)
    _check_conv_pair(a, b)
    if a.ndim == 2:
        return np.stack([circular_convolve_direct(ra, rb) for ra, rb in zip(a, b)])
    d = a.shape[0]
    bb = np.concatenate([b, b])
    windows = np.lib.stride_tricks.sliding_window_view(bb, d)[:d]
    # windows[k] . reversed(a) equals out[(k-1) mod d]
    prod = windows @ a[::-1]
    return np.roll(prod, -1).astype(np.result_type(a, b), copy=False)


def circular_convolve_fft(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    _check_conv_pair(a, b)
    fa = fft_radix2(a)
    fb = fft_radix2(b)
    out = fft_radix2(fa * fb, inverse=True).real
    return out.astype(np.result_type(a, b), copy=False)


def circular_convolve(a: np.ndarray, b: np.ndarray, method: str = "auto") -> np.ndarray:
    """Circular convolution; ``method`` is "auto", "fft", or "direct".

    The FFT path requires a power-of-two length and otherwise falls back
    to the direct path with a logged notice.
    """
    a, b = np.asarray(a), np.asarray(b)
    _check_conv_pair(a, b)
    if method == "direct":
        return circular_convolve_direct(a, b)
    if method not in ("auto", "fft"):
        raise ValidationError(f"circular_convolve: unknown method '{method}'")
    if not is_power_of_two(a.shape[-1]):
        if method == "fft":
            log.warning(
                "circular_convolve: length %d is not a power of two; using the direct path",
                a.shape[-1],
            )
        return circular_convolve_direct(a, b)
    return circular_convolve_fft(a, b)


def tensor_sketch(x: np.ndarray, plan: SketchPlan, method: str = "auto") -> np.ndarray:
    """Degree-2 sketch: circular convolution of the two count sketches of x."""
    x = np.asarray(x)
    if x.shape != (plan.c,):
        raise DimensionError(f"tensor_sketch: input {x.shape} vs plan dimension {plan.c}")
    return circular_convolve(
        count_sketch(x, plan.h1, plan.s1, plan.d),
        count_sketch(x, plan.h2, plan.s2, plan.d),
        method,
    )


def compact_bilinear(descriptors, plan: SketchPlan, method: str = "auto") -> np.ndarray:
    """Sum of the degree-2 sketches over a descriptor set; linear in the set."""
    ds = _as_set(descriptors)
    out = np.zeros(plan.d, dtype=np.float64)
    for v in ds.vectors:
        out += tensor_sketch(v, plan, method)
    return out


def exact_bilinear(descriptors) -> np.ndarray:
    """Sum of outer products over the set.  Test oracle only; the model
    path always goes through the sketch."""
    ds = _as_set(descriptors)
    out = np.zeros((ds.dim, ds.dim), dtype=np.float64)
    for v in ds.vectors:
        out += np.outer(v, v)
    return out


# ---------------------------------------------------------------------------
# differentiable wrappers
# ---------------------------------------------------------------------------


def _index_reverse(v: np.ndarray) -> np.ndarray:
    """v[(-i) mod d] along the last axis."""
    return np.roll(v[..., ::-1], 1, axis=-1)


def count_sketch_op(x: T.Tensor, plan: SketchPlan, which: int = 1) -> T.Tensor:
    """Differentiable count sketch of a vector (c,) or row batch (B,c);
    backward is the transpose scatter."""
    h, s = (plan.h1, plan.s1) if which == 1 else (plan.h2, plan.s2)
    xd = x.data
    if xd.ndim not in (1, 2) or xd.shape[-1] != plan.c:
        raise DimensionError(f"count_sketch: input {x.shape} vs plan dimension {plan.c}")
    if xd.ndim == 1:
        out = count_sketch(xd, h, s, plan.d)
    else:
        out = xd @ _sketch_matrix_cached(plan, which, xd.dtype)

    def backward(g):
        return ((s * g[..., h]).astype(xd.dtype, copy=False),)

    return T.apply_op(f"count_sketch{which}", (x,), out, backward)


_MATRIX_CACHE: dict = {}


def _sketch_matrix_cached(plan: SketchPlan, which: int, dtype) -> np.ndarray:
    key = (plan.seed, plan.c, plan.d, which, np.dtype(dtype).str)
    m = _MATRIX_CACHE.get(key)
    if m is None:
        h, s = (plan.h1, plan.s1) if which == 1 else (plan.h2, plan.s2)
        m = _dense_sketch_matrix(h, s, plan.d, dtype)
        _MATRIX_CACHE[key] = m
    return m


def circular_convolve_op(a: T.Tensor, b: T.Tensor, method: str = "auto") -> T.Tensor:
    """Differentiable circular convolution; the gradient to each operand is
    the convolution of the upstream gradient with the index-reversed other
    operand."""
    out = circular_convolve(a.data, b.data, method)
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def backward(g):
        ga = circular_convolve(g, _index_reverse(bd), method) if need_a else None
        gb = circular_convolve(g, _index_reverse(ad), method) if need_b else None
        return ga, gb

    return T.apply_op("circular_convolve", (a, b), out, backward)


def tensor_sketch_op(x: T.Tensor, plan: SketchPlan, method: str = "auto") -> T.Tensor:
    return circular_convolve_op(
        count_sketch_op(x, plan, 1), count_sketch_op(x, plan, 2), method
    )


def compact_bilinear_op(features: Sequence[T.Tensor], plan: SketchPlan, method: str = "auto") -> T.Tensor:
    features = list(features)
    if not features:
        raise ValidationError("compact_bilinear: empty descriptor set")
    acc = tensor_sketch_op(features[0], plan, method)
    for f in features[1:]:
        acc = T.add(acc, tensor_sketch_op(f, plan, method))
    return acc
