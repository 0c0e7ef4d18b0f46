"""Central finite-difference verification of every differentiable path.

The numerical side perturbs raw parameter buffers and re-runs the forward
pass with no tape, so it is independent of the backward implementations it
checks.  All checks run at float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .model import BranchConfig, ModelConfig, ModelParams, compute_outputs
from .sketch import (
    circular_convolve_op,
    count_sketch_op,
    make_plan,
    tensor_sketch_op,
    compact_bilinear_op,
)

EPS = 1e-5
THRESHOLD = 1e-4


def _central_difference(make_loss, p: T.Tensor, idx: int, eps: float) -> float:
    base = p.data
    plus = base.copy()
    plus.flat[idx] += eps
    p.data = plus
    f_plus = float(make_loss().data)
    minus = base.copy()
    minus.flat[idx] -= eps
    p.data = minus
    f_minus = float(make_loss().data)
    p.data = base
    return (f_plus - f_minus) / (2.0 * eps)


def numerical_vs_analytic(
    make_loss: Callable[[], T.Tensor],
    params: list[T.Tensor],
    eps: float = EPS,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``make_loss`` must rebuild the forward pass from the current parameter
    buffers each call.  When ``max_coords`` is set, that many coordinates
    per parameter are sampled instead of sweeping all of them.

    A coordinate that disagrees at the primary step is re-measured at
    eps/10 and eps/100: a relu or argmax kink crossing inside the step
    interval vanishes as the step shrinks, while a wrong backward formula
    stays wrong at every scale.
    """
    T.zero_grads(params)
    with T.Tape() as tape:
        tape.backward(make_loss())
    analytic = [None if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, grad in zip(params, analytic):
        if grad is None:
            grad = np.zeros_like(p.data)
        size = p.data.size
        if max_coords is not None and size > max_coords:
            assert rng is not None, "sampled coordinate checks need an rng"
            coords = rng.choice(size, size=max_coords, replace=False)
        else:
            coords = np.arange(size)
        for idx in coords:
            ana = float(grad.flat[idx])
            err = np.inf
            for step in (eps, eps / 10.0, eps / 100.0):
                numeric = _central_difference(make_loss, p, idx, step)
                denom = max(abs(numeric), abs(ana))
                err = 0.0 if denom < 1e-6 else abs(numeric - ana) / denom
                if err < THRESHOLD:
                    break
            worst = max(worst, err)
    return worst


def _t(rng, shape, scale=1.0):
    return T.Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=np.float64)


def _probe(rng, shape):
    return T.Tensor(rng.standard_normal(shape), dtype=np.float64)


def _dot_probe(out: T.Tensor, probe: T.Tensor) -> T.Tensor:
    return T.sum_all(T.mul(out, probe))


# --- individual checks ------------------------------------------------------


def _check_matmul(rng):
    a, b = _t(rng, (3, 4)), _t(rng, (4, 2))
    probe = _probe(rng, (3, 2))
    return lambda: _dot_probe(T.matmul(a, b), probe), [a, b]


def _check_elementwise(rng):
    a, b = _t(rng, (2, 5)), _t(rng, (2, 5))
    probe = _probe(rng, (2, 5))
    return lambda: _dot_probe(T.mul(T.add(a, b), T.scale(a, 1.7)), probe), [a, b]


def _check_bias_add(rng):
    a, b = _t(rng, (4, 3)), _t(rng, (3,))
    probe = _probe(rng, (4, 3))
    return lambda: _dot_probe(T.bias_add(a, b), probe), [a, b]


def _check_relu(rng):
    # keep activations away from the kink at zero
    raw = rng.uniform(0.2, 1.0, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4))
    x = T.Tensor(raw, requires_grad=True, dtype=np.float64)
    probe = _probe(rng, (3, 4))
    return lambda: _dot_probe(T.relu(x), probe), [x]


def _check_concat_reshape(rng):
    a, b = _t(rng, (2, 3)), _t(rng, (1, 3))
    probe = _probe(rng, (9,))
    return lambda: _dot_probe(T.reshape(T.concat([a, b], axis=0), (9,)), probe), [a, b]


def _check_conv2d(rng):
    x, w = _t(rng, (2, 5, 5)), _t(rng, (3, 2, 3, 3))
    probe = _probe(rng, (3, 5, 5))
    return lambda: _dot_probe(T.conv2d(x, w, stride=1, pad=1), probe), [x, w]


def _check_conv2d_strided(rng):
    x, w = _t(rng, (1, 6, 6)), _t(rng, (2, 1, 3, 3))
    probe = _probe(rng, (2, 2, 2))
    return lambda: _dot_probe(T.conv2d(x, w, stride=2, pad=0), probe), [x, w]


def _check_maxpool(rng):
    x = _t(rng, (2, 4, 4))
    probe = _probe(rng, (2, 2, 2))
    return lambda: _dot_probe(T.maxpool2d(x, 2), probe), [x]


def _check_softmax_ce(rng):
    logits = _t(rng, (3, 4))
    labels = rng.integers(0, 4, size=3)
    return lambda: T.softmax_cross_entropy(logits, labels), [logits]


def _check_count_sketch(rng):
    plan = make_plan(10, 8, int(rng.integers(1 << 30)))
    x = _t(rng, (10,))
    probe = _probe(rng, (8,))
    return lambda: _dot_probe(count_sketch_op(x, plan), probe), [x]


def _check_circular_direct(rng):
    a, b = _t(rng, (6,)), _t(rng, (6,))
    probe = _probe(rng, (6,))
    return lambda: _dot_probe(circular_convolve_op(a, b, method="direct"), probe), [a, b]


def _check_circular_fft(rng):
    a, b = _t(rng, (8,)), _t(rng, (8,))
    probe = _probe(rng, (8,))
    return lambda: _dot_probe(circular_convolve_op(a, b, method="fft"), probe), [a, b]


def _check_tensor_sketch(rng):
    plan = make_plan(12, 16, int(rng.integers(1 << 30)))
    x = _t(rng, (12,))
    probe = _probe(rng, (16,))
    return lambda: _dot_probe(tensor_sketch_op(x, plan), probe), [x]


def _check_compact_bilinear(rng):
    plan = make_plan(8, 16, int(rng.integers(1 << 30)))
    xs = [_t(rng, (8,)) for _ in range(3)]
    probe = _probe(rng, (16,))
    return lambda: _dot_probe(compact_bilinear_op(xs, plan), probe), xs


def _check_sketch_normalization(rng):
    # keep inputs away from the signed-sqrt kink region
    raw = rng.uniform(0.3, 1.5, size=(2, 6)) * rng.choice([-1.0, 1.0], size=(2, 6))
    x = T.Tensor(raw, requires_grad=True, dtype=np.float64)
    probe = _probe(rng, (2, 6))
    return lambda: _dot_probe(T.l2_normalize(T.signed_sqrt(x), axis=-1), probe), [x]


_TINY_BRANCH = BranchConfig(
    channels_per_stage=(4, 6), blocks_per_stage=(1, 1), feature_dim=8, final_pool=2
)
_TINY_MODEL = ModelConfig(branch=_TINY_BRANCH, sketch_dim=16)


def _tiny_model(rng, variant="full"):
    cfg = ModelConfig(branch=_TINY_BRANCH, sketch_dim=16, variant=variant)
    params = ModelParams(cfg, patch_size=8, rng=rng, dtype=np.float64)
    plan = make_plan(cfg.branch.feature_dim, cfg.sketch_dim, int(rng.integers(1 << 30)))
    images = [rng.standard_normal((2, 3, 8, 8)) for _ in range(4)]
    s = rng.standard_normal((2, 5)) * 0.3
    labels = rng.integers(0, 3, size=2)
    return cfg, params, plan, images, s, labels


def _check_branch_forward(rng):
    from .model import branch_forward

    _, params, _, images, _, labels = _tiny_model(rng)
    bp = params.branches[0]

    def loss():
        _, logits = branch_forward(T.Tensor(images[0], dtype=np.float64), bp, _TINY_BRANCH)
        return T.softmax_cross_entropy(logits, labels)

    return loss, list(bp.values())


def _check_shared_forward(rng):
    from .model import branch_forward, shared_forward

    _, params, plan, images, _, labels = _tiny_model(rng)
    feats = [T.Tensor(rng.standard_normal((2, 8)), requires_grad=True, dtype=np.float64) for _ in range(4)]

    def loss():
        logits = shared_forward(feats, plan, params.shared)
        return T.softmax_cross_entropy(logits, labels)

    return loss, feats + list(params.shared.values())


def _check_fuse_forward(rng):
    from .model import fuse_forward

    _, params, _, _, s, labels = _tiny_model(rng)
    blogits = [_t(rng, (2, 3)) for _ in range(4)]
    shared = _t(rng, (2, 3))
    s_t = T.Tensor(s, requires_grad=True, dtype=np.float64)

    def loss():
        fused = fuse_forward(blogits, shared, s_t, params.fusion)
        return T.softmax_cross_entropy(fused, labels)

    return loss, blogits + [shared, s_t] + list(params.fusion.values())


def _check_total_loss_end_to_end(rng):
    cfg, params, plan, images, s, labels = _tiny_model(rng)

    def loss():
        out = compute_outputs(images, s, labels, params, plan, 0.1, 0.5)
        return out.losses["total"]

    return loss, list(params.named_parameters().values())


CHECKS: list[tuple[str, Callable]] = [
    ("matmul", _check_matmul),
    ("elementwise add/mul/scale", _check_elementwise),
    ("bias_add", _check_bias_add),
    ("relu", _check_relu),
    ("concat+reshape", _check_concat_reshape),
    ("conv2d s1 p1", _check_conv2d),
    ("conv2d s2 p0", _check_conv2d_strided),
    ("maxpool2d", _check_maxpool),
    ("softmax_cross_entropy", _check_softmax_ce),
    ("count_sketch", _check_count_sketch),
    ("circular_convolve direct", _check_circular_direct),
    ("circular_convolve fft", _check_circular_fft),
    ("tensor_sketch", _check_tensor_sketch),
    ("compact_bilinear", _check_compact_bilinear),
    ("signed_sqrt+l2_normalize", _check_sketch_normalization),
    ("branch_forward", _check_branch_forward),
    ("shared_forward", _check_shared_forward),
    ("fuse_forward", _check_fuse_forward),
    ("total_loss end-to-end", _check_total_loss_end_to_end),
]

# paths whose parameter tensors are too large to sweep exhaustively
_SAMPLED = {"branch_forward", "shared_forward", "total_loss end-to-end"}


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    passed: bool


def run_suite(seeds: int = 20, threshold: float = THRESHOLD) -> list[CheckResult]:
    """Run every check over ``seeds`` random instances; each result carries
    the worst relative error seen."""
    results = []
    for name, builder in CHECKS:
        worst = 0.0
        for seed in range(seeds):
            rng = np.random.default_rng(1000 + 97 * seed)
            make_loss, params = builder(rng)
            max_coords = 5 if name in _SAMPLED else None
            err = numerical_vs_analytic(make_loss, params, max_coords=max_coords, rng=rng)
            worst = max(worst, err)
        results.append(CheckResult(name=name, max_rel_err=worst, passed=worst < threshold))
    return results
