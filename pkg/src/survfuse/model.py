"""The prediction network: four modality-specific residual branches, a
sketch-fused shared branch, and a cascaded fusion head.

Each branch maps a 3-channel projected image to an F-dimensional feature
vector and K class logits.  The shared branch pools the four feature
vectors with the degree-2 sketch and maps the pooled vector to K logits.
The fusion head concatenates every head's pre-softmax logits with the
supplemental feature vector and applies one learned linear layer, which
amounts to a learned weighting of the individual outputs.

Ablation variants: "branch_only" drops the shared branch, "shared_only"
drops the per-branch heads; both keep the fusion layer and supplemental
features so comparisons stay fair.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, FormatError, ValidationError
from .preprocess import MODALITIES, OSClass
from .sketch import SketchPlan, compact_bilinear_op, make_plan

N_CLASSES = 3
SUPPLEMENT_DIM = 5
VARIANTS = ("full", "branch_only", "shared_only")


@dataclass(frozen=True)
class BranchConfig:
    """Shape of one modality branch (a scaled-down residual CNN)."""

    channels_per_stage: tuple = (16, 32, 64)
    blocks_per_stage: tuple = (2, 2, 2)
    feature_dim: int = 64
    final_pool: int = 4
    stem_stride: int = 1

    def __post_init__(self):
        if len(self.channels_per_stage) < 1:
            raise ConfigError("BranchConfig: need at least one stage")
        if len(self.channels_per_stage) != len(self.blocks_per_stage):
            raise ConfigError(
                "BranchConfig: channels_per_stage and blocks_per_stage lengths differ"
            )
        if self.feature_dim <= N_CLASSES:
            raise ConfigError(
                f"BranchConfig: feature_dim must exceed the class count ({N_CLASSES})"
            )
        if min(self.blocks_per_stage) < 1 or min(self.channels_per_stage) < 1:
            raise ConfigError("BranchConfig: stages need positive widths and block counts")


@dataclass(frozen=True)
class ModelConfig:
    branch: BranchConfig = field(default_factory=BranchConfig)
    sketch_dim: int = 512
    variant: str = "full"
    n_classes: int = N_CLASSES
    # optional signed-sqrt + l2 normalization of the pooled sketch; keeps
    # the shared-branch logit scale independent of the feature magnitude
    normalize_sketch: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"ModelConfig: unknown variant '{self.variant}'")
        if self.sketch_dim < 1:
            raise ConfigError("ModelConfig: sketch_dim must be positive")


# paper-scale preset kept as a named configuration; tests exercise the toy one
PRESETS = {
    "toy": BranchConfig(),
    "large": BranchConfig(
        channels_per_stage=(64, 128, 256, 512),
        blocks_per_stage=(3, 4, 6, 3),
        feature_dim=512,
        final_pool=4,
        stem_stride=2,
    ),
}


def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def branch_spatial_dims(cfg: BranchConfig, patch_size: int) -> tuple[int, int]:
    """(final feature-map side, flattened dim entering the feature FC)."""
    side = _conv_out(patch_size, 3, cfg.stem_stride, 1)
    for s in range(len(cfg.channels_per_stage)):
        if s > 0:
            side = _conv_out(side, 3, 2, 1)
        if side < 1:
            raise ConfigError(
                f"branch config collapses a {patch_size}px input to nothing at stage {s}"
            )
    pooled = _conv_out(side, cfg.final_pool, cfg.final_pool, 0)
    if pooled < 1:
        raise ConfigError(
            f"final pool window {cfg.final_pool} does not fit the {side}px feature map"
        )
    return side, cfg.channels_per_stage[-1] * pooled * pooled


def _he_conv(rng, c_out, c_in, k, dtype):
    std = np.sqrt(2.0 / (c_in * k * k))
    return T.Tensor(rng.normal(0.0, std, size=(c_out, c_in, k, k)), requires_grad=True, dtype=dtype)


def _fc(rng, fan_in, fan_out, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    w = T.Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True, dtype=dtype)
    b = T.Tensor(np.zeros(fan_out), requires_grad=True, dtype=dtype)
    return w, b


def fusion_input_dim(cfg: ModelConfig) -> int:
    k = cfg.n_classes
    if cfg.variant == "full":
        return 5 * k + SUPPLEMENT_DIM
    if cfg.variant == "branch_only":
        return 4 * k + SUPPLEMENT_DIM
    return k + SUPPLEMENT_DIM


class ModelParams:
    """All trainable weights; parameter order is fixed so checkpoints and
    runs are reproducible bit for bit."""

    def __init__(self, cfg: ModelConfig, patch_size: int, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.patch_size = int(patch_size)
        self.dtype = np.dtype(dtype)
        bc = cfg.branch
        _, flat_dim = branch_spatial_dims(bc, patch_size)
        self.branches: list[dict] = []
        for _v in range(4):
            params: dict[str, T.Tensor] = {}
            params["stem.w"] = _he_conv(rng, bc.channels_per_stage[0], 3, 3, dtype)
            prev = bc.channels_per_stage[0]
            for s, (ch, blocks) in enumerate(zip(bc.channels_per_stage, bc.blocks_per_stage)):
                for b in range(blocks):
                    first = b == 0 and s > 0
                    c_in = prev if first else ch
                    params[f"stage{s}.block{b}.conv1.w"] = _he_conv(rng, ch, c_in, 3, dtype)
                    params[f"stage{s}.block{b}.conv2.w"] = _he_conv(rng, ch, ch, 3, dtype)
                    if first:
                        params[f"stage{s}.down.w"] = _he_conv(rng, ch, prev, 1, dtype)
                prev = ch
            params["feat.w"], params["feat.b"] = _fc(rng, flat_dim, bc.feature_dim, dtype)
            if cfg.variant != "shared_only":
                params["head.w"], params["head.b"] = _fc(rng, bc.feature_dim, cfg.n_classes, dtype)
            self.branches.append(params)

        self.shared: dict[str, T.Tensor] = {}
        if cfg.variant != "branch_only":
            self.shared["w"], self.shared["b"] = _fc(rng, cfg.sketch_dim, cfg.n_classes, dtype)

        self.fusion: dict[str, T.Tensor] = {}
        self.fusion["w"], self.fusion["b"] = _fc(rng, fusion_input_dim(cfg), cfg.n_classes, dtype)

    def named_parameters(self) -> dict[str, T.Tensor]:
        out: dict[str, T.Tensor] = {}
        for v, params in enumerate(self.branches):
            for key, t in params.items():
                out[f"branch{v}.{key}"] = t
        for key, t in self.shared.items():
            out[f"shared.{key}"] = t
        for key, t in self.fusion.items():
            out[f"fusion.{key}"] = t
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters().items()}

    def restore(self, arrays: dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        if set(named) != set(arrays):
            raise ValidationError("parameter name sets differ; wrong checkpoint for this config")
        for name, t in named.items():
            arr = np.asarray(arrays[name])
            if arr.shape != t.data.shape:
                raise DimensionError(
                    f"parameter '{name}': stored shape {arr.shape} != expected {t.data.shape}"
                )
            t.data = arr.astype(t.data.dtype, copy=True)

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.named_parameters().values())


# ---------------------------------------------------------------------------
# forward passes (batch-first: images are (B,3,P,P), logits (B,K))
# ---------------------------------------------------------------------------


def branch_forward(img, params: dict, cfg: BranchConfig) -> tuple[T.Tensor, T.Tensor | None]:
    """One modality branch: residual conv stages, final max-pool, feature
    FC, logits FC.  Returns (features, logits); logits is None when the
    branch has no classification head (shared-only variant)."""
    x = img if isinstance(img, T.Tensor) else T.Tensor(img)
    single = x.data.ndim == 3
    if single:
        x = T.reshape(x, (1,) + x.shape)
    x = T.relu(T.conv2d(x, params["stem.w"], stride=cfg.stem_stride, pad=1))
    for s, blocks in enumerate(cfg.blocks_per_stage):
        for b in range(blocks):
            first = b == 0 and s > 0
            stride = 2 if first else 1
            prefix = f"stage{s}.block{b}"
            y = T.relu(T.conv2d(x, params[f"{prefix}.conv1.w"], stride=stride, pad=1))
            y = T.conv2d(y, params[f"{prefix}.conv2.w"], stride=1, pad=1)
            skip = T.conv2d(x, params[f"stage{s}.down.w"], stride=2, pad=0) if first else x
            x = T.relu(T.add(y, skip))
    x = T.maxpool2d(x, cfg.final_pool)
    bsz = x.shape[0]
    flat = T.reshape(x, (bsz, int(np.prod(x.shape[1:]))))
    features = T.relu(T.bias_add(T.matmul(flat, params["feat.w"]), params["feat.b"]))
    logits = None
    if "head.w" in params:
        logits = T.bias_add(T.matmul(features, params["head.w"]), params["head.b"])
    return features, logits


def shared_forward(
    features: Sequence[T.Tensor],
    plan: SketchPlan,
    shared_params: dict,
    normalize: bool = False,
) -> T.Tensor:
    """Pool the four modality feature vectors with the degree-2 sketch and
    classify the pooled vector.  The sum over descriptors makes the result
    invariant to modality ordering."""
    features = list(features)
    if len(features) != len(MODALITIES):
        raise ValidationError(f"shared_forward: expected {len(MODALITIES)} feature tensors")
    pooled = compact_bilinear_op(features, plan)
    if pooled.data.ndim == 1:
        pooled = T.reshape(pooled, (1, plan.d))
    if normalize:
        pooled = T.l2_normalize(T.signed_sqrt(pooled), axis=-1)
    return T.bias_add(T.matmul(pooled, shared_params["w"]), shared_params["b"])


def fuse_forward(
    branch_logits: Sequence[T.Tensor] | None,
    shared_logits: T.Tensor | None,
    s: T.Tensor,
    fusion_params: dict,
    variant: str = "full",
) -> T.Tensor:
    """Cascade the available head outputs with the supplemental features
    and apply the learned fusion layer."""
    blocks: list[T.Tensor] = []
    if variant in ("full", "branch_only"):
        blocks.extend(branch_logits)
    if variant in ("full", "shared_only"):
        blocks.append(shared_logits)
    blocks.append(s)
    cascade = T.concat(blocks, axis=1)
    return T.bias_add(T.matmul(cascade, fusion_params["w"]), fusion_params["b"])


@dataclass
class ForwardOutputs:
    """Every head's logits plus the component and total losses for one batch."""

    branch_logits: list
    shared_logits: T.Tensor | None
    fused_logits: T.Tensor
    losses: dict

    def loss_values(self) -> dict[str, float]:
        return {name: t.item() for name, t in self.losses.items()}


def forward_batch(images_by_modality, s_batch, params: ModelParams, plan: SketchPlan):
    """Run the whole network on a batch.

    ``images_by_modality`` is a sequence of four (B,3,P,P) arrays in
    modality order; ``s_batch`` is (B,5).  Returns (branch_logits list,
    shared_logits, fused_logits).
    """
    cfg = params.cfg
    feats, blogits = [], []
    for v in range(4):
        f, lg = branch_forward(
            T.Tensor(np.asarray(images_by_modality[v], dtype=params.dtype)),
            params.branches[v],
            cfg.branch,
        )
        feats.append(f)
        blogits.append(lg)
    shared_logits = None
    if cfg.variant != "branch_only":
        shared_logits = shared_forward(feats, plan, params.shared, cfg.normalize_sketch)
    s_tensor = T.Tensor(np.asarray(s_batch, dtype=params.dtype))
    fused = fuse_forward(blogits, shared_logits, s_tensor, params.fusion, cfg.variant)
    return blogits, shared_logits, fused


def total_loss(components: dict, lambda1: float, lambda2: float) -> T.Tensor:
    """Composite objective: lambda1 times the summed per-head losses plus
    lambda2 times the fusion loss."""
    if lambda1 < 0 or lambda2 < 0:
        raise ConfigError(f"total_loss: trade-off weights must be non-negative ({lambda1}, {lambda2})")
    side = [components[k] for k in ("t1", "t1ce", "t2", "flair", "shared") if k in components]
    if not side or "fusion" not in components:
        raise ValidationError("total_loss: missing component losses")
    acc = side[0]
    for t in side[1:]:
        acc = T.add(acc, t)
    return T.add(T.scale(acc, lambda1), T.scale(components["fusion"], lambda2))


def compute_outputs(
    images_by_modality, s_batch, labels, params: ModelParams, plan: SketchPlan,
    lambda1: float, lambda2: float,
) -> ForwardOutputs:
    blogits, shared_logits, fused = forward_batch(images_by_modality, s_batch, params, plan)
    losses: dict[str, T.Tensor] = {}
    if params.cfg.variant != "shared_only":
        for name, lg in zip(MODALITIES, blogits):
            losses[name] = T.softmax_cross_entropy(lg, labels)
    if shared_logits is not None:
        losses["shared"] = T.softmax_cross_entropy(shared_logits, labels)
    losses["fusion"] = T.softmax_cross_entropy(fused, labels)
    losses["total"] = total_loss(losses, lambda1, lambda2)
    return ForwardOutputs(blogits, shared_logits, fused, losses)


def predict(images, s, params: ModelParams, plan: SketchPlan) -> tuple[OSClass, np.ndarray]:
    """Class and softmax probabilities for one subject; ties go to the
    lower class index."""
    imgs = [np.asarray(images[v])[None] for v in range(4)]
    _, _, fused = forward_batch(imgs, np.asarray(s)[None], params, plan)
    probs = T.softmax(fused.data[0])
    return OSClass(int(np.argmax(probs))), probs


def predict_many(subjects, params: ModelParams, plan: SketchPlan, batch_size: int = 32):
    """Predicted classes for a list of preprocessed subjects."""
    preds = []
    for start in range(0, len(subjects), batch_size):
        chunk = subjects[start : start + batch_size]
        imgs = [np.stack([s.images[v] for s in chunk]) for v in range(4)]
        svec = np.stack([s.s for s in chunk])
        _, _, fused = forward_batch(imgs, svec, params, plan)
        probs = T.softmax(fused.data, axis=1)
        preds.extend(OSClass(int(i)) for i in np.argmax(probs, axis=1))
    return preds


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"SFCK"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sHI")


def config_digest(echo: dict) -> str:
    return hashlib.sha256(
        json.dumps(echo, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


def _model_cfg_to_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["branch"]["channels_per_stage"] = list(cfg.branch.channels_per_stage)
    d["branch"]["blocks_per_stage"] = list(cfg.branch.blocks_per_stage)
    return d


def model_cfg_from_dict(d: dict) -> ModelConfig:
    b = d["branch"]
    branch = BranchConfig(
        channels_per_stage=tuple(b["channels_per_stage"]),
        blocks_per_stage=tuple(b["blocks_per_stage"]),
        feature_dim=int(b["feature_dim"]),
        final_pool=int(b["final_pool"]),
        stem_stride=int(b["stem_stride"]),
    )
    return ModelConfig(
        branch=branch,
        sketch_dim=int(d["sketch_dim"]),
        variant=d["variant"],
        n_classes=int(d["n_classes"]),
        normalize_sketch=bool(d.get("normalize_sketch", False)),
    )


def save_checkpoint(path, params: ModelParams, plan: SketchPlan, echo: dict, rng_state: dict) -> None:
    """Versioned binary container: magic, header JSON (config echo +
    digest + RNG state + blob table), then raw parameter payloads.  A
    reload is bit-exact."""
    named = params.named_parameters()
    blobs = [(name, t.data) for name, t in named.items()]
    blobs += [
        ("plan.h1", plan.h1),
        ("plan.h2", plan.h2),
        ("plan.s1", plan.s1),
        ("plan.s2", plan.s2),
    ]
    table = [
        {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)}
        for name, arr in blobs
    ]
    header = {
        "version": CKPT_VERSION,
        "dtype": params.dtype.str,
        "patch_size": params.patch_size,
        "model": _model_cfg_to_dict(params.cfg),
        "plan": {"c": plan.c, "d": plan.d, "seed": plan.seed},
        "config": echo,
        "config_digest": config_digest(echo),
        "rng_state": rng_state,
        "blobs": table,
    }
    head_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(head_bytes)))
        fh.write(head_bytes)
        for _name, arr in blobs:
            fh.write(np.ascontiguousarray(arr).tobytes())


@dataclass
class Checkpoint:
    params: ModelParams
    plan: SketchPlan
    echo: dict
    rng_state: dict
    header: dict


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read(_CKPT_HEAD.size)
        if len(raw) < _CKPT_HEAD.size:
            raise FormatError(f"{path}: truncated checkpoint header", offset=len(raw))
        magic, version, head_len = _CKPT_HEAD.unpack(raw)
        if magic != CKPT_MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic {magic!r}", offset=0)
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}", offset=4)
        header = json.loads(fh.read(head_len).decode())
        arrays = {}
        offset = _CKPT_HEAD.size + head_len
        for entry in header["blobs"]:
            dtype = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            nbytes = dtype.itemsize * int(np.prod(shape)) if shape else dtype.itemsize
            payload = fh.read(nbytes)
            if len(payload) != nbytes:
                raise FormatError(
                    f"{path}: blob '{entry['name']}' truncated ({len(payload)} of {nbytes} bytes)",
                    offset=offset,
                )
            arrays[entry["name"]] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
            offset += nbytes

    digest = config_digest(header["config"])
    if digest != header["config_digest"]:
        raise FormatError(f"{path}: config digest mismatch")
    cfg = model_cfg_from_dict(header["model"])
    params = ModelParams(
        cfg, header["patch_size"], np.random.default_rng(0), dtype=np.dtype(header["dtype"])
    )
    params.restore({k: v for k, v in arrays.items() if not k.startswith("plan.")})
    plan = SketchPlan(
        c=header["plan"]["c"],
        d=header["plan"]["d"],
        h1=arrays["plan.h1"],
        h2=arrays["plan.h2"],
        s1=arrays["plan.s1"],
        s2=arrays["plan.s2"],
        seed=header["plan"]["seed"],
    )
    return Checkpoint(params=params, plan=plan, echo=header["config"], rng_state=header["rng_state"], header=header)


def make_run_plan(cfg: ModelConfig, seed: int) -> SketchPlan:
    """The single sketch plan shared by every subject and epoch of a run,
    derived from the run seed."""
    plan_seed = int(np.random.SeedSequence([seed, 0x5EEC]).generate_state(1)[0])
    return make_plan(cfg.branch.feature_dim, cfg.sketch_dim, plan_seed)
