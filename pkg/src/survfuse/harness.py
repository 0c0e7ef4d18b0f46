"""Training harness: Adam with decoupled weight decay, flip/rotate
augmentation, seeded stratified k-fold cross-validation, and the run_cv
driver that trains per fold, selects the best inner-validation epoch, and
evaluates once on the held-out fold.

Reports (JSON + CSV + figures) and per-fold checkpoints are written when
an output directory is given.  With augmentation off, two runs with the
same seed produce bit-identical checkpoints and reports.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, SurvfuseError, TrainingDiverged, ValidationError
from .metrics import FoldMetrics, MetricsReport, aggregate, evaluate
from .model import (
    ModelConfig,
    ModelParams,
    compute_outputs,
    make_run_plan,
    predict_many,
    save_checkpoint,
)

N_CLASSES = 3


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    lambda1: float = 0.1
    lambda2: float = 0.5
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("TrainConfig: epochs and batch_size must be positive")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ConfigError("TrainConfig: bad learning_rate/weight_decay")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("TrainConfig: trade-off weights must be non-negative")


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def init_like(cls, params: dict) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_step(
    params: dict,
    grads: dict,
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One Adam update with decoupled weight decay: each parameter first
    shrinks by (1 - lr*wd), then moves by the bias-corrected moment step."""
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = grads[name]
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise ValidationError(f"adam_step: non-finite gradient for parameter '{name}'")
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data = (p.data * (1.0 - lr * weight_decay) - step).astype(p.data.dtype, copy=False)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentDraw:
    vflip: bool
    hflip: bool
    quarter_turns: int


def draw_augment(rng: np.random.Generator) -> AugmentDraw:
    """Independent 50% vertical flip, 50% horizontal flip, then a rotation
    by a uniform multiple of 90 degrees."""
    return AugmentDraw(
        vflip=bool(rng.random() < 0.5),
        hflip=bool(rng.random() < 0.5),
        quarter_turns=int(rng.integers(0, 4)),
    )


def apply_augment(img: np.ndarray, draw: AugmentDraw) -> np.ndarray:
    out = img
    if draw.vflip:
        out = out[:, ::-1, :]
    if draw.hflip:
        out = out[:, :, ::-1]
    if draw.quarter_turns:
        out = np.rot90(out, k=draw.quarter_turns, axes=(1, 2))
    return np.ascontiguousarray(out)


def augment(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return apply_augment(img, draw_augment(rng))


def rotate_bilinear(img: np.ndarray, angle_deg: float, fill: float = 0.0) -> np.ndarray:
    """Arbitrary-angle rotation (bilinear, about the image center).
    Experimental path behind a flag; the default pipeline sticks to 90-degree
    multiples to avoid interpolation artifacts at small image sizes."""
    c, h, w = img.shape
    theta = np.deg2rad(angle_deg)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    ys = cy + (yy - cy) * np.cos(theta) + (xx - cx) * np.sin(theta)
    xs = cx - (yy - cy) * np.sin(theta) + (xx - cx) * np.cos(theta)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy, fx = ys - y0, xs - x0
    out = np.full_like(img, fill)
    acc = np.zeros((c, h, w), dtype=np.float64)
    for dy in (0, 1):
        for dx in (0, 1):
            yi, xi = y0 + dy, x0 + dx
            wgt = (fy if dy else 1 - fy) * (fx if dx else 1 - fx)
            inside = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            yc, xc = np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)
            acc += wgt * inside * img[:, yc, xc]
    out[:] = acc.astype(img.dtype)
    return out


# ---------------------------------------------------------------------------
# fold construction
# ---------------------------------------------------------------------------


@dataclass
class FoldPlan:
    folds: list  # fold index -> list of subject ids
    inner: list  # fold index -> (train ids, val ids) within the training portion
    fold_of: dict  # subject id -> fold index


def make_folds(labeled, k: int = 10, seed: int = 0, val_fraction: float = 0.2) -> FoldPlan:
    """Seeded stratified k-fold assignment.

    ``labeled`` is a sequence of (subject_id, class_index) pairs.  Members
    of each class are shuffled and dealt to consecutive folds with a cursor
    that carries across classes, so overall fold sizes differ by at most
    one and per-fold class counts stay within one of the global ratio.
    The inner split reserves ~20% of each fold's training portion, again
    stratified, for model selection.
    """
    pairs = sorted((str(i), int(c)) for i, c in labeled)
    if len(pairs) < k:
        raise ValidationError(f"make_folds: {len(pairs)} subjects cannot fill {k} folds")
    by_class: dict[int, list[str]] = {}
    for sid, c in pairs:
        by_class.setdefault(c, []).append(sid)
    rng = np.random.default_rng(seed)
    for c in sorted(by_class):
        if len(by_class[c]) < k:
            warnings.warn(
                f"class {c} has only {len(by_class[c])} members for {k} folds;"
                " stratification is best-effort",
                stacklevel=2,
            )

    folds: list[list[str]] = [[] for _ in range(k)]
    cursor = 0
    for c in sorted(by_class):
        members = list(by_class[c])
        rng.shuffle(members)
        for sid in members:
            folds[cursor % k].append(sid)
            cursor += 1

    label_of = dict(pairs)
    inner = []
    for f in range(k):
        train_ids = [sid for g in range(k) if g != f for sid in folds[g]]
        per_class: dict[int, list[str]] = {}
        for sid in train_ids:
            per_class.setdefault(label_of[sid], []).append(sid)
        tr, va = [], []
        for c in sorted(per_class):
            members = list(per_class[c])
            rng.shuffle(members)
            n_val = int(round(len(members) * val_fraction))
            if n_val == 0 and len(members) > 1:
                n_val = 1
            va.extend(members[:n_val])
            tr.extend(members[n_val:])
        inner.append((sorted(tr), sorted(va)))

    fold_of = {sid: f for f, members in enumerate(folds) for sid in members}
    return FoldPlan(folds=[sorted(m) for m in folds], inner=inner, fold_of=fold_of)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _derive_rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *tags]))


def _batch_arrays(subjects, order, train_cfg: TrainConfig, aug_rng):
    """Yield (images_by_modality, s, labels) batches; one augmentation draw
    per subject is applied to all four of its modality images so the
    co-registered views stay aligned."""
    bsz = train_cfg.batch_size
    for start in range(0, len(order), bsz):
        chunk = [subjects[i] for i in order[start : start + bsz]]
        imgs = []
        for sub in chunk:
            if train_cfg.augment:
                draw = draw_augment(aug_rng)
                imgs.append(np.stack([apply_augment(sub.images[v], draw) for v in range(4)]))
            else:
                imgs.append(sub.images)
        stacked = [np.stack([im[v] for im in imgs]) for v in range(4)]
        svec = np.stack([sub.s for sub in chunk])
        labels = np.array([int(sub.label) for sub in chunk], dtype=np.int64)
        yield stacked, svec, labels


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_accuracy: float


@dataclass
class FoldRun:
    params: ModelParams
    best_epoch: int
    history: list


def _accuracy(subjects, params, plan) -> float:
    preds = predict_many(subjects, params, plan)
    return float(np.mean([int(p) == int(s.label) for p, s in zip(preds, subjects)]))


def train_split(
    train_subjects,
    val_subjects,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    plan,
    fold_index: int = 0,
    epochs: int | None = None,
    stop_at_train_accuracy: float | None = None,
) -> FoldRun:
    """Train on one split, tracking the best inner-validation epoch
    (ties resolve to the earliest).  Raises TrainingDiverged on a
    non-finite loss."""
    epochs = train_cfg.epochs if epochs is None else epochs
    patch = train_subjects[0].images.shape[-1]
    init_rng = _derive_rng(train_cfg.seed, fold_index, 1)
    shuffle_rng = _derive_rng(train_cfg.seed, fold_index, 2)
    aug_rng = _derive_rng(train_cfg.seed, fold_index, 3)
    params = ModelParams(model_cfg, patch, init_rng, dtype=np.float32)
    named = params.named_parameters()
    state = AdamState.init_like(named)

    best_acc, best_epoch, best_arrays = -1.0, 0, params.snapshot()
    history: list[EpochStats] = []
    for epoch in range(1, epochs + 1):
        order = shuffle_rng.permutation(len(train_subjects))
        losses = []
        for stacked, svec, labels in _batch_arrays(train_subjects, order, train_cfg, aug_rng):
            T.zero_grads(named.values())
            with T.Tape() as tape:
                out = compute_outputs(
                    stacked, svec, labels, params, plan, train_cfg.lambda1, train_cfg.lambda2
                )
                loss = out.losses["total"]
                if not np.isfinite(loss.data):
                    raise TrainingDiverged(
                        f"fold {fold_index}: non-finite loss at epoch {epoch}"
                    )
                tape.backward(loss)
            grads = {name: p.grad for name, p in named.items()}
            adam_step(
                named,
                grads,
                state,
                lr=train_cfg.learning_rate,
                weight_decay=train_cfg.weight_decay,
            )
            losses.append(loss.item())
        val_acc = _accuracy(val_subjects, params, plan) if val_subjects else 0.0
        history.append(EpochStats(epoch, float(np.mean(losses)), val_acc))
        if val_acc > best_acc:
            best_acc, best_epoch, best_arrays = val_acc, epoch, params.snapshot()
        if stop_at_train_accuracy is not None:
            if _accuracy(train_subjects, params, plan) >= stop_at_train_accuracy:
                best_epoch, best_arrays = epoch, params.snapshot()
                break
    params.restore(best_arrays)
    return FoldRun(params=params, best_epoch=best_epoch, history=history)


@dataclass
class CVResult:
    report: MetricsReport
    fold_plan: FoldPlan
    best_epochs: list
    histories: list
    audit: list
    echo: dict


def run_cv(
    subjects,
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    k: int = 10,
    out_dir=None,
    echo: dict | None = None,
) -> CVResult:
    """Stratified k-fold cross-validation.

    Per fold: train on the inner-train split (with augmentation when
    enabled), pick the epoch with the best inner-validation accuracy, and
    evaluate that checkpoint once on the held-out fold.  An id-tracking
    audit asserts that no held-out subject ever reaches training or model
    selection.
    """
    by_id = {s.id: s for s in subjects}
    class_sizes = np.bincount([int(s.label) for s in subjects], minlength=N_CLASSES)
    if class_sizes.min() < 3:
        raise ValidationError(
            f"run_cv: need at least 3 subjects per class, got {class_sizes.tolist()}"
        )
    plan_folds = make_folds([(s.id, int(s.label)) for s in subjects], k=k, seed=train_cfg.seed)
    plan = make_run_plan(model_cfg, train_cfg.seed)
    echo = dict(echo or {})

    fold_metrics: list[FoldMetrics] = []
    best_epochs, histories, audit = [], [], []
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)

    try:
        for f in range(k):
            train_ids, val_ids = plan_folds.inner[f]
            test_ids = plan_folds.folds[f]
            overlap = set(test_ids) & (set(train_ids) | set(val_ids))
            if overlap:
                raise SurvfuseError(f"fold {f}: leakage of held-out subjects {sorted(overlap)}")
            audit.append({"fold": f, "train": train_ids, "val": val_ids, "test": test_ids})

            run = train_split(
                [by_id[i] for i in train_ids],
                [by_id[i] for i in val_ids],
                model_cfg,
                train_cfg,
                plan,
                fold_index=f,
            )
            test_subjects = [by_id[i] for i in test_ids]
            preds = predict_many(test_subjects, run.params, plan)
            fm = evaluate([int(p) for p in preds], [int(s.label) for s in test_subjects])
            fold_metrics.append(fm)
            best_epochs.append(run.best_epoch)
            histories.append(run.history)
            if out_dir is not None:
                save_checkpoint(
                    out_dir / "checkpoints" / f"fold_{f}.ckpt",
                    run.params,
                    plan,
                    echo,
                    {"fold": f, "note": "post-training parameters of the best epoch"},
                )
    except TrainingDiverged:
        if out_dir is not None:
            failure = {
                "status": "failed",
                "completed_folds": len(fold_metrics),
                "config": echo,
            }
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / "report.json").write_text(json.dumps(failure, indent=2, sort_keys=True))
        raise

    report = aggregate(fold_metrics)
    result = CVResult(
        report=report,
        fold_plan=plan_folds,
        best_epochs=best_epochs,
        histories=histories,
        audit=audit,
        echo=echo,
    )
    if out_dir is not None:
        write_reports(out_dir, result)
    return result


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------


def report_as_dict(result: CVResult, run_id: str = "") -> dict:
    rep = result.report
    folds = []
    for f, fm in enumerate(rep.folds):
        folds.append(
            {
                "fold": f,
                "best_epoch": result.best_epochs[f],
                "n_test": fm.n,
                "accuracy": fm.accuracy,
                "precision": fm.precision,
                "recall": fm.recall,
                "f_score": fm.f_score,
                "zero_division": fm.zero_division,
                "confusion": fm.confusion.tolist(),
                "per_class": {str(c): v for c, v in fm.per_class.items()},
                "test_subjects": result.fold_plan.folds[f],
            }
        )
    return {
        "run_id": run_id,
        "seed": result.echo.get("seed"),
        "config": result.echo,
        "folds": folds,
        "aggregate": {
            "mean": rep.mean,
            "std": rep.std,
            "std_note": "standard deviation across folds (ddof=1)",
            "confusion_total": rep.confusion_total.tolist(),
        },
        "audit": result.audit,
    }


def write_reports(out_dir, result: CVResult, run_id: str = "") -> None:
    """report.json, report.csv (one row per fold), and the figures that
    accompany them."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = report_as_dict(result, run_id)
    (out_dir / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    lines = ["fold,best_epoch,n_test,accuracy,precision,recall,f_score"]
    for row in payload["folds"]:
        lines.append(
            f"{row['fold']},{row['best_epoch']},{row['n_test']},"
            f"{row['accuracy']:.6f},{row['precision']:.6f},"
            f"{row['recall']:.6f},{row['f_score']:.6f}"
        )
    (out_dir / "report.csv").write_text("\n".join(lines) + "\n")

    from . import plots  # deferred: pulls in matplotlib

    fig_dir = out_dir / "figures"
    fig_dir.mkdir(exist_ok=True)
    plots.save_confusion_heatmap(result.report.confusion_total, fig_dir / "confusion.png")
    plots.save_fold_metric_bars(result.report, fig_dir / "fold_metrics.png")
    plots.save_training_curves(result.histories, fig_dir / "training_curves.png")
