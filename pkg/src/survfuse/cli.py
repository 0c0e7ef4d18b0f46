"""Command-line interface.

Subcommands: synth, preprocess, train, evaluate, predict, sketch-bench,
gradcheck.  Every run prints / writes the effective configuration (and
seed) so results can be reproduced exactly; numeric output on stdout uses
fixed 6-decimal formatting.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import load_settings, run_id
from .data import SynthSpec, generate_synthetic, load_manifest
from .errors import SurvfuseError, ValidationError
from .gradcheck import run_suite
from .harness import run_cv
from .metrics import evaluate as evaluate_metrics
from .model import load_checkpoint, predict, predict_many
from .preprocess import OSClass, PreprocessedSubject, prepare_subject
from .sketch import (
    DescriptorSet,
    circular_convolve,
    compact_bilinear,
    exact_bilinear,
    make_plan,
)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


# ---------------------------------------------------------------------------
# subject preparation shared by train / evaluate / predict
# ---------------------------------------------------------------------------


def _prepare_all(records, patch_size: int, reference_modality: str):
    return [
        prepare_subject(r, patch_size=patch_size, reference_modality=reference_modality)
        for r in records
    ]


def _cache_path(cache_dir) -> Path:
    return Path(cache_dir) / "cache.npz"


def _write_cache(cache_dir, subjects, meta: dict) -> None:
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for sub in subjects:
        arrays[f"{sub.id}|images"] = sub.images
        arrays[f"{sub.id}|s"] = sub.s
        arrays[f"{sub.id}|label"] = np.array(int(sub.label), dtype=np.int64)
    np.savez_compressed(_cache_path(cache_dir), **arrays)
    (cache_dir / "preprocess_config.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _read_cache(cache_dir):
    with np.load(_cache_path(cache_dir)) as blob:
        ids = sorted({key.split("|")[0] for key in blob.files})
        subjects = [
            PreprocessedSubject(
                id=sid,
                images=blob[f"{sid}|images"],
                s=blob[f"{sid}|s"],
                label=OSClass(int(blob[f"{sid}|label"])),
            )
            for sid in ids
        ]
    return subjects


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_synth(args) -> int:
    mix = tuple(float(p) for p in args.class_mix.split(","))
    spec = SynthSpec(
        n_subjects=args.n,
        class_mix=mix,
        dims=(args.dims,) * 3,
        noise_sigma=args.noise,
        seed=args.seed,
        contrast=args.contrast,
    )
    manifest = generate_synthetic(spec, args.out)
    echo = {
        "n_subjects": spec.n_subjects,
        "class_mix": list(spec.class_mix),
        "dims": list(spec.dims),
        "noise_sigma": spec.noise_sigma,
        "seed": spec.seed,
        "contrast": spec.contrast,
    }
    (Path(args.out) / "synth_config.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")
    print(manifest)
    return 0


def _cmd_preprocess(args) -> int:
    records = load_manifest(args.manifest)
    subjects = _prepare_all(records, args.patch_size, args.reference_modality)
    meta = {
        "manifest": str(Path(args.manifest).resolve()),
        "patch_size": args.patch_size,
        "reference_modality": args.reference_modality,
        "n_subjects": len(subjects),
    }
    _write_cache(args.out, subjects, meta)
    print(f"cached {len(subjects)} subjects to {_cache_path(args.out)}")
    return 0


def _settings_from_args(args):
    overrides = {
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "learning_rate": args.learning_rate,
        "weight_decay": args.weight_decay,
        "lambda1": args.lambda1,
        "lambda2": args.lambda2,
        "sketch_dim": args.sketch_dim,
        "feature_dim": args.feature_dim,
        "seed": args.seed,
        "augment": args.augment,
        "patch_size": args.patch_size,
        "folds": args.folds,
        "variant": args.variant,
    }
    for key, raw in args.set or []:
        overrides[key] = raw
    return load_settings(args.config, overrides)


def _cmd_train(args) -> int:
    settings = _settings_from_args(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.cache:
        subjects = _read_cache(args.cache)
    else:
        records = load_manifest(args.manifest)
        subjects = _prepare_all(records, settings.patch_size, settings.reference_modality)
    rid = settings.run_id
    (out_dir / "run_config.json").write_text(
        json.dumps({"run_id": rid, "config": settings.echo}, indent=2, sort_keys=True) + "\n"
    )
    result = run_cv(
        subjects,
        settings.train,
        settings.model,
        k=settings.folds,
        out_dir=out_dir,
        echo=settings.echo,
    )
    from .harness import write_reports

    write_reports(out_dir, result, run_id=rid)
    mean, std = result.report.mean, result.report.std
    print(f"run_id {rid}")
    for key in ("accuracy", "precision", "recall", "f_score"):
        print(f"{key} {_fmt(mean[key])} +/- {_fmt(std[key])}")
    return 0


def _cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    records = load_manifest(args.manifest)
    subjects = _prepare_all(
        records,
        int(ckpt.header["patch_size"]),
        str(ckpt.echo.get("reference_modality", "t1")),
    )
    preds = predict_many(subjects, ckpt.params, ckpt.plan)
    fm = evaluate_metrics([int(p) for p in preds], [int(s.label) for s in subjects])
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "checkpoint": str(Path(args.checkpoint).resolve()),
        "n_subjects": fm.n,
        "accuracy": fm.accuracy,
        "precision": fm.precision,
        "recall": fm.recall,
        "f_score": fm.f_score,
        "zero_division": fm.zero_division,
        "confusion": fm.confusion.tolist(),
        "config": ckpt.echo,
    }
    (out_dir / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    (out_dir / "report.csv").write_text(
        "n,accuracy,precision,recall,f_score\n"
        f"{fm.n},{_fmt(fm.accuracy)},{_fmt(fm.precision)},{_fmt(fm.recall)},{_fmt(fm.f_score)}\n"
    )
    from . import plots

    plots.save_confusion_heatmap(fm.confusion, out_dir / "figures_confusion.png")
    for key in ("accuracy", "precision", "recall", "f_score"):
        print(f"{key} {_fmt(payload[key])}")
    return 0


def _cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    records = load_manifest(args.manifest)
    match = [r for r in records if r.id == args.subject]
    if not match:
        raise ValidationError(f"subject '{args.subject}' not found in manifest")
    subject = prepare_subject(
        match[0],
        patch_size=int(ckpt.header["patch_size"]),
        reference_modality=str(ckpt.echo.get("reference_modality", "t1")),
    )
    cls, probs = predict(subject.images, subject.s, ckpt.params, ckpt.plan)
    print(f"subject {subject.id}")
    print(f"predicted {cls.label}")
    for k, name in enumerate(("short", "mid", "long")):
        print(f"p_{name} {_fmt(float(probs[k]))}")
    return 0


def _cmd_sketch_bench(args) -> int:
    dims = [int(d) for d in args.dims.split(",")]
    rng = np.random.default_rng(args.seed)
    rows = []
    for d in dims:
        errs = []
        for p in range(args.plans):
            plan = make_plan(args.c, d, int(rng.integers(1 << 31)))
            for _ in range(max(1, args.pairs // args.plans)):
                xs = DescriptorSet([rng.standard_normal(args.c) for _ in range(4)])
                ys = DescriptorSet([rng.standard_normal(args.c) for _ in range(4)])
                exact = float(np.sum(exact_bilinear(xs) * exact_bilinear(ys)))
                approx = float(compact_bilinear(xs, plan) @ compact_bilinear(ys, plan))
                errs.append(abs(approx - exact) / abs(exact))
        a = rng.standard_normal(d)
        b = rng.standard_normal(d)
        t0 = time.perf_counter()
        for _ in range(args.reps):
            circular_convolve(a, b, method="direct")
        t_direct = (time.perf_counter() - t0) / args.reps
        t0 = time.perf_counter()
        for _ in range(args.reps):
            circular_convolve(a, b, method="fft")
        t_fft = (time.perf_counter() - t0) / args.reps
        rows.append(
            {
                "d": d,
                "mean_rel_err": float(np.mean(errs)),
                "p95_rel_err": float(np.percentile(errs, 95)),
                "wall_time_direct": t_direct,
                "wall_time_fft": t_fft,
            }
        )

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = ["d,mean_rel_err,p95_rel_err,wall_time_direct,wall_time_fft"]
    for r in rows:
        lines.append(
            f"{r['d']},{_fmt(r['mean_rel_err'])},{_fmt(r['p95_rel_err'])},"
            f"{_fmt(r['wall_time_direct'])},{_fmt(r['wall_time_fft'])}"
        )
    out.write_text("\n".join(lines) + "\n")
    from . import plots

    plots.save_sketch_bench(rows, out.with_suffix(".png"))
    for line in lines:
        print(line)
    return 0


def _cmd_gradcheck(args) -> int:
    results = run_suite(seeds=args.seeds)
    width = max(len(r.name) for r in results)
    failures = 0
    print(f"{'operation'.ljust(width)}  max_rel_err  status")
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        failures += 0 if r.passed else 1
        print(f"{r.name.ljust(width)}  {r.max_rel_err:.3e}    {status}")
    print(f"{failures} failures out of {len(results)} checks")
    return 0 if failures == 0 else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _key_value(raw: str):
    if "=" not in raw:
        raise argparse.ArgumentTypeError(f"expected key=value, got '{raw}'")
    key, value = raw.split("=", 1)
    return key, value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="survfuse",
        description="Multi-modal survival-class prediction pipeline (synthetic-data scale)",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset and manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", type=int, default=32)
    p.add_argument("--class-mix", default="0.3334,0.3333,0.3333")
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--contrast", type=float, default=1.0)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("preprocess", help="cache projected images and feature vectors")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch-size", type=int, default=16)
    p.add_argument("--reference-modality", default="t1")
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("train", help="run stratified k-fold cross-validation training")
    p.add_argument("--manifest")
    p.add_argument("--cache", help="preprocess cache directory (skips raw volumes)")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON config file; flags override file values")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--sketch-dim", dest="sketch_dim", type=int)
    p.add_argument("--feature-dim", dest="feature_dim", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--augment", dest="augment", action="store_const", const=True, default=None)
    p.add_argument("--no-augment", dest="augment", action="store_const", const=False)
    p.add_argument("--patch-size", dest="patch_size", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--variant", choices=("full", "branch_only", "shared_only"))
    p.add_argument("--set", action="append", type=_key_value, metavar="KEY=VALUE",
                   help="override any config key")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="metrics of a checkpoint over a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("predict", help="single-subject class probabilities")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--subject", required=True)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("sketch-bench", help="approximation error / latency CSV and figure")
    p.add_argument("--out", required=True)
    p.add_argument("--dims", default="256,512,1024,2048")
    p.add_argument("--c", type=int, default=64)
    p.add_argument("--pairs", type=int, default=40)
    p.add_argument("--plans", type=int, default=4)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_sketch_bench)

    p = sub.add_parser("gradcheck", help="finite-difference pass/fail table at 64-bit")
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SurvfuseError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
