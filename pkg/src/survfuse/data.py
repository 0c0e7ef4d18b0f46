"""On-disk formats and synthetic data generation.

RVOL is a tiny binary volume container: magic "RVOL", version u16, dtype
code u16 (0 = float32), dims D,H,W as u32, then D*H*W little-endian
float32 scalars in row-major order (W fastest).  The dataset manifest is a
CSV with one subject per row referencing five RVOL files by relative path.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ManifestError, ValidationError
from .preprocess import MODALITIES, OSClass, SubjectRecord, Volume3D

RVOL_MAGIC = b"RVOL"
RVOL_VERSION = 1
RVOL_DTYPE_F32 = 0
_HEADER = struct.Struct("<4sHHIII")  # magic, version, dtype, D, H, W

MANIFEST_COLUMNS = ["subject_id", "age", "survival_days", "t1", "t1ce", "t2", "flair", "seg"]


def write_rvol(path, vol: Volume3D) -> None:
    data = np.ascontiguousarray(vol.voxels, dtype="<f4")
    d, h, w = vol.dims
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(RVOL_MAGIC, RVOL_VERSION, RVOL_DTYPE_F32, d, h, w))
        fh.write(data.tobytes())


def _read_header(fh, path):
    raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} of {_HEADER.size} bytes)", offset=len(raw))
    magic, version, dtype, d, h, w = _HEADER.unpack(raw)
    if magic != RVOL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    if version != RVOL_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    if dtype != RVOL_DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype code {dtype}", offset=6)
    return d, h, w


def read_rvol_header(path) -> tuple[int, int, int]:
    """Volume dims from the header alone; the payload is never read."""
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def read_rvol(path, kind: str = "intensity") -> Volume3D:
    with open(path, "rb") as fh:
        d, h, w = _read_header(fh, path)
        expected = 4 * d * h * w
        payload = fh.read(expected + 1)
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload size mismatch, expected {expected} bytes, found {len(payload)}",
            offset=_HEADER.size + min(len(payload), expected),
        )
    voxels = np.frombuffer(payload, dtype="<f4").reshape(d, h, w)
    return Volume3D(voxels.copy(), kind=kind)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


def load_manifest(path) -> list[SubjectRecord]:
    """Parse and validate a manifest CSV, reporting every invalid row.

    Validation covers duplicate ids, unreadable or missing volume files,
    dimension mismatches within a subject, and non-positive survival.
    """
    path = Path(path)
    base = path.parent
    problems: list[str] = []
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_COLUMNS:
            raise ManifestError(
                [f"header mismatch: expected {MANIFEST_COLUMNS}, got {reader.fieldnames}"]
            )
        for lineno, row in enumerate(reader, start=2):
            rows.append((lineno, row))

    seen: dict[str, int] = {}
    parsed = []
    for lineno, row in rows:
        sid = (row["subject_id"] or "").strip()
        ok = True
        if not sid:
            problems.append(f"row {lineno}: empty subject_id")
            ok = False
        elif sid in seen:
            problems.append(
                f"duplicate subject_id '{sid}' at rows {seen[sid]} and {lineno}"
            )
            ok = False
        else:
            seen[sid] = lineno

        try:
            age = float(row["age"])
        except (TypeError, ValueError):
            problems.append(f"row {lineno}: age '{row['age']}' is not a number")
            ok = False
            age = 0.0
        try:
            survival = float(row["survival_days"])
            if not survival > 0:
                problems.append(f"row {lineno}: survival_days must be positive, got {survival}")
                ok = False
        except (TypeError, ValueError):
            problems.append(f"row {lineno}: survival_days '{row['survival_days']}' is not a number")
            ok = False
            survival = 0.0

        dims_seen = {}
        for col in MODALITIES + ("seg",):
            rel = (row[col] or "").strip()
            fpath = base / rel
            if not rel or not fpath.is_file():
                problems.append(f"row {lineno}: {col} file not found: '{rel}'")
                ok = False
                continue
            try:
                dims_seen[col] = read_rvol_header(fpath)
            except FormatError as err:
                problems.append(f"row {lineno}: {col}: {err}")
                ok = False
        if len(set(dims_seen.values())) > 1:
            detail = ", ".join(f"{c}={d}" for c, d in sorted(dims_seen.items()))
            problems.append(f"row {lineno}: volume dims disagree ({detail})")
            ok = False
        if ok:
            parsed.append((lineno, sid, age, survival, row))

    if problems:
        raise ManifestError(problems)

    records = []
    for lineno, sid, age, survival, row in parsed:
        volumes = {m: read_rvol(base / row[m].strip(), kind="intensity") for m in MODALITIES}
        mask = read_rvol(base / row["seg"].strip(), kind="mask")
        records.append(
            SubjectRecord(id=sid, age=age, survival_days=survival, volumes=volumes, mask=mask)
        )
    return records


def write_manifest(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic cohort generator.

    Tumor blob size and contrast grow monotonically with the class; each
    class also carries a distinct cross-modality contrast pattern so the
    signal is genuinely multi-modal.  Survival days are drawn strictly
    inside each class's day interval, so binning them recovers the
    generator label exactly.
    """

    n_subjects: int
    class_mix: tuple = (1 / 3, 1 / 3, 1 / 3)
    dims: tuple = (32, 32, 32)
    noise_sigma: float = 0.05
    seed: int = 0
    base_radius: float = 0.16
    radius_step: float = 0.05
    radius_jitter: float = 0.06
    contrast: float = 1.0
    center_jitter: float = 0.05

    def __post_init__(self):
        if self.n_subjects < 3:
            raise ValidationError("SynthSpec: need at least 3 subjects")
        if len(self.class_mix) != 3 or abs(sum(self.class_mix) - 1.0) > 1e-9:
            raise ValidationError(f"SynthSpec: class_mix must sum to 1, got {self.class_mix}")
        if min(self.class_mix) < 0:
            raise ValidationError("SynthSpec: class_mix entries must be non-negative")
        if len(self.dims) != 3 or min(self.dims) < 8:
            raise ValidationError(f"SynthSpec: dims too small: {self.dims}")
        if self.noise_sigma < 0:
            raise ValidationError("SynthSpec: noise_sigma must be non-negative")


# survival-day sampling intervals per class, strictly inside the class bins
SURVIVAL_RANGES = {OSClass.SHORT: (40.0, 300.0), OSClass.MID: (308.0, 452.0), OSClass.LONG: (460.0, 1500.0)}
AGE_MEANS = (63.0, 55.0, 45.0)

# per-class boost applied to tumor intensity in (t1, t1ce, t2, flair); no
# single column separates all three classes, their combination does
MODALITY_BOOST = (
    (1.6, 0.6, 1.6, 0.6),
    (1.6, 1.6, 0.6, 0.6),
    (0.6, 1.6, 0.6, 1.6),
)
MODALITY_BASE = (1.0, 0.9, 1.1, 0.95)

# (core, enhancing) shell boundaries as fractions of the tumor radius
SHELL_BOUNDS = ((0.40, 0.70), (0.52, 0.78), (0.62, 0.86))


def class_counts(spec: SynthSpec) -> list[int]:
    """Largest-remainder apportionment of n_subjects across the mix."""
    raw = [spec.n_subjects * p for p in spec.class_mix]
    counts = [int(np.floor(r)) for r in raw]
    remainder = spec.n_subjects - sum(counts)
    order = sorted(range(3), key=lambda i: raw[i] - counts[i], reverse=True)
    for i in order[:remainder]:
        counts[i] += 1
    return counts


def _subject_labels(spec: SynthSpec) -> list[int]:
    queues = [[k] * n for k, n in enumerate(class_counts(spec))]
    labels = []
    while any(queues):
        for q in queues:
            if q:
                labels.append(q.pop())
    return labels


def _radial_grid(dims) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return np.meshgrid(
        np.arange(dims[0], dtype=np.float64),
        np.arange(dims[1], dtype=np.float64),
        np.arange(dims[2], dtype=np.float64),
        indexing="ij",
    )


def generate_subject_volumes(spec: SynthSpec, label: int, rng: np.random.Generator):
    """Four intensity volumes plus the label mask for one subject."""
    dims = np.array(spec.dims, dtype=np.float64)
    gz, gy, gx = _radial_grid(spec.dims)

    brain_center = (dims - 1) / 2.0
    brain_radii = dims * np.array([0.46, 0.44, 0.42])
    brain = (
        ((gz - brain_center[0]) / brain_radii[0]) ** 2
        + ((gy - brain_center[1]) / brain_radii[1]) ** 2
        + ((gx - brain_center[2]) / brain_radii[2]) ** 2
    ) <= 1.0

    center = brain_center + rng.uniform(-spec.center_jitter, spec.center_jitter, size=3) * dims
    radius = (
        (spec.base_radius + label * spec.radius_step)
        * (1.0 + rng.uniform(-spec.radius_jitter, spec.radius_jitter))
        * float(dims.min())
    )
    rho = np.sqrt((gz - center[0]) ** 2 + (gy - center[1]) ** 2 + (gx - center[2]) ** 2) / radius

    core_f, enh_f = SHELL_BOUNDS[label]
    inside = (rho <= 1.0) & brain
    mask = np.zeros(spec.dims, dtype=np.float32)
    mask[inside & (rho <= core_f)] = 1.0
    mask[inside & (rho > core_f) & (rho <= enh_f)] = 4.0
    mask[inside & (rho > enh_f)] = 2.0

    volumes = {}
    for m_idx, modality in enumerate(MODALITIES):
        vol = np.zeros(spec.dims, dtype=np.float64)
        vol[brain] = MODALITY_BASE[m_idx]
        vol[inside] += MODALITY_BOOST[label][m_idx] * spec.contrast
        if spec.noise_sigma > 0:
            noise = rng.normal(0.0, spec.noise_sigma, size=spec.dims)
            vol[brain] += noise[brain]
        else:
            rng.normal(0.0, 1.0, size=spec.dims)  # keep the draw sequence stable
        volumes[modality] = Volume3D(vol.astype(np.float32), kind="intensity")
    return volumes, Volume3D(mask, kind="mask")


def generate_synthetic(spec: SynthSpec, out_dir) -> Path:
    """Write a full synthetic cohort and its manifest; returns the manifest
    path.  Deterministic for a given spec."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    labels = _subject_labels(spec)

    rows = []
    for i, label in enumerate(labels):
        sid = f"sub{i:03d}"
        volumes, mask = generate_subject_volumes(spec, label, rng)
        age = float(np.clip(rng.normal(AGE_MEANS[label], 4.0), 20.0, 90.0))
        lo, hi = SURVIVAL_RANGES[OSClass(label)]
        survival = float(rng.uniform(lo, hi))
        files = {}
        for modality in MODALITIES:
            fname = f"{sid}_{modality}.rvol"
            write_rvol(out_dir / fname, volumes[modality])
            files[modality] = fname
        seg_name = f"{sid}_seg.rvol"
        write_rvol(out_dir / seg_name, mask)
        rows.append(
            [sid, f"{age:.2f}", f"{survival:.2f}"]
            + [files[m] for m in MODALITIES]
            + [seg_name]
        )

    manifest = out_dir / "manifest.csv"
    write_manifest(manifest, rows)
    return manifest
