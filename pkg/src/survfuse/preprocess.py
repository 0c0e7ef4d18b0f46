"""Subject preprocessing: tumor-centered patch extraction, axis-averaged
2D projections, supplemental features, and survival-class binning.

All functions are pure; subjects can be processed in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import DimensionError, PreprocessError, ValidationError

MODALITIES = ("t1", "t1ce", "t2", "flair")
MASK_LABELS = (0.0, 1.0, 2.0, 4.0)

# class bounds are stated in months, survival labels in days
DAYS_PER_MONTH = 365.25 / 12.0  # 30.4375
SHORT_MAX_MONTHS = 10.0
LONG_MIN_MONTHS = 15.0

DEFAULT_PATCH = 124


class OSClass(IntEnum):
    SHORT = 0
    MID = 1
    LONG = 2

    @property
    def label(self) -> str:
        return self.name.lower()


@dataclass
class Volume3D:
    """Dense 3D scalar grid: one MR modality or a segmentation mask."""

    voxels: np.ndarray
    kind: str = "intensity"

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise DimensionError(f"Volume3D: expected 3 axes, got shape {self.voxels.shape}")
        if self.kind not in ("intensity", "mask"):
            raise ValidationError(f"Volume3D: unknown kind '{self.kind}'")
        if self.kind == "mask":
            values = np.unique(self.voxels)
            if not np.all(np.isin(values, MASK_LABELS)):
                bad = [v for v in values.tolist() if v not in MASK_LABELS]
                raise ValidationError(f"Volume3D: mask contains labels outside {{0,1,2,4}}: {bad}")
        elif not np.all(np.isfinite(self.voxels)):
            raise ValidationError("Volume3D: intensity volume contains non-finite values")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass
class SubjectRecord:
    """One subject: four co-registered modalities, mask, age, survival."""

    id: str
    age: float
    survival_days: float
    volumes: dict
    mask: Volume3D

    def __post_init__(self):
        missing = [m for m in MODALITIES if m not in self.volumes]
        if missing:
            raise ValidationError(f"SubjectRecord {self.id}: missing modalities {missing}")
        dims = self.mask.dims
        for name, vol in self.volumes.items():
            if vol.dims != dims:
                raise DimensionError(
                    f"SubjectRecord {self.id}: {name} dims {vol.dims} != mask dims {dims}"
                )
        if not self.survival_days > 0:
            raise ValidationError(f"SubjectRecord {self.id}: survival_days must be positive")


@dataclass
class SupplementalFeatures:
    """Relative tumor-region sizes plus scaled age, in fixed vector order
    [s_total, s1, s2, s3, s_age]."""

    s_total: float
    s1: float
    s2: float
    s3: float
    s_age: float

    def __post_init__(self):
        if not 0.0 <= self.s_total <= 1.0:
            raise ValidationError(f"SupplementalFeatures: s_total={self.s_total} outside [0,1]")
        if abs(self.s1 + self.s2 + self.s3 - 1.0) > 1e-9:
            raise ValidationError("SupplementalFeatures: s1+s2+s3 must equal 1")

    def vector(self, dtype=np.float64) -> np.ndarray:
        return np.array([self.s_total, self.s1, self.s2, self.s3, self.s_age], dtype=dtype)


def os_class(survival_days: float, days_per_month: float = DAYS_PER_MONTH) -> OSClass:
    """Bin a survival duration (days) into Short/Mid/Long.

    Boundaries are inclusive on the outer classes: at most 10 months is
    Short, at least 15 months is Long, Mid is the open interval between.
    """
    if not survival_days > 0:
        raise ValidationError(f"os_class: survival_days must be positive, got {survival_days}")
    if survival_days <= SHORT_MAX_MONTHS * days_per_month:
        return OSClass.SHORT
    if survival_days >= LONG_MIN_MONTHS * days_per_month:
        return OSClass.LONG
    return OSClass.MID


def supplemental_features(mask: Volume3D, reference: Volume3D, age: float) -> SupplementalFeatures:
    """Tumor-region size ratios from the mask, total size relative to the
    nonzero support of the reference intensity volume, and age/100."""
    if mask.kind != "mask":
        raise ValidationError("supplemental_features: first volume must be a mask")
    if mask.dims != reference.dims:
        raise DimensionError(
            f"supplemental_features: mask dims {mask.dims} != reference dims {reference.dims}"
        )
    vox = mask.voxels
    n1 = int(np.count_nonzero(vox == 1))
    n2 = int(np.count_nonzero(vox == 2))
    n3 = int(np.count_nonzero(vox == 4))
    total = n1 + n2 + n3
    if total == 0:
        raise PreprocessError("mask contains no tumor voxels")
    n_nonzero = int(np.count_nonzero(reference.voxels))
    if n_nonzero == 0:
        raise PreprocessError("reference volume has empty nonzero support")
    if total > n_nonzero:
        raise PreprocessError("tumor support exceeds the reference nonzero support")
    return SupplementalFeatures(
        s_total=total / n_nonzero,
        s1=n1 / total,
        s2=n2 / total,
        s3=n3 / total,
        s_age=age / 100.0,
    )


def tumor_centroid(mask: Volume3D) -> np.ndarray:
    nz = np.nonzero(mask.voxels)
    if nz[0].size == 0:
        raise PreprocessError("mask has no nonzero voxels")
    return np.array([axis.mean() for axis in nz])


def trilinear_resize(vol: np.ndarray, out_shape) -> np.ndarray:
    """Trilinear resampling with corner-aligned coordinates, so constants
    are preserved and an equal-shape resize is the identity."""
    vol = np.asarray(vol, dtype=np.float64)
    out_shape = tuple(int(s) for s in out_shape)
    if vol.ndim != 3 or len(out_shape) != 3 or min(out_shape) < 1:
        raise DimensionError(f"trilinear_resize: bad shapes {vol.shape} -> {out_shape}")

    def axis_coords(n_in: int, n_out: int) -> np.ndarray:
        if n_out == 1:
            return np.array([0.5 * (n_in - 1)])
        return np.arange(n_out) * (n_in - 1) / (n_out - 1)

    coords = [axis_coords(vol.shape[i], out_shape[i]) for i in range(3)]
    lo = [np.floor(c).astype(np.int64) for c in coords]
    hi = [np.minimum(l + 1, vol.shape[i] - 1) for i, l in enumerate(lo)]
    frac = [c - l for c, l in zip(coords, lo)]

    out = np.zeros(out_shape, dtype=np.float64)
    for dz in (0, 1):
        wz = (frac[0] if dz else 1 - frac[0])[:, None, None]
        iz = (hi[0] if dz else lo[0])[:, None, None]
        for dy in (0, 1):
            wy = (frac[1] if dy else 1 - frac[1])[None, :, None]
            iy = (hi[1] if dy else lo[1])[None, :, None]
            for dx in (0, 1):
                wx = (frac[2] if dx else 1 - frac[2])[None, None, :]
                ix = (hi[2] if dx else lo[2])[None, None, :]
                out += wz * wy * wx * vol[iz, iy, ix]
    return out


def extract_patch(v: Volume3D, mask: Volume3D, size=(DEFAULT_PATCH,) * 3) -> Volume3D:
    """Cut a cubic window centered at the tumor centroid and resample it.

    The window side equals the largest extent of the mask's nonzero
    bounding box; samples falling outside the volume are zero.  The window
    is then trilinearly resized to ``size``.
    """
    size = tuple(int(s) for s in size)
    if len(size) != 3 or size[0] != size[1] or size[1] != size[2] or size[0] < 1:
        raise DimensionError(f"extract_patch: size must be cubic, got {size}")
    if v.dims != mask.dims:
        raise DimensionError(f"extract_patch: volume dims {v.dims} != mask dims {mask.dims}")
    nz = np.nonzero(mask.voxels)
    if nz[0].size == 0:
        raise PreprocessError("mask has no nonzero voxels")
    centroid = np.array([axis.mean() for axis in nz])
    center = np.floor(centroid + 0.5).astype(np.int64)
    side = int(max(int(axis.max()) - int(axis.min()) + 1 for axis in nz))

    starts = center - side // 2
    crop = np.zeros((side, side, side), dtype=np.float64)
    idx = [starts[a] + np.arange(side) for a in range(3)]
    valid = [(ix >= 0) & (ix < v.dims[a]) for a, ix in enumerate(idx)]
    clipped = [np.clip(ix, 0, v.dims[a] - 1) for a, ix in enumerate(idx)]
    crop = v.voxels[np.ix_(clipped[0], clipped[1], clipped[2])].astype(np.float64)
    crop *= valid[0][:, None, None]
    crop *= valid[1][None, :, None]
    crop *= valid[2][None, None, :]

    return Volume3D(trilinear_resize(crop, size), kind="intensity")


def project_axes(patch, normalize: bool = True, variance_floor: float = 1e-8) -> np.ndarray:
    """Average a cubic volume along each axis into a 3-channel 2D image;
    channels are standardized to zero mean / unit variance afterward."""
    vox = patch.voxels if isinstance(patch, Volume3D) else np.asarray(patch)
    if vox.ndim != 3 or not (vox.shape[0] == vox.shape[1] == vox.shape[2]):
        raise DimensionError(f"project_axes: expects a cubic volume, got {vox.shape}")
    channels = np.stack([vox.mean(axis=a) for a in range(3)])
    if normalize:
        channels = standardize_channels(channels, variance_floor)
    return channels


def standardize_channels(img: np.ndarray, variance_floor: float = 1e-8) -> np.ndarray:
    """Per-channel zero mean, unit variance; the variance is floored so a
    constant channel maps to zeros instead of dividing by zero."""
    img = np.asarray(img, dtype=np.float64)
    mean = img.mean(axis=(1, 2), keepdims=True)
    var = img.var(axis=(1, 2), keepdims=True)
    return (img - mean) / np.sqrt(np.maximum(var, variance_floor))


@dataclass
class PreprocessedSubject:
    """Model-ready subject: per-modality projected images, supplemental
    feature vector, and the class label."""

    id: str
    images: np.ndarray  # (4, 3, P, P)
    s: np.ndarray  # (5,)
    label: OSClass


def prepare_subject(
    record: SubjectRecord,
    patch_size: int = DEFAULT_PATCH,
    reference_modality: str = "t1",
    days_per_month: float = DAYS_PER_MONTH,
    dtype=np.float32,
) -> PreprocessedSubject:
    """Full preprocessing for one subject; errors carry the subject id."""
    try:
        feats = supplemental_features(
            record.mask, record.volumes[reference_modality], record.age
        )
        size = (patch_size,) * 3
        images = np.stack(
            [
                project_axes(extract_patch(record.volumes[m], record.mask, size))
                for m in MODALITIES
            ]
        ).astype(dtype)
    except PreprocessError as err:
        err.subject_id = record.id
        raise
    label = os_class(record.survival_days, days_per_month)
    return PreprocessedSubject(
        id=record.id, images=images, s=feats.vector(dtype), label=label
    )
