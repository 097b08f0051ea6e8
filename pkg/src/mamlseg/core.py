"""Domain types, intensity preprocessing and segmentation metrics.

Conventions used throughout the package:

* standard deviations are population statistics (divide by N);
* Dice of two empty masks is 1.0, Dice with exactly one empty mask is 0.0;
* ASSD surfaces use 6-connectivity (a foreground voxel is on the surface
  when a face neighbour is background or lies outside the volume);
* ASSD with an empty mask is undefined and returned as NaN, which the
  aggregation helpers count as a missing value instead of averaging.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

ZSCORE_EPS = 1e-8


class DataQualityError(ValueError):
    """Raised when input intensities cannot be processed (NaN, inf, ...)."""


class RegistrationRequiredError(ValueError):
    """Raised when volumes of one case do not share a voxel grid."""


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    modality: str = ""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume must be 3D with non-empty axes, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self):
        return self.data.shape

    def with_data(self, data):
        return Volume(data, self.spacing, self.modality)


@dataclass(frozen=True)
class Mask:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"mask must be 3D, got shape {data.shape}")
        if not np.isin(data, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        object.__setattr__(self, "data", data.astype(np.uint8, copy=False))

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class MultiModalCase:
    volumes: dict[str, Volume]
    mask: Mask
    case_id: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.volumes:
            raise ValueError("a case needs at least one modality")
        shapes = {v.shape for v in self.volumes.values()}
        spacings = {v.spacing for v in self.volumes.values()}
        if len(shapes) > 1 or len(spacings) > 1:
            raise RegistrationRequiredError(
                f"case {self.case_id!r}: modalities differ in shape/spacing "
                f"({sorted(shapes)}, {sorted(spacings)}); register them first"
            )
        if self.mask.shape != next(iter(shapes)):
            raise RegistrationRequiredError(
                f"case {self.case_id!r}: mask shape {self.mask.shape} != volume shape {next(iter(shapes))}"
            )
        for name, vol in self.volumes.items():
            if vol.modality != name:
                object.__setattr__(vol, "modality", name)

    @property
    def modalities(self):
        return tuple(sorted(self.volumes))

    @property
    def shape(self):
        return self.mask.shape

    @property
    def spacing(self):
        return next(iter(self.volumes.values())).spacing


def _check_finite(data):
    if not np.all(np.isfinite(data)):
        raise DataQualityError("volume contains non-finite values")


def percentile_bounds(vol: Volume, lo_pct: float = 0.5, hi_pct: float = 99.5):
    """Intensity values at the two percentiles (linear interpolation between closest ranks)."""
    if not 0 <= lo_pct < hi_pct <= 100:
        raise ValueError(f"need 0 <= lo_pct < hi_pct <= 100, got {lo_pct}, {hi_pct}")
    _check_finite(vol.data)
    lo, hi = np.percentile(vol.data, [lo_pct, hi_pct])
    return float(lo), float(hi)


def clip_percentile(vol: Volume, lo_pct: float = 0.5, hi_pct: float = 99.5) -> Volume:
    """Truncate intensities to the [lo_pct, hi_pct] percentile range.

    Clipping again with the returned bounds is a no-op; recomputing the
    percentiles on the clipped volume can give slightly tighter bounds.
    """
    lo, hi = percentile_bounds(vol, lo_pct, hi_pct)
    return vol.with_data(np.clip(vol.data, lo, hi))


def zscore_normalize(vol: Volume, eps: float = ZSCORE_EPS) -> Volume:
    data = np.asarray(vol.data, dtype=np.float64)
    if data.size < 2:
        raise ValueError("z-score normalisation needs more than one voxel")
    _check_finite(data)
    centered = data - data.mean()
    std = data.std()
    if std < eps:
        return vol.with_data(np.zeros_like(data))
    return vol.with_data(centered / (std + eps))


def preprocess_volume(vol: Volume, lo_pct=0.5, hi_pct=99.5) -> Volume:
    return zscore_normalize(clip_percentile(vol, lo_pct, hi_pct))


def preprocess_case(case: MultiModalCase, lo_pct=0.5, hi_pct=99.5) -> MultiModalCase:
    vols = {m: preprocess_volume(v, lo_pct, hi_pct) for m, v in case.volumes.items()}
    return MultiModalCase(vols, case.mask, case.case_id, dict(case.meta))


def _as_bool(mask):
    if isinstance(mask, Mask):
        return mask.data.astype(bool)
    return np.asarray(mask).astype(bool)


def dice_score(pred, gt) -> float:
    p, g = _as_bool(pred), _as_bool(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    total = p.sum() + g.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, g).sum() / total)


_FACE_STRUCTURE = ndimage.generate_binary_structure(3, 1)


def surface_voxels(mask) -> np.ndarray:
    """Boolean map of foreground voxels touching background or the border."""
    m = _as_bool(mask)
    eroded = ndimage.binary_erosion(m, structure=_FACE_STRUCTURE, border_value=0)
    return m & ~eroded


def assd(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float:
    """Average symmetric surface distance in the units of ``spacing``.

    Returns NaN when either mask is empty.
    """
    p, g = _as_bool(pred), _as_bool(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    if not p.any() or not g.any():
        return float("nan")
    sp, sg = surface_voxels(p), surface_voxels(g)
    spacing = tuple(float(s) for s in spacing)
    # distance of every voxel to the nearest surface voxel of the other mask
    to_g = ndimage.distance_transform_edt(~sg, sampling=spacing)
    to_p = ndimage.distance_transform_edt(~sp, sampling=spacing)
    d_pg = to_g[sp]
    d_gp = to_p[sg]
    return float((d_pg.sum() + d_gp.sum()) / (d_pg.size + d_gp.size))


def aggregate_per_case(values) -> tuple[float, float]:
    """Mean and population std of per-case values."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot aggregate an empty list")
    return float(arr.mean()), float(arr.std())


def aggregate_with_missing(values) -> tuple[float, float, int]:
    """Like :func:`aggregate_per_case` but NaN entries are skipped and counted."""
    arr = np.asarray(list(values), dtype=np.float64)
    missing = int(np.isnan(arr).sum())
    present = arr[~np.isnan(arr)]
    if present.size == 0:
        return float("nan"), float("nan"), missing
    mean, std = aggregate_per_case(present)
    return mean, std, missing
