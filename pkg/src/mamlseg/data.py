"""Synthetic complementary datasets, patch sampling, augmentation and loading.

Synthetic cases
---------------
Each lesion is an axis-aligned ellipsoid with semi-axes ``a`` (voxel units)
around a centre ``c``; voxel ``x`` belongs to it when
``sum(((x - c) / a) ** 2) <= 1``. Its interior uses the same rule with
semi-axes ``a - t`` where the rim thickness ``t`` is drawn from {1, 2}.

* the body-contrast modality brightens lesion interiors only;
* the rim-contrast modality brightens the rim shell (lesion minus interior) only;
* the mask is the whole lesion.

Decoys make the two views genuinely complementary: solid blobs that appear
only in the body modality and hollow shells that appear only in the rim
modality. Neither is part of the mask, so a lesion is identified only by the
coincidence of a bright interior in one modality and a bright rim in the other.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import Mask, MultiModalCase, RegistrationRequiredError, Volume, preprocess_volume
from .io import load_mask, load_volume, save_mask, save_volume


class GeometryError(ValueError):
    pass


@dataclass
class SynthSpec:
    num_cases: int = 8
    shape: tuple = (32, 32, 32)
    lesion_count_range: tuple = (1, 2)
    lesion_radius_range: tuple = (3.5, 6.0)
    body_contrast_modality: str = "AP"
    rim_contrast_modality: str = "VP"
    noise_sigma: float = 0.1
    seed: int = 0
    decoy_count_range: tuple = (1, 1)
    rim_thickness_range: tuple = (1, 2)
    contrast: float = 1.0
    background_amplitude: float = 0.15
    spacing: tuple = (1.0, 1.0, 1.0)
    max_tries: int = 200

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if self.body_contrast_modality == self.rim_contrast_modality:
            raise ValueError("body and rim modalities must differ")
        lo, hi = self.lesion_radius_range
        if not 0 < lo <= hi:
            raise GeometryError(f"bad radius range {self.lesion_radius_range}")
        if 2 * hi + 2 > min(self.shape):
            raise GeometryError(f"radius {hi} does not fit in shape {self.shape}")
        if lo <= max(self.rim_thickness_range):
            raise GeometryError("lesion radius must exceed rim thickness")

    def to_dict(self):
        return asdict(self)


@dataclass
class PatchSpec:
    size: tuple = (32, 32, 32)
    foreground_bias: float = 0.5

    def __post_init__(self):
        self.size = tuple(int(s) for s in self.size)
        if not 0 <= self.foreground_bias <= 1:
            raise ValueError("foreground_bias must lie in [0, 1]")


def ellipsoid_mask(shape, center, semi_axes):
    """Voxels with ``sum(((x - c) / a)^2) <= 1`` (the generator's inclusion rule)."""
    grids = np.ogrid[tuple(slice(0, s) for s in shape)]
    acc = np.zeros(shape, dtype=np.float64)
    for g, c, a in zip(grids, center, semi_axes):
        acc = acc + ((g - c) / a) ** 2
    return acc <= 1.0


def _smooth_background(rng, shape, amplitude):
    field_ = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=4.0, mode="wrap")
    field_ /= field_.std() + 1e-12
    return amplitude * field_


def _place(rng, spec, occupied, n):
    """Draw ``n`` non-overlapping ellipsoids; returns (center, semi_axes, thickness)."""
    placed = []
    lo, hi = spec.lesion_radius_range
    for _ in range(n):
        for _ in range(spec.max_tries):
            axes = rng.uniform(lo, hi, size=3)
            center = np.array([rng.uniform(a + 1, s - a - 2) for a, s in zip(axes, spec.shape)])
            region = ellipsoid_mask(spec.shape, center, axes + 1.0)
            if not (region & occupied).any():
                occupied |= region
                t = int(rng.integers(spec.rim_thickness_range[0], spec.rim_thickness_range[1] + 1))
                placed.append((center, axes, t))
                break
        else:
            raise GeometryError(f"could not place {n} objects in shape {spec.shape}")
    return placed


def _shell(shape, center, axes, t):
    full = ellipsoid_mask(shape, center, axes)
    inner = ellipsoid_mask(shape, center, axes - t)
    return full, inner, full & ~inner


def case_rng(seed, case_id):
    """Independent generator per (seed, case_id), stable across processes."""
    digest = hashlib.sha256(f"{seed}:{case_id}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def generate_case(spec: SynthSpec, case_id: str) -> MultiModalCase:
    rng = case_rng(spec.seed, case_id)
    shape = spec.shape
    occupied = np.zeros(shape, dtype=bool)
    n_les = int(rng.integers(spec.lesion_count_range[0], spec.lesion_count_range[1] + 1))
    n_blob = int(rng.integers(spec.decoy_count_range[0], spec.decoy_count_range[1] + 1))
    n_shell = int(rng.integers(spec.decoy_count_range[0], spec.decoy_count_range[1] + 1))
    lesions = _place(rng, spec, occupied, n_les)
    blobs = _place(rng, spec, occupied, n_blob)
    shells = _place(rng, spec, occupied, n_shell)

    mask = np.zeros(shape, dtype=bool)
    interior = np.zeros(shape, dtype=bool)
    rim = np.zeros(shape, dtype=bool)
    for center, axes, t in lesions:
        full, inner, shell = _shell(shape, center, axes, t)
        mask |= full
        interior |= inner
        rim |= shell
    body_signal = interior.copy()
    rim_signal = rim.copy()
    for center, axes, t in blobs:
        body_signal |= _shell(shape, center, axes, t)[1]
    for center, axes, t in shells:
        rim_signal |= _shell(shape, center, axes, t)[2]

    vols = {}
    for name, signal in ((spec.body_contrast_modality, body_signal), (spec.rim_contrast_modality, rim_signal)):
        data = _smooth_background(rng, shape, spec.background_amplitude)
        data = data + spec.contrast * signal + spec.noise_sigma * rng.standard_normal(shape)
        vols[name] = Volume(data.astype(np.float32), spec.spacing, name)
    meta = {
        "lesions": [(c.tolist(), a.tolist(), t) for c, a, t in lesions],
        "interior": interior,
        "rim": rim,
        "num_lesions": n_les,
    }
    return MultiModalCase(vols, Mask(mask), case_id, meta)


def generate_synthetic(spec: SynthSpec) -> list[MultiModalCase]:
    return [generate_case(spec, f"case_{i:03d}") for i in range(spec.num_cases)]


def _check_fits(shape, size):
    if any(p > s for p, s in zip(size, shape)):
        raise ValueError(f"patch {tuple(size)} larger than volume {tuple(shape)}")


def crop_case(case: MultiModalCase, start, size) -> MultiModalCase:
    sl = tuple(slice(int(a), int(a) + int(s)) for a, s in zip(start, size))
    vols = {m: v.with_data(v.data[sl]) for m, v in case.volumes.items()}
    meta = {k: (v[sl] if isinstance(v, np.ndarray) and v.shape == case.shape else v) for k, v in case.meta.items()}
    meta["crop_start"] = tuple(int(a) for a in start)
    return MultiModalCase(vols, Mask(case.mask.data[sl]), case.case_id, meta)


def sample_patch(case: MultiModalCase, spec: PatchSpec, rng: np.random.Generator) -> MultiModalCase:
    shape, size = case.shape, spec.size
    _check_fits(shape, size)
    fg = np.argwhere(case.mask.data > 0)
    if len(fg) and rng.random() < spec.foreground_bias:
        voxel = fg[rng.integers(len(fg))]
        # any window start in [v - size + 1, v] that stays inside the volume
        lo = np.maximum(voxel - np.array(size) + 1, 0)
        hi = np.minimum(voxel, np.array(shape) - np.array(size))
        start = [int(rng.integers(a, b + 1)) for a, b in zip(lo, hi)]
    else:
        start = [int(rng.integers(0, s - p + 1)) for s, p in zip(shape, size)]
    return crop_case(case, start, size)


@dataclass
class AugmentConfig:
    mirror_prob: float = 0.5
    rotate_prob: float = 0.5
    gamma_prob: float = 0.3
    gamma_range: tuple = (0.7, 1.5)

    def to_dict(self):
        return asdict(self)


def mirror(arr, axis):
    return np.flip(arr, axis=axis)


def rotate90(arr, k, axes):
    return np.rot90(arr, k=k, axes=axes)


def gamma_correct(data, gamma):
    """Min-max rescale to [0, 1], raise to ``gamma`` and map back to the original range."""
    lo, hi = float(data.min()), float(data.max())
    if hi - lo < 1e-12:
        return data.copy()
    unit = (data - lo) / (hi - lo)
    return (unit ** gamma) * (hi - lo) + lo


def augment(case: MultiModalCase, rng: np.random.Generator, config: AugmentConfig | None = None) -> MultiModalCase:
    """Random mirroring and 90-degree rotations shared by all modalities and the
    mask, plus per-modality gamma correction of intensities."""
    cfg = config or AugmentConfig()
    ops = []
    for axis in range(3):
        if rng.random() < cfg.mirror_prob:
            ops.append(lambda a, axis=axis: mirror(a, axis))
    if rng.random() < cfg.rotate_prob:
        shape = case.shape
        planes = [(i, j) for i in range(3) for j in range(i + 1, 3) if shape[i] == shape[j]]
        if planes:
            plane = planes[int(rng.integers(len(planes)))]
            k = int(rng.integers(1, 4))
            ops.append(lambda a: rotate90(a, k, plane))

    def spatial(a):
        for op in ops:
            a = op(a)
        return np.ascontiguousarray(a)

    vols = {}
    for m in sorted(case.volumes):
        v = case.volumes[m]
        data = spatial(v.data)
        if rng.random() < cfg.gamma_prob:
            data = gamma_correct(data, rng.uniform(*cfg.gamma_range))
        vols[m] = v.with_data(data.astype(v.data.dtype, copy=False))
    meta = {k: (spatial(v) if isinstance(v, np.ndarray) and v.shape == case.shape else v) for k, v in case.meta.items()}
    return MultiModalCase(vols, Mask(spatial(case.mask.data)), case.case_id, meta)


# -- on-disk datasets -------------------------------------------------------

MANIFEST_NAME = "manifest.tsv"


def write_manifest(path, entries, modalities, extra=None):
    """Write a tab-separated manifest.

    Columns: ``case_id``, one path per modality, ``mask``, then any extra
    columns (e.g. ``lesions``) given as ``extra[case_id][column]``. Paths are
    stored relative to the manifest's directory.
    """
    path = Path(path)
    root = path.parent
    extra = extra or {}
    extra_cols = sorted({k for row in extra.values() for k in row})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["case_id", *modalities, "mask", *extra_cols])
        for case_id, paths, mask_path in entries:
            rel = [Path(paths[m]).relative_to(root).as_posix() for m in modalities]
            more = [extra.get(case_id, {}).get(c, "") for c in extra_cols]
            w.writerow([case_id, *rel, Path(mask_path).relative_to(root).as_posix(), *more])
    return path


def manifest_rows(path):
    """Raw manifest rows as dicts keyed by column name."""
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


def read_manifest(path):
    """Return ``(modalities, [(case_id, {modality: path}, mask_path), ...])``."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh, delimiter="\t") if r]
    header, body = rows[0], rows[1:]
    if header[0] != "case_id" or "mask" not in header or header.index("mask") < 2:
        raise ValueError(f"{path}: manifest header must be case_id, <modalities...>, mask[, extra...]")
    mask_col = header.index("mask")
    modalities = header[1:mask_col]
    entries = []
    for row in body:
        paths = {m: path.parent / p for m, p in zip(modalities, row[1:mask_col])}
        entries.append((row[0], paths, path.parent / row[mask_col]))
    return modalities, entries


def write_case(case: MultiModalCase, directory, fmt=".nii.gz"):
    directory = Path(directory)
    paths = {m: save_volume(directory / f"{case.case_id}_{m}{fmt}", v) for m, v in case.volumes.items()}
    mask_path = save_mask(directory / f"{case.case_id}_mask{fmt}", case.mask, case.spacing)
    return paths, mask_path


def write_dataset(cases, directory, fmt=".nii.gz", manifest_name=MANIFEST_NAME):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    modalities = sorted(cases[0].volumes)
    entries = [(c.case_id, *write_case(c, directory, fmt)) for c in cases]
    extra = {c.case_id: {"lesions": c.meta["num_lesions"]} for c in cases if "num_lesions" in c.meta}
    return write_manifest(directory / manifest_name, entries, modalities, extra)


def load_case(paths: dict, mask_path, case_id="", preprocess=True, lo_pct=0.5, hi_pct=99.5) -> MultiModalCase:
    """Read one case; by default clip to percentiles and z-score each modality."""
    vols = {m: load_volume(p, modality=m) for m, p in paths.items()}
    mask = load_mask(mask_path)
    shapes = {v.shape for v in vols.values()} | {mask.shape}
    spacings = {v.spacing for v in vols.values()}
    if len(shapes) > 1 or len(spacings) > 1:
        raise RegistrationRequiredError(
            f"case {case_id!r}: inputs disagree in shape/spacing {sorted(shapes)} {sorted(spacings)}"
        )
    if preprocess:
        vols = {m: preprocess_volume(v, lo_pct, hi_pct) for m, v in vols.items()}
    return MultiModalCase(vols, mask, case_id)


def load_dataset(manifest, preprocess=True):
    _, entries = read_manifest(manifest)
    return [load_case(paths, mask, cid, preprocess) for cid, paths, mask in entries]


def kfold_split(case_ids, k=3, seed=0):
    """Shuffled k-fold split; returns a list of (train_ids, test_ids)."""
    ids = list(case_ids)
    if k < 2 or k > len(ids):
        raise ValueError(f"need 2 <= k <= {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    folds = np.array_split(order, k)
    out = []
    for i in range(k):
        test = [ids[j] for j in folds[i]]
        train = [ids[j] for f in folds[:i] + folds[i + 1:] for j in f]
        out.append((train, test))
    return out
