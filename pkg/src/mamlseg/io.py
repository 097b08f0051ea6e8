"""Volume file formats.

Two on-disk formats are supported and picked by file suffix:

``.nii`` / ``.nii.gz``
    NIfTI-1 via nibabel. Spacing comes from the header zooms.

``.raw``
    Little-endian float32 voxels in C order (last axis fastest) plus a
    sidecar text file ``<name>.raw.txt`` with one ``key: value`` per line::

        shape: 32 32 32
        spacing: 1.0 1.0 1.0
        modality: AP
        dtype: <f4
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .core import Mask, Volume

RAW_DTYPE = "<f4"


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".txt")


def _is_nifti(path: Path) -> bool:
    return path.name.endswith(".nii") or path.name.endswith(".nii.gz")


def save_array(path, data, spacing=(1.0, 1.0, 1.0), modality=""):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.asarray(data)
    if path.suffix == ".raw":
        data.astype(RAW_DTYPE).tofile(path)
        lines = [
            "shape: " + " ".join(str(int(s)) for s in data.shape),
            "spacing: " + " ".join(repr(float(s)) for s in spacing),
            f"modality: {modality}",
            f"dtype: {RAW_DTYPE}",
        ]
        sidecar_path(path).write_text("\n".join(lines) + "\n")
    elif _is_nifti(path):
        import nibabel as nib

        affine = np.diag([*map(float, spacing), 1.0])
        img = nib.Nifti1Image(data.astype(np.float32), affine)
        img.header.set_zooms(tuple(float(s) for s in spacing))
        if modality:
            img.header["descrip"] = modality.encode()[:80]
        nib.save(img, str(path))
    else:
        raise ValueError(f"unsupported volume format: {path.name}")
    return path


def load_array(path):
    """Return ``(data, spacing, modality)`` for a volume file."""
    path = Path(path)
    if path.suffix == ".raw":
        meta = {}
        for line in sidecar_path(path).read_text().splitlines():
            if ":" in line:
                key, value = line.split(":", 1)
                meta[key.strip()] = value.strip()
        shape = tuple(int(s) for s in meta["shape"].split())
        spacing = tuple(float(s) for s in meta.get("spacing", "1 1 1").split())
        dtype = meta.get("dtype", RAW_DTYPE)
        data = np.fromfile(path, dtype=dtype)
        if data.size != math.prod(shape):
            raise OSError(f"{path}: expected {math.prod(shape)} voxels, found {data.size}")
        return data.reshape(shape), spacing, meta.get("modality", "")
    if _is_nifti(path):
        import nibabel as nib

        img = nib.load(str(path))
        data = np.asarray(img.dataobj, dtype=np.float32)
        spacing = tuple(float(s) for s in img.header.get_zooms()[:3])
        descrip = img.header["descrip"].tobytes().rstrip(b"\x00").decode(errors="ignore")
        return data, spacing, descrip
    raise ValueError(f"unsupported volume format: {path.name}")


def save_volume(path, vol: Volume):
    return save_array(path, vol.data, vol.spacing, vol.modality)


def load_volume(path, modality=None) -> Volume:
    data, spacing, tag = load_array(path)
    return Volume(data, spacing, modality if modality is not None else tag)


def save_mask(path, mask: Mask, spacing=(1.0, 1.0, 1.0)):
    return save_array(path, mask.data, spacing, "mask")


def load_mask(path) -> Mask:
    data, _, _ = load_array(path)
    return Mask(np.rint(data).astype(np.uint8))


REPORT_COLUMNS = ("case_id", "dice", "assd")


def _fmt(x):
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"


def write_metrics_csv(path, rows):
    """Write per-case rows ``(case_id, dice, assd)``; a missing ASSD is an empty cell."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for case_id, dice, dist in rows:
            writer.writerow([case_id, _fmt(dice), _fmt(dist)])
    return path


def read_metrics_csv(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        for rec in reader:
            dist = float(rec["assd"]) if rec["assd"] else float("nan")
            rows.append((rec["case_id"], float(rec["dice"]), dist))
    return rows
