"""CT volumes and label masks, plus the on-disk patient layout.

A dataset root holds one directory per patient:

    <root>/<patient_id>/data.nii.gz    # HU volume, int16
    <root>/<patient_id>/label.nii.gz   # aligned integer mask, optional

which is the layout the thoracic segmentation challenges distribute.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .niftiio import read_nifti, write_nifti
from .preprocess import HU_MAX, HU_MIN

VOLUME_FILENAMES = ("data.nii.gz", "data.nii")
LABEL_FILENAMES = ("label.nii.gz", "label.nii")


@dataclass
class CtVolume:
    """3-D signed HU grid with physical spacing metadata."""

    voxels: np.ndarray  # (slices, rows, cols) int16, values in [-1024, 3071]
    spacing: tuple[float, float, float]  # (z_mm, y_mm, x_mm)
    patient_id: str

    def __post_init__(self) -> None:
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise ValueError(f"voxels must be 3-D, got shape {self.voxels.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be strictly positive, got {self.spacing}")
        lo, hi = int(self.voxels.min()), int(self.voxels.max())
        if lo < HU_MIN or hi > HU_MAX:
            raise ValueError(f"HU values [{lo}, {hi}] outside [{HU_MIN}, {HU_MAX}]")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass
class LabelMask:
    """Integer multi-organ mask aligned voxel-for-voxel to a CtVolume."""

    labels: np.ndarray  # (slices, rows, cols), values in {0..class_count}
    class_count: int

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3:
            raise ValueError(f"labels must be 3-D, got shape {self.labels.shape}")
        hi = int(self.labels.max(initial=0))
        lo = int(self.labels.min(initial=0))
        if lo < 0 or hi > self.class_count:
            raise ValueError(f"label values [{lo}, {hi}] outside 0..{self.class_count}")


def _find_file(directory: Path, names: tuple[str, ...]) -> Path | None:
    for name in names:
        candidate = directory / name
        if candidate.exists():
            return candidate
    return None


def load_volume(path: str | Path, class_count: int | None = None) -> tuple[CtVolume, LabelMask | None]:
    """Load one patient's CT (and mask, when a sibling label file exists).

    `path` may be the patient directory or the volume file itself. HU values
    outside [-1024, 3071] (padding values in real exports) are clamped with a
    warning rather than rejected.
    """
    path = Path(path)
    if path.is_dir():
        volume_path = _find_file(path, VOLUME_FILENAMES)
        if volume_path is None:
            raise FileNotFoundError(f"no volume file ({VOLUME_FILENAMES[0]}) under {path}")
    else:
        volume_path = path
    patient_id = volume_path.parent.name

    arr, spacing = read_nifti(volume_path)
    arr = np.rint(arr).astype(np.int64) if not np.issubdtype(arr.dtype, np.integer) else arr
    if arr.min() < HU_MIN or arr.max() > HU_MAX:
        warnings.warn(
            f"{volume_path}: HU values outside [{HU_MIN}, {HU_MAX}], clamping",
            stacklevel=2,
        )
        arr = np.clip(arr, HU_MIN, HU_MAX)
    volume = CtVolume(voxels=arr.astype(np.int16), spacing=spacing, patient_id=patient_id)

    mask = None
    label_path = _find_file(volume_path.parent, LABEL_FILENAMES)
    if label_path is not None:
        labels, _ = read_nifti(label_path)
        labels = np.rint(labels).astype(np.uint8)
        if labels.shape != volume.shape:
            raise ValueError(
                f"{label_path}: mask shape {labels.shape} != volume shape {volume.shape}"
            )
        c = class_count if class_count is not None else int(labels.max(initial=0))
        mask = LabelMask(labels=labels, class_count=c)
    return volume, mask


def save_patient(root: str | Path, volume: CtVolume, mask: LabelMask | None = None) -> Path:
    """Write one patient in the dataset layout; returns the patient directory."""
    patient_dir = Path(root) / volume.patient_id
    write_nifti(patient_dir / "data.nii.gz", volume.voxels.astype(np.int16), volume.spacing)
    if mask is not None:
        write_nifti(patient_dir / "label.nii.gz", mask.labels.astype(np.uint8), volume.spacing)
    return patient_dir


def list_patients(root: str | Path) -> list[str]:
    """Patient ids under a dataset root, sorted."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"no dataset directory: {root}")
    return sorted(
        p.name for p in root.iterdir() if p.is_dir() and _find_file(p, VOLUME_FILENAMES)
    )
