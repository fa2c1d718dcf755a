"""Synthetic thoracic phantoms: six organ-like structures with exact masks.

Each patient is a 512x512xS HU grid holding an elliptical soft-tissue body in
air, two large low-HU lung ellipsoids, a heart blob between them, thin
esophagus and trachea tubes, and a posterior spinal cord inside an unlabeled
bone ring. Shapes are deliberately smooth and high-contrast under their organ
windows so small networks train to useful accuracy in minutes; masks trace
the painted shapes exactly, so the label partition property holds by
construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import organs
from .preprocess import HU_MAX, HU_MIN
from .volume import CtVolume, LabelMask, save_patient

DEFAULT_ORGAN_HU: dict[int, tuple[float, float]] = {
    organs.LEFT_LUNG: (-750.0, -650.0),
    organs.RIGHT_LUNG: (-750.0, -650.0),
    organs.HEART: (75.0, 105.0),
    organs.ESOPHAGUS: (100.0, 140.0),
    organs.TRACHEA: (-950.0, -850.0),
    organs.SPINAL_CORD: (20.0, 60.0),
}

# In-plane geometry: (cx, cy, semi_x, semi_y, z_lo, z_hi), centers as offsets
# from the grid center in pixels, z extents as fractions of the slice count.
# Everything stays within 80 px of the center (jitter included) so even a
# 160-px center crop keeps every organ whole. Margins are wide enough that
# per-patient jitter never makes two organs touch; painting additionally
# refuses already-claimed pixels as a safety net for the disjointness
# invariant.
_ORGAN_GEOMETRY: dict[int, tuple[float, float, float, float, float, float]] = {
    organs.LEFT_LUNG: (-46.0, -6.0, 22.0, 42.0, 0.06, 0.94),
    organs.RIGHT_LUNG: (46.0, -6.0, 22.0, 42.0, 0.06, 0.94),
    organs.HEART: (0.0, 16.0, 14.0, 12.0, 0.30, 0.80),
    organs.ESOPHAGUS: (0.0, -14.0, 5.5, 5.5, 0.04, 0.96),
    organs.TRACHEA: (0.0, -40.0, 8.0, 8.0, 0.00, 0.50),
    organs.SPINAL_CORD: (0.0, 52.0, 5.0, 5.0, 0.00, 1.00),
}

_PAINT_ORDER = (
    organs.LEFT_LUNG,
    organs.RIGHT_LUNG,
    organs.HEART,
    organs.ESOPHAGUS,
    organs.TRACHEA,
    organs.SPINAL_CORD,
)

_BODY_SEMI = (86.0, 80.0)
_BODY_HU = (40.0, 10.0)  # mean, sigma
_AIR_HU = (-1000.0, 10.0)
_BONE_RING = (7.0, 13.0)  # inner/outer radius of the canal around the cord
_BONE_HU = (650.0, 50.0)
_MIN_Z_SCALE = 0.35  # organs never taper below this fraction of full size
_GLOBAL_JITTER = 6.0
_ORGAN_JITTER = 3.0
_SCALE_JITTER = 0.05


@dataclass(frozen=True)
class PhantomSpec:
    """Generation parameters. Challenge-format slice counts are 80-127; the
    generator also accepts smaller desk-scale counts (>= 4)."""

    n_patients: int
    slices_per_patient: int = 40
    grid: int = 512
    rng_seed: int = 0
    spacing: tuple[float, float, float] = (5.0, 1.2, 1.2)
    organ_hu_ranges: dict[int, tuple[float, float]] = field(
        default_factory=lambda: dict(DEFAULT_ORGAN_HU)
    )

    def __post_init__(self) -> None:
        if self.n_patients < 1:
            raise ValueError("n_patients must be positive")
        if self.slices_per_patient < 4:
            raise ValueError("slices_per_patient must be >= 4")
        if self.grid < 64:
            raise ValueError("grid must be >= 64")
        missing = set(_ORGAN_GEOMETRY) - set(self.organ_hu_ranges)
        if missing:
            raise ValueError(f"organ_hu_ranges missing organs {sorted(missing)}")


def _paint_ellipse(
    hu: np.ndarray,
    labels: np.ndarray,
    label: int,
    cx: float,
    cy: float,
    rx: float,
    ry: float,
    mean: float,
    sigma: float,
    clip: tuple[float, float],
    rng: np.random.Generator,
) -> None:
    """Paint one noisy ellipse into a slice, claiming only unlabeled pixels."""
    h, w = hu.shape
    x0, x1 = max(0, int(cx - rx) - 1), min(w, int(cx + rx) + 2)
    y0, y1 = max(0, int(cy - ry) - 1), min(h, int(cy + ry) + 2)
    if x0 >= x1 or y0 >= y1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    inside = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    free = inside & (labels[y0:y1, x0:x1] == 0)
    n = int(free.sum())
    if n == 0:
        return
    hu[y0:y1, x0:x1][free] = np.clip(rng.normal(mean, sigma, size=n), *clip)
    labels[y0:y1, x0:x1][free] = label


def _generate_patient(
    spec: PhantomSpec, patient_id: str, rng: np.random.Generator
) -> tuple[CtVolume, LabelMask]:
    g, s = spec.grid, spec.slices_per_patient
    center = (g - 1) / 2.0
    hu = rng.normal(_AIR_HU[0], _AIR_HU[1], size=(s, g, g))
    labels = np.zeros((s, g, g), dtype=np.uint8)

    global_shift = rng.uniform(-_GLOBAL_JITTER, _GLOBAL_JITTER, size=2)
    organ_base = {
        organ: rng.uniform(lo + 0.25 * (hi - lo), hi - 0.25 * (hi - lo))
        for organ, (lo, hi) in sorted(spec.organ_hu_ranges.items())
    }
    organ_shift = {o: rng.uniform(-_ORGAN_JITTER, _ORGAN_JITTER, size=2) for o in _PAINT_ORDER}
    organ_scale = {o: rng.uniform(1 - _SCALE_JITTER, 1 + _SCALE_JITTER) for o in _PAINT_ORDER}

    yy, xx = np.mgrid[0:g, 0:g]
    body = ((xx - center - global_shift[0]) / _BODY_SEMI[0]) ** 2 + (
        (yy - center - global_shift[1]) / _BODY_SEMI[1]
    ) ** 2 <= 1.0
    n_body = int(body.sum())

    cord = _ORGAN_GEOMETRY[organs.SPINAL_CORD]
    ring_cx = center + global_shift[0] + cord[0] + organ_shift[organs.SPINAL_CORD][0]
    ring_cy = center + global_shift[1] + cord[1] + organ_shift[organs.SPINAL_CORD][1]
    ring_r2 = (xx - ring_cx) ** 2 + (yy - ring_cy) ** 2
    ring = (ring_r2 >= _BONE_RING[0] ** 2) & (ring_r2 <= _BONE_RING[1] ** 2)
    n_ring = int(ring.sum())

    for z in range(s):
        sl_hu = hu[z]
        sl_hu[body] = rng.normal(_BODY_HU[0], _BODY_HU[1], size=n_body)
        sl_hu[ring] = rng.normal(_BONE_HU[0], _BONE_HU[1], size=n_ring)
        sl_labels = labels[z]
        for organ in _PAINT_ORDER:
            ox, oy, rx, ry, z_lo, z_hi = _ORGAN_GEOMETRY[organ]
            z0, z1 = z_lo * (s - 1), z_hi * (s - 1)
            if not z0 <= z <= z1:
                continue
            t = 0.0 if z1 == z0 else 2.0 * (z - (z0 + z1) / 2.0) / (z1 - z0)
            taper = _MIN_Z_SCALE + (1.0 - _MIN_Z_SCALE) * np.sqrt(max(0.0, 1.0 - t * t))
            scale = organ_scale[organ] * taper
            lo_hu, hi_hu = spec.organ_hu_ranges[organ]
            _paint_ellipse(
                sl_hu,
                sl_labels,
                organ,
                center + global_shift[0] + ox + organ_shift[organ][0],
                center + global_shift[1] + oy + organ_shift[organ][1],
                max(2.0, rx * scale),
                max(2.0, ry * scale),
                organ_base[organ],
                (hi_hu - lo_hu) / 8.0,
                (lo_hu, hi_hu),
                rng,
            )

    hu = np.clip(np.rint(hu), HU_MIN, HU_MAX).astype(np.int16)
    volume = CtVolume(voxels=hu, spacing=spec.spacing, patient_id=patient_id)
    mask = LabelMask(labels=labels, class_count=organs.NUM_ORGANS)
    return volume, mask


def generate_phantom(spec: PhantomSpec) -> list[tuple[CtVolume, LabelMask]]:
    """Generate all patients; deterministic given spec.rng_seed."""
    seeds = np.random.SeedSequence(spec.rng_seed).spawn(spec.n_patients)
    return [
        _generate_patient(spec, f"phantom_{i:03d}", np.random.default_rng(seed))
        for i, seed in enumerate(seeds)
    ]


def write_phantom_dataset(spec: PhantomSpec, out_dir: str | Path) -> list[Path]:
    """Generate and write the dataset in the standard patient layout."""
    out_dir = Path(out_dir)
    return [save_patient(out_dir, volume, mask) for volume, mask in generate_phantom(spec)]
