"""Slice preprocessing: Hounsfield windowing, cropping, binarization, augmentation.

Windowing uses the standard linear LUT: an HU interval of `width` centered at
`level` is mapped onto [0, 1] and clamped outside. Augmentation composes grid
distortion, rotation, and elastic deformation as a single coordinate-field
resampling so image and mask stay aligned; masks are resampled
nearest-neighbor so label values never leave the original label set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

HU_MIN = -1024
HU_MAX = 3071


@dataclass(frozen=True)
class WindowSpec:
    """Hounsfield window, width (WW) and level (WL) in HU."""

    width: float
    level: float

    def __post_init__(self) -> None:
        if self.width <= 0:
            raise ValueError(f"window width must be positive, got {self.width}")

    @property
    def floor(self) -> float:
        return self.level - self.width / 2.0

    @property
    def ceil(self) -> float:
        return self.level + self.width / 2.0


@dataclass(frozen=True)
class Slice2D:
    """A single preprocessed axial slice with its provenance."""

    pixels: np.ndarray  # 2-D float array in [0, 1]
    source: tuple[str, int]  # (patient_id, slice_index)


def apply_window(hu: np.ndarray, window: WindowSpec) -> np.ndarray:
    """Map HU values through the window LUT onto [0, 1].

    out = clamp((hu - (level - width/2)) / width, 0, 1); monotone
    non-decreasing in hu, exactly 0/1 at and beyond the window edges.
    """
    hu = np.asarray(hu)
    out = (hu.astype(np.float32) - np.float32(window.floor)) / np.float32(window.width)
    return np.clip(out, 0.0, 1.0, out=out)


def center_crop(a: np.ndarray, size: int = 320) -> np.ndarray:
    """Take the centered size x size sub-grid of the last two axes.

    For an even row/column surplus the offset is (rows - size) / 2; odd
    surpluses floor. Inputs smaller than `size` are rejected.
    """
    rows, cols = a.shape[-2], a.shape[-1]
    if rows < size or cols < size:
        raise ValueError(f"cannot center-crop {rows}x{cols} input to {size}x{size}")
    r0 = (rows - size) // 2
    c0 = (cols - size) // 2
    return a[..., r0 : r0 + size, c0 : c0 + size]


def binarize_mask(labels: np.ndarray, organ: int, class_count: int | None = None) -> np.ndarray:
    """Indicator of one organ label, uint8, same shape as `labels`."""
    labels = np.asarray(labels)
    c = class_count if class_count is not None else int(labels.max(initial=0))
    if not 1 <= organ <= max(c, 1):
        raise ValueError(f"organ label {organ} outside 1..{c}")
    return (labels == organ).astype(np.uint8)


@dataclass(frozen=True)
class AugmentConfig:
    """Parameter ranges for training-time augmentation (config defaults, overridable)."""

    rotation_deg: float = 15.0  # rotation drawn uniform in +-this
    grid_steps: int = 5
    grid_limit: float = 0.3  # per-cell stretch drawn uniform in +-this
    elastic_alpha: float = 34.0  # displacement magnitude, pixels
    elastic_sigma: float = 4.0  # smoothing of the displacement field
    prob: float = 0.5  # independent application probability per transform


@dataclass
class AugmentParams:
    """One concrete draw; any None member means that transform is skipped."""

    angle_deg: float = 0.0
    grid_stretch: tuple[np.ndarray, np.ndarray] | None = None  # per-cell (rows, cols) factors
    elastic_disp: tuple[np.ndarray, np.ndarray] | None = None  # (dy, dx) fields

    @property
    def is_identity(self) -> bool:
        return self.angle_deg == 0.0 and self.grid_stretch is None and self.elastic_disp is None


def draw_augment_params(
    shape: tuple[int, int], rng: np.random.Generator, cfg: AugmentConfig | None = None
) -> AugmentParams:
    """Draw one composed transform; each component fires independently with cfg.prob."""
    cfg = cfg or AugmentConfig()
    params = AugmentParams()
    if rng.random() < cfg.prob:
        params.angle_deg = float(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
    if rng.random() < cfg.prob:
        params.grid_stretch = (
            rng.uniform(-cfg.grid_limit, cfg.grid_limit, cfg.grid_steps),
            rng.uniform(-cfg.grid_limit, cfg.grid_limit, cfg.grid_steps),
        )
    if rng.random() < cfg.prob:
        dy = gaussian_filter(rng.uniform(-1, 1, shape), cfg.elastic_sigma) * cfg.elastic_alpha
        dx = gaussian_filter(rng.uniform(-1, 1, shape), cfg.elastic_sigma) * cfg.elastic_alpha
        params.elastic_disp = (dy, dx)
    return params


def _axis_warp(coords: np.ndarray, stretch: np.ndarray, length: int) -> np.ndarray:
    """Piecewise-linear monotone remap of one coordinate axis (grid distortion).

    Cell widths are scaled by (1 + stretch_i), then renormalized so the ends
    stay fixed; the map is applied to (possibly fractional) coordinates.
    """
    steps = len(stretch)
    knots_out = np.linspace(0.0, length - 1.0, steps + 1)
    widths = (1.0 + stretch) * (length - 1.0) / steps
    knots_in = np.concatenate(([0.0], np.cumsum(widths)))
    knots_in *= (length - 1.0) / knots_in[-1]
    return np.interp(coords, knots_out, knots_in)


def apply_augment_params(
    image: np.ndarray, mask: np.ndarray, params: AugmentParams
) -> tuple[np.ndarray, np.ndarray]:
    """Resample image (bilinear) and mask (nearest) through one coordinate field.

    The sampling field composes, in order: elastic displacement, grid
    distortion, rotation about the slice center. Identity parameters return
    the inputs unchanged (no resampling pass at all).
    """
    if image.shape != mask.shape:
        raise ValueError(f"image shape {image.shape} != mask shape {mask.shape}")
    if params.is_identity:
        return image, mask

    h, w = image.shape
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    if params.elastic_disp is not None:
        dy, dx = params.elastic_disp
        yy = yy + dy
        xx = xx + dx
    if params.grid_stretch is not None:
        sy, sx = params.grid_stretch
        yy = _axis_warp(yy, sy, h)
        xx = _axis_warp(xx, sx, w)
    if params.angle_deg != 0.0:
        theta = np.deg2rad(params.angle_deg)
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        yc, xc = yy - cy, xx - cx
        yy = cy + np.cos(theta) * yc - np.sin(theta) * xc
        xx = cx + np.sin(theta) * yc + np.cos(theta) * xc

    coords = np.stack([yy, xx])
    out_image = map_coordinates(image.astype(np.float32), coords, order=1, mode="nearest")
    out_mask = map_coordinates(mask, coords, order=0, mode="nearest")
    return out_image, out_mask.astype(mask.dtype)


def augment(
    slice2d: Slice2D, mask: np.ndarray, rng_seed: int, cfg: AugmentConfig | None = None
) -> tuple[Slice2D, np.ndarray]:
    """Seed-deterministic training augmentation of one slice/mask pair."""
    if slice2d.pixels.shape != mask.shape:
        raise ValueError(f"slice shape {slice2d.pixels.shape} != mask shape {mask.shape}")
    rng = np.random.default_rng(rng_seed)
    params = draw_augment_params(slice2d.pixels.shape, rng, cfg)
    pixels, out_mask = apply_augment_params(slice2d.pixels, mask, params)
    return Slice2D(pixels=pixels, source=slice2d.source), out_mask
