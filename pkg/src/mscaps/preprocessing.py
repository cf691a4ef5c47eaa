"""Difference images, patch extraction and a speckled-scene simulator."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

MIN_PATCH, MAX_PATCH = 3, 31


@dataclass(frozen=True)
class ScenePair:
    img1: np.ndarray
    img2: np.ndarray
    truth: np.ndarray | None = None

    def __post_init__(self):
        a = np.asarray(self.img1, dtype=np.float64)
        b = np.asarray(self.img2, dtype=np.float64)
        if a.ndim != 2 or a.shape != b.shape:
            raise ValueError(f"image pair must be two equal 2-D arrays, got {a.shape} and {b.shape}")
        if (a < 0).any() or (b < 0).any():
            raise ValueError("intensities must be non-negative")
        object.__setattr__(self, "img1", a)
        object.__setattr__(self, "img2", b)
        if self.truth is not None:
            t = np.asarray(self.truth)
            if t.shape != a.shape:
                raise ValueError(f"ground truth shape {t.shape} does not match images {a.shape}")
            object.__setattr__(self, "truth", (t != 0).astype(np.uint8))

    @property
    def shape(self) -> tuple[int, int]:
        return self.img1.shape


@dataclass(frozen=True)
class DifferenceImage:
    values: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class Patch:
    values: np.ndarray  # [r, r, 1]
    center: tuple[int, int]
    r: int


def log_ratio_di(pair: ScenePair) -> DifferenceImage:
    """|ln((img2 + 1) / (img1 + 1))|, min-max scaled to [0, 1]."""
    raw = np.abs(np.log1p(pair.img2) - np.log1p(pair.img1))
    lo, hi = raw.min(), raw.max()
    if hi > lo:
        values = (raw - lo) / (hi - lo)
    else:
        values = np.zeros_like(raw)
    return DifferenceImage(values)


def _check_r(r: int) -> None:
    if r % 2 == 0 or r < 1 or r > MAX_PATCH:
        raise ValueError(f"patch size must be odd and at most {MAX_PATCH}, got {r}")


def _mirror_pad(values: np.ndarray, half: int) -> np.ndarray:
    if half == 0:
        return values
    mode = "reflect" if min(values.shape) > 1 else "edge"
    return np.pad(values, half, mode=mode)


def extract_patch(di: DifferenceImage, center: tuple[int, int], r: int) -> Patch:
    """r x r window around ``center``, mirror-reflected at the borders."""
    _check_r(r)
    row, col = center
    h, w = di.shape
    if not (0 <= row < h and 0 <= col < w):
        raise ValueError(f"center {center} outside {h}x{w} image")
    half = r // 2
    padded = _mirror_pad(di.values, half)
    win = padded[row:row + r, col:col + r]
    return Patch(win[:, :, None].copy(), (int(row), int(col)), r)


def extract_patches(di: DifferenceImage, centers: np.ndarray, r: int) -> np.ndarray:
    """Stack of patches for an [N, 2] array of centers -> [N, r, r, 1]."""
    _check_r(r)
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 2)
    h, w = di.shape
    if centers.size and ((centers < 0).any() or (centers[:, 0] >= h).any() or (centers[:, 1] >= w).any()):
        raise ValueError("patch center outside image")
    half = r // 2
    padded = _mirror_pad(di.values, half)
    offs = np.arange(r)
    rows = centers[:, 0, None, None] + offs[None, :, None]
    cols = centers[:, 1, None, None] + offs[None, None, :]
    return padded[rows, cols][..., None]


def iter_patch_batches(di: DifferenceImage, r: int, batch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (flat pixel indices, patches) covering every pixel in raster order."""
    h, w = di.shape
    total = h * w
    for start in range(0, total, batch):
        flat = np.arange(start, min(start + batch, total))
        centers = np.stack([flat // w, flat % w], axis=1)
        yield flat, extract_patches(di, centers, r)


def synth_scene(
    seed: int,
    H: int,
    W: int,
    change_regions: Sequence[tuple[int, int, int, int]],
    looks: int,
    contrast: float,
) -> ScenePair:
    """Two gamma-speckled intensity images over a unit-reflectivity scene.

    Regions are half-open (row0, col0, row1, col1) rectangles whose
    reflectivity becomes ``contrast`` in the second image. Speckle is
    Gamma(looks, 1/looks), so it has mean 1.
    """
    if H < 1 or W < 1:
        raise ValueError("scene must be non-empty")
    if looks < 1:
        raise ValueError(f"looks must be >= 1, got {looks}")
    if not contrast >= 1.0:
        raise ValueError(f"contrast must be >= 1, got {contrast}")
    base2 = np.ones((H, W))
    truth = np.zeros((H, W), dtype=np.uint8)
    for reg in change_regions:
        r0, c0, r1, c1 = (int(v) for v in reg)
        if not (0 <= r0 < r1 <= H and 0 <= c0 < c1 <= W):
            raise ValueError(f"degenerate or out-of-bounds region {reg} for {H}x{W} scene")
        base2[r0:r1, c0:c1] = contrast
        if contrast != 1.0:
            truth[r0:r1, c0:c1] = 1
    rng = np.random.default_rng(seed)
    img1 = rng.gamma(looks, 1.0 / looks, size=(H, W))
    img2 = base2 * rng.gamma(looks, 1.0 / looks, size=(H, W))
    return ScenePair(img1, img2, truth)
