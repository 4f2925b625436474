"""Tissue masking and resolution-correct patch extraction.

Slides enter as flat 8-bit RGB rasters with a known physical pixel
size. A downscaled grayscale version is thresholded with Otsu's method
to find tissue (tissue is darker than the white slide background), a
regular patch grid is filtered by tissue coverage, and patches are read
at the requested microns-per-pixel by area-average downsampling.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .dataset import SlideManifestEntry

logger = logging.getLogger(__name__)

LUMINANCE_WEIGHTS = np.array([0.299, 0.587, 0.114])
DEFAULT_DOWNSCALE = 32
DEFAULT_MIN_COVERAGE = 0.7
DEFAULT_PATCH_SIZE = 512
DEFAULT_TARGET_MPP = 0.88

# scale factors this close to an integer use the exact block-mean path
_INTEGER_SNAP = 1e-6


class TilingError(ValueError):
    """Raised for invalid tiling inputs."""


class SlideImage:
    """A flat 8-bit RGB slide held in memory."""

    def __init__(self, pixels: np.ndarray, native_mpp: float, slide_id: str = ""):
        pixels = np.asarray(pixels)
        if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
            raise TilingError("slide pixels must be an (H, W, 3) uint8 array")
        if pixels.size == 0:
            raise TilingError("slide image is empty")
        if not native_mpp > 0:
            raise TilingError("native_mpp must be > 0")
        self.pixels = pixels
        self.native_mpp = float(native_mpp)
        self.slide_id = slide_id

    @classmethod
    def from_entry(cls, entry: SlideManifestEntry) -> "SlideImage":
        with Image.open(entry.image_path) as im:
            pixels = np.asarray(im.convert("RGB"))
        return cls(pixels, entry.native_mpp, entry.slide_id)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def read_region(self, x: int, y: int, w: int, h: int) -> np.ndarray:
        if x < 0 or y < 0 or x + w > self.width or y + h > self.height:
            raise TilingError(
                f"region ({x},{y},{w},{h}) outside slide bounds {self.width}x{self.height}"
            )
        return self.pixels[y : y + h, x : x + w]


@dataclass
class TissueMask:
    """Binary tissue grid at ``downscale_factor`` relative to the slide."""

    grid: np.ndarray  # 2D bool, True = tissue
    downscale_factor: int
    threshold_used: int

    def __post_init__(self) -> None:
        if self.grid.ndim != 2:
            raise TilingError("mask grid must be 2D")
        if not 0 <= self.threshold_used <= 255:
            raise TilingError("threshold must lie in 0..255")

    @property
    def tissue_fraction(self) -> float:
        return float(self.grid.mean()) if self.grid.size else 0.0


@dataclass(frozen=True)
class PatchSpec:
    """Location of one patch on the target-mpp pixel grid."""

    slide_id: str
    x: int
    y: int
    size_px: int
    target_mpp: float
    tissue_coverage: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.tissue_coverage <= 1.0:
            raise TilingError("tissue_coverage must lie in [0, 1]")


def otsu_threshold(histogram: Sequence[float] | np.ndarray) -> int:
    """Threshold maximizing between-class variance on a 256-bin histogram.

    The split is "<= t" versus "> t"; ties return the smallest such t.
    A histogram with all mass in a single bin has zero between-class
    variance everywhere and returns that bin.
    """
    hist = np.asarray(histogram, dtype=np.float64)
    if hist.shape != (256,):
        raise TilingError(f"histogram must have 256 bins, got shape {hist.shape}")
    if np.any(hist < 0):
        raise TilingError("histogram counts must be non-negative")
    total = hist.sum()
    if total == 0:
        raise TilingError("histogram is all zero")

    nonzero = np.flatnonzero(hist)
    if nonzero.size == 1:
        return int(nonzero[0])

    bins = np.arange(256, dtype=np.float64)
    p = hist / total
    w0 = np.cumsum(p)
    w1 = 1.0 - w0
    cum_mean = np.cumsum(p * bins)
    total_mean = cum_mean[-1]

    valid = (w0 > 0) & (w1 > 0)
    variance = np.zeros(256)
    mu0 = np.divide(cum_mean, w0, out=np.zeros(256), where=valid)
    mu1 = np.divide(total_mean - cum_mean, w1, out=np.zeros(256), where=valid)
    variance[valid] = (w0 * w1)[valid] * (mu0 - mu1)[valid] ** 2
    return int(np.argmax(variance))


def _block_mean(values: np.ndarray, factor: int) -> np.ndarray:
    """Mean over factor x factor blocks; edge blocks may be partial."""
    h, w = values.shape
    row_idx = np.arange(0, h, factor)
    col_idx = np.arange(0, w, factor)
    sums = np.add.reduceat(np.add.reduceat(values, row_idx, axis=0), col_idx, axis=1)
    row_sizes = np.minimum(row_idx + factor, h) - row_idx
    col_sizes = np.minimum(col_idx + factor, w) - col_idx
    return sums / np.outer(row_sizes, col_sizes)


def build_tissue_mask(slide: SlideImage, downscale_factor: int = DEFAULT_DOWNSCALE) -> TissueMask:
    """Otsu-threshold a downscaled grayscale slide; tissue is the dark class.

    A blank slide (single-intensity histogram) yields an empty mask
    rather than an error so featureless inputs flow through the
    pipeline.
    """
    if downscale_factor < 1:
        raise TilingError("downscale_factor must be >= 1")
    gray = slide.pixels.astype(np.float64) @ LUMINANCE_WEIGHTS
    small = _block_mean(gray, downscale_factor) if downscale_factor > 1 else gray
    quantized = np.clip(np.rint(small), 0, 255).astype(np.uint8)

    hist = np.bincount(quantized.ravel(), minlength=256).astype(np.float64)
    threshold = otsu_threshold(hist)
    if np.count_nonzero(hist) == 1:
        grid = np.zeros_like(quantized, dtype=bool)
    else:
        grid = quantized <= threshold
    return TissueMask(grid=grid, downscale_factor=downscale_factor, threshold_used=threshold)


def _scale_factor(slide: SlideImage, target_mpp: float) -> float:
    if not target_mpp > 0:
        raise TilingError("target_mpp must be > 0")
    s = target_mpp / slide.native_mpp
    if s < 1.0 - _INTEGER_SNAP:
        raise TilingError(
            f"upsampling not supported: target {target_mpp} mpp is finer than "
            f"native {slide.native_mpp} mpp"
        )
    if abs(s - round(s)) < _INTEGER_SNAP:
        s = float(round(s))
    return s


def enumerate_patches(
    slide: SlideImage,
    mask: TissueMask,
    size_px: int = DEFAULT_PATCH_SIZE,
    target_mpp: float = DEFAULT_TARGET_MPP,
    stride_px: int | None = None,
    min_coverage: float = DEFAULT_MIN_COVERAGE,
) -> list[PatchSpec]:
    """Regular patch grid at target-mpp scale, filtered by tissue coverage.

    Coverage is the tissue fraction of the mask cells that overlap the
    patch footprint; patches with coverage >= ``min_coverage`` are kept
    (the boundary is inclusive). Stride defaults to ``size_px``
    (non-overlapping grid).
    """
    if not 0.0 <= min_coverage <= 1.0:
        raise TilingError("min_coverage must lie in [0, 1]")
    if stride_px is None:
        stride_px = size_px
    if stride_px < 1 or size_px < 1:
        raise TilingError("size_px and stride_px must be >= 1")

    s = _scale_factor(slide, target_mpp)
    width_t = int(slide.width / s)
    height_t = int(slide.height / s)
    if size_px > width_t or size_px > height_t:
        logger.warning(
            "slide %s: patch size %d exceeds slide extent %dx%d at %.3f mpp",
            slide.slide_id, size_px, width_t, height_t, target_mpp,
        )
        return []

    grid = mask.grid
    f = mask.downscale_factor
    # summed-area table for O(1) window sums over mask cells
    sat = np.zeros((grid.shape[0] + 1, grid.shape[1] + 1), dtype=np.int64)
    np.cumsum(np.cumsum(grid, axis=0), axis=1, out=sat[1:, 1:])

    specs: list[PatchSpec] = []
    for y in range(0, height_t - size_px + 1, stride_px):
        i0 = int(y * s / f)
        i1 = min(math.ceil((y + size_px) * s / f), grid.shape[0])
        for x in range(0, width_t - size_px + 1, stride_px):
            j0 = int(x * s / f)
            j1 = min(math.ceil((x + size_px) * s / f), grid.shape[1])
            n_cells = (i1 - i0) * (j1 - j0)
            tissue = sat[i1, j1] - sat[i0, j1] - sat[i1, j0] + sat[i0, j0]
            coverage = tissue / n_cells if n_cells else 0.0
            if coverage >= min_coverage:
                specs.append(
                    PatchSpec(
                        slide_id=slide.slide_id,
                        x=x,
                        y=y,
                        size_px=size_px,
                        target_mpp=target_mpp,
                        tissue_coverage=float(coverage),
                    )
                )
    return specs


def read_patch(slide: SlideImage, spec: PatchSpec) -> np.ndarray:
    """Read one patch at the spec's target mpp, normalized to [0, 1].

    The native-resolution footprint is resampled by area averaging.
    Integer scale factors use an exact block mean; fractional factors
    fall back to a box-filter resize.
    """
    s = _scale_factor(slide, spec.target_mpp)
    if float(s).is_integer():
        factor = int(s)
        x0, y0 = spec.x * factor, spec.y * factor
        native = spec.size_px * factor
        region = slide.read_region(x0, y0, native, native).astype(np.int64)
        blocks = region.reshape(spec.size_px, factor, spec.size_px, factor, 3)
        summed = blocks.sum(axis=(1, 3))
        return summed / (factor * factor * 255.0)

    x0, y0 = int(round(spec.x * s)), int(round(spec.y * s))
    native = int(round(spec.size_px * s))
    region = slide.read_region(x0, y0, native, native)
    resized = Image.fromarray(region).resize(
        (spec.size_px, spec.size_px), resample=Image.Resampling.BOX
    )
    return np.asarray(resized, dtype=np.float64) / 255.0


def extract_slide_patches(
    slide: SlideImage,
    size_px: int = DEFAULT_PATCH_SIZE,
    target_mpp: float = DEFAULT_TARGET_MPP,
    stride_px: int | None = None,
    min_coverage: float = DEFAULT_MIN_COVERAGE,
    downscale_factor: int = DEFAULT_DOWNSCALE,
) -> tuple[list[PatchSpec], np.ndarray]:
    """Mask, enumerate, and read all retained patches of one slide.

    Returns the specs and an (n, size, size, 3) float32 stack; n may be
    zero for slides without enough tissue.
    """
    mask = build_tissue_mask(slide, downscale_factor)
    specs = enumerate_patches(slide, mask, size_px, target_mpp, stride_px, min_coverage)
    if not specs:
        return [], np.zeros((0, size_px, size_px, 3), dtype=np.float32)
    patches = np.stack([read_patch(slide, spec) for spec in specs])
    return specs, patches.astype(np.float32)


def write_mask_png(mask: TissueMask, path: str | Path) -> None:
    """Export the tissue grid as a 1-bit raster for inspection."""
    Image.fromarray(mask.grid).save(path)


def write_patch_list(specs: Sequence[PatchSpec], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slide_id", "x", "y", "size_px", "target_mpp", "coverage"])
        for p in specs:
            writer.writerow(
                [p.slide_id, p.x, p.y, p.size_px, repr(p.target_mpp), f"{p.tissue_coverage:.6f}"]
            )
