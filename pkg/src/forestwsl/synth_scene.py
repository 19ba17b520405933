"""Synthetic forest scenes, dual-polarisation SAR renderings and degraded labels.

The degraded labels stand in for a coarse, noisy global forest product: block
coarsening, locally varying boundary shifts, then independent pixel flips.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import seeding
from .raster_core import FOREST, NON_FOREST, ClassMap, Raster

# Mean backscatter in dB, indexed [class][band] with band 0 = VV, band 1 = VH.
DEFAULT_CLASS_MEANS_DB = ((-12.0, -18.0), (-7.0, -12.0))


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    height: int
    width: int
    forest_fraction: float = 0.5
    blob_scale: int = 8
    looks: int = 10
    class_means_db: tuple[tuple[float, float], tuple[float, float]] = DEFAULT_CLASS_MEANS_DB

    def __post_init__(self) -> None:
        if not 0.0 < self.forest_fraction < 1.0:
            raise ValueError(f"forest_fraction must lie in (0, 1), got {self.forest_fraction}")
        if self.blob_scale < 1:
            raise ValueError(f"blob_scale must be >= 1, got {self.blob_scale}")
        if self.looks < 1:
            raise ValueError(f"looks must be >= 1, got {self.looks}")
        if self.height < 1 or self.width < 1:
            raise ValueError(f"scene must be at least 1x1, got {self.height}x{self.width}")
        means = np.asarray(self.class_means_db, dtype=float)
        if means.shape != (2, 2):
            raise ValueError(f"class_means_db must be 2 classes x 2 bands, got shape {means.shape}")


@dataclass(frozen=True)
class NoiseSpec:
    seed: int
    coarse_factor: int = 8
    flip_rate: float = 0.0
    jitter_radius: int = 0
    # Side of the square cells that each draw their own dilation/erosion radius.
    jitter_cell: int = 16

    def __post_init__(self) -> None:
        if self.coarse_factor < 1:
            raise ValueError(f"coarse_factor must be >= 1, got {self.coarse_factor}")
        if not 0.0 <= self.flip_rate < 1.0:
            raise ValueError(f"flip_rate must lie in [0, 1), got {self.flip_rate}")
        if self.jitter_radius < 0:
            raise ValueError(f"jitter_radius must be >= 0, got {self.jitter_radius}")
        if self.jitter_cell < 1:
            raise ValueError(f"jitter_cell must be >= 1, got {self.jitter_cell}")


def smooth_field(spec: SceneSpec) -> np.ndarray:
    """White noise box-blurred ``blob_scale`` times with a 3x3 kernel."""
    need = 2 * spec.blob_scale + 1
    if spec.height < need or spec.width < need:
        raise ValueError(
            f"scene {spec.height}x{spec.width} too small for blob_scale {spec.blob_scale} (need >= {need})"
        )
    field = seeding.rng(spec.seed, "truth").standard_normal((spec.height, spec.width))
    for _ in range(spec.blob_scale):
        field = ndimage.uniform_filter(field, size=3, mode="reflect")
    return field


def generate_truth(spec: SceneSpec) -> ClassMap:
    field = smooth_field(spec)
    threshold = np.quantile(field, 1.0 - spec.forest_fraction)
    return ClassMap(np.where(field > threshold, FOREST, NON_FOREST).astype(np.uint8))


def render_sar(truth: ClassMap, spec: SceneSpec) -> Raster:
    """Two-band (VV, VH) dB image with mean-1 gamma speckle of shape ``looks``."""
    if truth.shape != (spec.height, spec.width):
        raise ValueError(f"truth shape {truth.shape} does not match spec {spec.height}x{spec.width}")
    if not truth.is_dense():
        raise ValueError("truth map contains unlabeled (255) pixels")
    means = np.asarray(spec.class_means_db, dtype=np.float64)
    classes = truth.values.astype(np.intp)
    speckle = seeding.rng(spec.seed, "speckle").gamma(
        shape=spec.looks, scale=1.0 / spec.looks, size=(2, spec.height, spec.width)
    )
    out = np.empty((2, spec.height, spec.width), dtype=np.float64)
    for band in range(2):
        power = 10.0 ** (means[classes, band] / 10.0) * speckle[band]
        out[band] = 10.0 * np.log10(power)
    return Raster(out.astype(np.float32))


def coarsen(values: np.ndarray, factor: int) -> np.ndarray:
    """Block-majority downsample then nearest-neighbour upsample.

    Edge blocks are cropped to the image; ties go to non-forest.
    """
    if factor == 1:
        return values.copy()
    h, w = values.shape
    forest = (values == FOREST).astype(np.int64)
    rows = np.arange(0, h, factor)
    cols = np.arange(0, w, factor)
    counts = np.add.reduceat(np.add.reduceat(forest, rows, axis=0), cols, axis=1)
    sizes = np.outer(np.diff(np.append(rows, h)), np.diff(np.append(cols, w)))
    block = np.where(2 * counts > sizes, FOREST, NON_FOREST).astype(np.uint8)
    return np.repeat(np.repeat(block, factor, axis=0), factor, axis=1)[:h, :w]


def jitter_boundaries(values: np.ndarray, radius: int, cell: int, rng: np.random.Generator) -> np.ndarray:
    """Dilate or erode the forest class by a per-cell random radius in [-radius, radius]."""
    if radius == 0:
        return values.copy()
    h, w = values.shape
    forest = values == FOREST
    variants = {0: forest}
    for r in range(1, radius + 1):
        size = 2 * r + 1
        variants[r] = ndimage.maximum_filter(forest, size=size, mode="nearest")
        variants[-r] = ndimage.minimum_filter(forest, size=size, mode="nearest")
    grid = rng.integers(-radius, radius + 1, size=(-(-h // cell), -(-w // cell)))
    choice = np.repeat(np.repeat(grid, cell, axis=0), cell, axis=1)[:h, :w]
    out = np.zeros_like(forest)
    for r, var in variants.items():
        sel = choice == r
        out[sel] = var[sel]
    return np.where(out, FOREST, NON_FOREST).astype(np.uint8)


def degrade_labels(truth: ClassMap, noise: NoiseSpec) -> ClassMap:
    if not truth.is_dense():
        raise ValueError("truth map contains unlabeled (255) pixels")
    values = coarsen(truth.values, noise.coarse_factor)
    values = jitter_boundaries(values, noise.jitter_radius, noise.jitter_cell, seeding.rng(noise.seed, "jitter"))
    if noise.flip_rate > 0.0:
        flips = seeding.rng(noise.seed, "flip").random(values.shape) < noise.flip_rate
        values = np.where(flips, 1 - values, values).astype(np.uint8)
    return ClassMap(values)
