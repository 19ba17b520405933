"""Patch sampling, sparse label masks, augmentation and train/validation splits."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import seeding
from .raster_core import UNLABELED, ClassMap, Raster, read_raster, write_raster

MAX_ANGLE_DEG = 20.0
FLIP_PROBABILITY = 0.5


@dataclass(frozen=True)
class Extent:
    """Half-open pixel window ``[row0, row1) x [col0, col1)``."""

    row0: int
    row1: int
    col0: int
    col1: int

    @classmethod
    def full(cls, height: int, width: int) -> "Extent":
        return cls(0, height, 0, width)

    @property
    def height(self) -> int:
        return self.row1 - self.row0

    @property
    def width(self) -> int:
        return self.col1 - self.col0

    def crop(self, arr: np.ndarray) -> np.ndarray:
        """Crop the last two axes."""
        return arr[..., self.row0 : self.row1, self.col0 : self.col1]


@dataclass
class PatchSet:
    """Aligned stacks: inputs N x H x W x 2 (dB), labels and mask N x H x W x 1 codes in {0, 1}."""

    inputs: np.ndarray
    labels: np.ndarray
    mask: np.ndarray
    corners: np.ndarray | None = None

    def __post_init__(self) -> None:
        n, h, w = self.inputs.shape[:3]
        if self.labels.shape != (n, h, w, 1) or self.mask.shape != (n, h, w, 1):
            raise ValueError(
                f"patch stacks disagree: inputs {self.inputs.shape}, labels {self.labels.shape}, mask {self.mask.shape}"
            )

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def patch_size(self) -> int:
        return self.inputs.shape[1]

    def subset(self, index) -> "PatchSet":
        corners = None if self.corners is None else self.corners[index]
        return PatchSet(self.inputs[index], self.labels[index], self.mask[index], corners)


def split_scene(scene: Extent, fraction: float, patch: int) -> tuple[Extent, Extent]:
    """Split a scene into a left training block and a right validation block.

    The training block spans columns ``[col0, col0 + floor(fraction * width)]``
    inclusive; the validation block takes the remaining columns.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"split fraction must lie in (0, 1), got {fraction}")
    last_train = scene.col0 + math.floor(fraction * scene.width)
    train = Extent(scene.row0, scene.row1, scene.col0, last_train + 1)
    val = Extent(scene.row0, scene.row1, last_train + 1, scene.col1)
    for name, ext in (("train", train), ("validation", val)):
        if ext.width < patch or ext.height < patch:
            raise ValueError(f"{name} extent {ext.height}x{max(ext.width, 0)} is smaller than one {patch}px patch")
    return train, val


def _window_sums(bad: np.ndarray, patch: int) -> np.ndarray:
    """Count of flagged pixels inside every patch window, indexed by top-left corner."""
    integral = np.zeros((bad.shape[0] + 1, bad.shape[1] + 1), dtype=np.int64)
    integral[1:, 1:] = bad.cumsum(0).cumsum(1)
    return integral[patch:, patch:] - integral[:-patch, patch:] - integral[patch:, :-patch] + integral[:-patch, :-patch]


def extract_patches(
    raster: Raster,
    labels: ClassMap,
    patch: int,
    count: int,
    seed: int,
    extent: Extent | None = None,
    max_retries: int = 100,
) -> PatchSet:
    """Sample ``count`` windows at uniform random corners inside ``extent``.

    Windows touching nodata inputs or unlabeled (255) pixels are redrawn, up
    to ``max_retries`` times per patch.
    """
    if (raster.height, raster.width) != labels.shape:
        raise ValueError(f"raster {raster.height}x{raster.width} and labels {labels.shape} differ")
    extent = extent or Extent.full(raster.height, raster.width)
    if extent.height < patch or extent.width < patch:
        raise ValueError(f"extent {extent.height}x{extent.width} is smaller than patch {patch}")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    bad = raster.nodata_mask().any(axis=0) | (labels.values == UNLABELED)
    bad_counts = _window_sums(bad, patch)
    rng = seeding.rng(seed, "corners")
    corners = np.empty((count, 2), dtype=np.int64)
    for i in range(count):
        for _ in range(max_retries + 1):
            r = int(rng.integers(extent.row0, extent.row1 - patch + 1))
            c = int(rng.integers(extent.col0, extent.col1 - patch + 1))
            if bad_counts[r, c] == 0:
                break
        else:
            raise ValueError(f"no valid window found for patch {i} after {max_retries} retries")
        corners[i] = (r, c)
    data = np.moveaxis(raster.data, 0, -1)
    inputs = np.stack([data[r : r + patch, c : c + patch] for r, c in corners])
    labs = np.stack([labels.values[r : r + patch, c : c + patch] for r, c in corners])[..., None]
    return PatchSet(inputs.astype(np.float32), labs.astype(np.uint8), np.ones_like(labs, dtype=np.uint8), corners)


def retained_count(keep_fraction: float, height: int, width: int) -> int:
    # Half-up rounding; Python's round() would send 0.5 to the even neighbour.
    return int(math.floor(keep_fraction * height * width + 0.5))


def mask_labels(patches: PatchSet, keep_fraction: float, seed: int) -> PatchSet:
    """Keep exactly ``round(keep_fraction * H * W)`` loss pixels per patch.

    Each patch draws its pixels without replacement from its own substream.
    Labels are untouched; the mask alone carries the sparsity.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    n, h, w, _ = patches.mask.shape
    k = retained_count(keep_fraction, h, w)
    mask = np.zeros_like(patches.mask)
    for i in range(n):
        candidates = np.flatnonzero(patches.mask[i, ..., 0])
        if k >= candidates.size:
            chosen = candidates
        else:
            chosen = seeding.rng(seed, i).choice(candidates, size=k, replace=False)
        mask[i].reshape(-1)[chosen] = 1
    return PatchSet(patches.inputs, patches.labels, mask, patches.corners)


def transform_sample(
    inputs: np.ndarray, labels: np.ndarray, mask: np.ndarray, flip: bool, angle_deg: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vertical flip (optional) then rotation about the patch centre.

    Inputs are resampled bilinearly, labels and mask by nearest neighbour.
    Output pixels whose source falls outside the patch get mask 0.
    """
    if flip:
        inputs, labels, mask = inputs[::-1], labels[::-1], mask[::-1]
    if angle_deg == 0.0:
        return inputs.copy(), labels.copy(), mask.copy()
    h, w = inputs.shape[:2]
    theta = math.radians(angle_deg)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64) - cy, np.arange(w, dtype=np.float64) - cx, indexing="ij")
    cos, sin = math.cos(theta), math.sin(theta)
    src_r = cos * rr - sin * cc + cy
    src_c = sin * rr + cos * cc + cx
    tol = 1e-9
    inside = (src_r >= -tol) & (src_r <= h - 1 + tol) & (src_c >= -tol) & (src_c <= w - 1 + tol)
    coords = np.stack([src_r, src_c])
    out_in = np.empty_like(inputs)
    for ch in range(inputs.shape[-1]):
        out_in[..., ch] = ndimage.map_coordinates(inputs[..., ch], coords, order=1, mode="nearest")
    out_in[~inside] = 0
    out_lab = ndimage.map_coordinates(labels[..., 0], coords, order=0, mode="nearest")[..., None]
    out_mask = ndimage.map_coordinates(mask[..., 0], coords, order=0, mode="nearest")[..., None]
    out_mask = (out_mask.astype(bool) & inside[..., None]).astype(mask.dtype)
    return out_in.astype(inputs.dtype), out_lab.astype(labels.dtype), out_mask


def augment_params(seed: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample (flip, angle) draws; sample i depends only on (seed, i)."""
    flips = np.empty(n, dtype=bool)
    angles = np.empty(n, dtype=np.float64)
    for i in range(n):
        rng = seeding.rng(seed, "augment", i)
        flips[i] = rng.random() < FLIP_PROBABILITY
        angles[i] = rng.uniform(-MAX_ANGLE_DEG, MAX_ANGLE_DEG)
    return flips, angles


def apply_transforms(batch: PatchSet, flips: np.ndarray, angles: np.ndarray) -> PatchSet:
    parts = [
        transform_sample(batch.inputs[i], batch.labels[i], batch.mask[i], bool(flips[i]), float(angles[i]))
        for i in range(len(batch))
    ]
    return PatchSet(
        np.stack([p[0] for p in parts]),
        np.stack([p[1] for p in parts]),
        np.stack([p[2] for p in parts]),
        batch.corners,
    )


def augment(batch: PatchSet, seed: int) -> PatchSet:
    """Random vertical flip (p = 0.5) and rotation in [-20, 20] degrees per sample."""
    flips, angles = augment_params(seed, len(batch))
    return apply_transforms(batch, flips, angles)


# ---------------------------------------------------------------------------
# directory serialisation
# ---------------------------------------------------------------------------


def save_patchset(patches: PatchSet, directory: str | os.PathLike, seed: int) -> None:
    """Write inputs.wslr, labels.wslr, mask.wslr and manifest.txt.

    Samples are folded into the band axis: inputs band ``2*i + c`` is channel
    c of sample i.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    n, h, w, c = patches.inputs.shape
    write_raster(Raster(np.moveaxis(patches.inputs, -1, 1).reshape(n * c, h, w)), d / "inputs.wslr")
    write_raster(Raster(patches.labels[..., 0].astype(np.float32)), d / "labels.wslr")
    write_raster(Raster(patches.mask[..., 0].astype(np.float32)), d / "mask.wslr")
    manifest = {"count": n, "height": h, "width": w, "channels": c, "seed": seed}
    (d / "manifest.txt").write_text("".join(f"{k}={v}\n" for k, v in manifest.items()))


def read_manifest(path: str | os.PathLike) -> dict[str, int]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = int(value)
    return out


def load_patchset(directory: str | os.PathLike) -> PatchSet:
    d = Path(directory)
    man = read_manifest(d / "manifest.txt")
    n, h, w, c = man["count"], man["height"], man["width"], man["channels"]
    inputs = read_raster(d / "inputs.wslr").data
    labels = read_raster(d / "labels.wslr").data
    mask = read_raster(d / "mask.wslr").data
    if inputs.shape != (n * c, h, w) or labels.shape != (n, h, w) or mask.shape != (n, h, w):
        raise ValueError(f"patch files in {d} disagree with manifest {man}")
    return PatchSet(
        np.ascontiguousarray(np.moveaxis(inputs.reshape(n, c, h, w), 1, -1)),
        labels.astype(np.uint8)[..., None],
        mask.astype(np.uint8)[..., None],
    )
