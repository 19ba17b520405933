"""Iterative pseudo-label refinement for dense but inaccurate labels.

Each round trains a freshly initialised network on the current pseudo-labels,
predicts a full map of the training area, and stops once fewer than
``stop_threshold`` of the pixels changed class relative to the labels it was
trained on. Otherwise the prediction becomes the next round's labels.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import seeding
from .metrics_eval import confusion, prf
from .patch_pipeline import Extent, PatchSet, extract_patches, split_scene
from .raster_core import FOREST, NON_FOREST, UNLABELED, ClassMap, Raster, write_classmap
from .training import THRESHOLD, TrainConfig, train
from .unet_model import TINY_CONFIG, Unet, UnetConfig, build, save_checkpoint

log = logging.getLogger(__name__)

Trainer = Callable[[Unet, PatchSet, PatchSet, TrainConfig], Unet]
Predictor = Callable[[Unet, Raster, int, int], tuple[Raster, ClassMap]]


@dataclass(frozen=True)
class RefineConfig:
    stop_threshold: float = 0.10
    max_rounds: int = 8
    train: TrainConfig = field(default_factory=TrainConfig)
    unet: UnetConfig = TINY_CONFIG
    patch: int = 32
    train_patches: int = 500
    val_patches: int = 100
    split_fraction: float = 0.8
    tile: int = 64
    overlap: int = 32
    seed: int = 0
    fine_tune: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.stop_threshold <= 1.0:
            raise ValueError(f"stop_threshold must lie in (0, 1], got {self.stop_threshold}")
        if self.max_rounds < 1:
            raise ValueError(f"max_rounds must be >= 1, got {self.max_rounds}")


@dataclass
class RoundRecord:
    round: int
    change_fraction: float
    class_counts: dict[str, int]
    checkpoint: str | None = None
    metrics: dict[str, float | None] | None = None


@dataclass
class RefineResult:
    labels: ClassMap
    model: Unet
    rounds: list[RoundRecord]
    converged: bool


def tile_starts(length: int, tile: int, overlap: int) -> list[int]:
    if length < tile:
        raise ValueError(f"raster side {length} is smaller than tile {tile}")
    stride = tile - overlap
    if stride < 1:
        raise ValueError(f"overlap {overlap} must be smaller than tile {tile}")
    starts = list(range(0, length - tile + 1, stride))
    if starts[-1] != length - tile:
        starts.append(length - tile)
    return starts


def _kept_span(start: int, tile: int, length: int, margin: int) -> tuple[int, int]:
    lo = start + margin if start > 0 else 0
    hi = start + tile - margin if start + tile < length else length
    return lo, hi


def predict_map(
    model: Unet, raster: Raster, tile: int = 64, overlap: int = 32, batch_size: int = 16
) -> tuple[Raster, ClassMap]:
    """Tiled inference with central-crop stitching.

    Tiles advance by ``tile - overlap``; each tile contributes only its centre,
    trimmed by ``overlap // 2`` on every side that does not touch the raster
    border. Classes are probabilities thresholded at 0.5.
    """
    if raster.bands != model.config.input_channels:
        raise ValueError(f"raster has {raster.bands} bands, model expects {model.config.input_channels}")
    model.config.check_side(tile)
    h, w = raster.height, raster.width
    rows, cols = tile_starts(h, tile, overlap), tile_starts(w, tile, overlap)
    margin = overlap // 2
    image = np.moveaxis(raster.data, 0, -1)
    corners = [(r, c) for r in rows for c in cols]
    probs = np.zeros((h, w), dtype=np.float32)
    for i in range(0, len(corners), batch_size):
        chunk = corners[i : i + batch_size]
        batch = np.stack([image[r : r + tile, c : c + tile] for r, c in chunk])
        out = model.predict(batch, batch_size=batch_size)[..., 0]
        for (r, c), p in zip(chunk, out):
            r0, r1 = _kept_span(r, tile, h, margin)
            c0, c1 = _kept_span(c, tile, w, margin)
            probs[r0:r1, c0:c1] = p[r0 - r : r1 - r, c0 - c : c1 - c]
    classes = np.where(probs >= THRESHOLD, FOREST, NON_FOREST).astype(np.uint8)
    return Raster(probs[None]), ClassMap(classes)


def change_fraction(prev: ClassMap, nxt: ClassMap) -> float:
    """Share of pixels whose class differs between two dense maps."""
    if prev.shape != nxt.shape:
        raise ValueError(f"map shapes differ: {prev.shape} vs {nxt.shape}")
    if not prev.is_dense() or not nxt.is_dense():
        raise ValueError("change_fraction needs dense maps (no 255 codes)")
    return float(np.count_nonzero(prev.values != nxt.values)) / prev.values.size


def _class_counts(cmap: ClassMap) -> dict[str, int]:
    return {
        "non-forest": int(np.count_nonzero(cmap.values == NON_FOREST)),
        "forest": int(np.count_nonzero(cmap.values == FOREST)),
    }


def _default_trainer(model: Unet, train_set: PatchSet, val_set: PatchSet, config: TrainConfig) -> Unet:
    return train(model, train_set, val_set, config, mode="dense").model


def refine_loop(
    raster: Raster,
    initial_labels: ClassMap,
    config: RefineConfig,
    truth: ClassMap | None = None,
    run_dir: str | os.PathLike | None = None,
    trainer: Trainer | None = None,
    predictor: Predictor | None = None,
) -> RefineResult:
    """Train, predict and relabel until the change fraction drops below the threshold.

    ``trainer`` and ``predictor`` default to :func:`training.train` and
    :func:`predict_map`; tests substitute stubs. If ``truth`` is given each
    round records forest-class metrics of its map against it.
    """
    if initial_labels.shape != (raster.height, raster.width):
        raise ValueError(f"labels {initial_labels.shape} do not match raster {raster.height}x{raster.width}")
    if not initial_labels.is_dense():
        raise ValueError("initial labels must be dense (no 255 codes)")
    trainer = trainer or _default_trainer
    predictor = predictor or predict_map
    out = Path(run_dir) if run_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    train_ext, val_ext = split_scene(Extent.full(raster.height, raster.width), config.split_fraction, config.patch)
    labels = initial_labels
    rounds: list[RoundRecord] = []
    model: Unet | None = None
    converged = False
    for r in range(1, config.max_rounds + 1):
        seed = seeding.derive_seed(config.seed, "round", r)
        train_set = extract_patches(raster, labels, config.patch, config.train_patches, seeding.derive_seed(seed, "train"), train_ext)
        val_set = extract_patches(raster, labels, config.patch, config.val_patches, seeding.derive_seed(seed, "val"), val_ext)
        if model is None or not config.fine_tune:
            model = build(config.unet, seeding.derive_seed(seed, "init"))
        tcfg = TrainConfig(**{**asdict(config.train), "seed": seeding.derive_seed(seed, "fit")})
        model = trainer(model, train_set, val_set, tcfg)
        _, predicted = predictor(model, raster, config.tile, config.overlap)
        if not predicted.is_dense():
            raise ValueError(f"round {r} prediction contains {UNLABELED} codes")
        frac = change_fraction(labels, predicted)
        record = RoundRecord(r, frac, _class_counts(predicted))
        if truth is not None:
            record.metrics = prf(confusion(predicted, truth), FOREST)._asdict()
        if out is not None:
            write_classmap(labels, out / f"pseudo_labels_r{r}.wslr")
            write_classmap(predicted, out / f"prediction_r{r}.wslr")
            save_checkpoint(model, out / f"checkpoint_r{r}.wslm")
            record.checkpoint = f"checkpoint_r{r}.wslm"
        rounds.append(record)
        log.info("round %d change fraction %.4f", r, frac)
        if frac < config.stop_threshold:
            converged = True
            break
        if r < config.max_rounds:
            labels = predicted
    if out is not None:
        write_rounds(rounds, converged, out / "rounds.json")
    return RefineResult(predicted, model, rounds, converged)


def write_rounds(rounds: list[RoundRecord], converged: bool, path: str | os.PathLike) -> None:
    payload = {"converged": converged, "rounds": [asdict(r) for r in rounds]}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
