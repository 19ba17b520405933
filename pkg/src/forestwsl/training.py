"""Masked binary cross-entropy, Adam with L2 weight decay, and the epoch loop.

The same loop serves dense training (mask all ones), sparse training (mask
keeps a few pixels per patch) and each round of pseudo-label refinement.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import seeding
from .metrics_eval import prf_from_counts
from .patch_pipeline import PatchSet, augment
from .tensor_autodiff import BatchNormState, Tensor, _result
from .unet_model import Unet, is_decayed

log = logging.getLogger(__name__)

BCE_CLAMP = 1e-7
THRESHOLD = 0.5


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, message: str):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    weight_decay: float = 5e-4
    max_epochs: int = 50
    patience: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    augment: bool = True
    bn_recalibration: int = 256

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.bn_recalibration < 0:
            raise ValueError(f"bn_recalibration must be >= 0, got {self.bn_recalibration}")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be >= 1")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def masked_bce(probs: Tensor, labels: Tensor | np.ndarray, mask: Tensor | np.ndarray) -> Tensor:
    """Mean binary cross-entropy over pixels with mask 1.

    Probabilities are clamped to ``[1e-7, 1 - 1e-7]`` inside the logarithms.
    The gradient is exactly zero wherever mask is 0, and the loss does not
    depend on the values stored there.
    """
    y = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if y.shape != probs.shape or m.shape != probs.shape:
        raise ValueError(f"shape mismatch: probs {probs.shape}, labels {y.shape}, mask {m.shape}")
    keep = m != 0
    count = int(keep.sum())
    if count == 0:
        raise ValueError("masked_bce: every pixel is masked out (M = 0)")
    dt = probs.dtype.type
    y = y.astype(probs.dtype)
    p = np.clip(probs.data, dt(BCE_CLAMP), dt(1) - dt(BCE_CLAMP))
    # np.where keeps masked-out pixels at exactly 0 whatever the probabilities hold.
    pos = np.where(keep & (y > 0.5), p, dt(1))
    neg = np.where(keep & (y <= 0.5), dt(1) - p, dt(1))
    total = np.log(pos).sum() + np.log(neg).sum()
    loss = np.asarray(-total / dt(count), dtype=probs.dtype)

    def backward(g):
        # Clamped pixels keep the derivative at the clamp value so saturated mistakes still move.
        d = np.where(keep, (-(y / p) + (dt(1) - y) / (dt(1) - p)) / dt(count), dt(0))
        probs._accumulate((g * d).astype(probs.dtype))

    return _result(loss, (probs,), "masked_bce", backward)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
    decayed: Callable[[str], bool] = is_decayed,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update, in place on ``params`` and ``state``.

    Weight decay is coupled: ``weight_decay * param`` is added to the gradient
    of every parameter selected by ``decayed`` before the moment updates.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    t = state.t
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, g in grads.items():
        p = params[name]
        if config.weight_decay and decayed(name):
            g = g + p.dtype.type(config.weight_decay) * p
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p -= (config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)).astype(p.dtype)
    return params, state


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_precision: float | None
    val_recall: float | None
    val_f1: float | None


@dataclass
class TrainResult:
    model: Unet
    history: list[EpochRecord]
    best_epoch: int


def masked_scores(model: Unet, patches: PatchSet, batch_size: int = 64):
    """Forest-class precision/recall/F1 over the mask-1 pixels of ``patches``."""
    probs = model.predict(patches.inputs, batch_size=batch_size)
    keep = patches.mask[..., 0] != 0
    pred = (probs[..., 0] >= THRESHOLD)[keep]
    truth = (patches.labels[..., 0] == 1)[keep]
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    return prf_from_counts(tp, fp, fn)


def recalibrate_bn(model: Unet, patches: PatchSet, batch_size: int = 16) -> None:
    """Replace the running batch-norm statistics with population statistics.

    Runs the current weights over ``patches`` in batch-statistics mode, with
    dropout off as at inference, and pools the per-batch means and second
    moments weighted by batch size. Updates ``model.bn_states`` in place.
    """
    if len(patches) == 0:
        return
    view = Unet(replace(model.config, dropout_rate=0.0), model.params, dict(model.bn_states))
    leaves = {k: Tensor(v) for k, v in model.params.items()}
    sums: dict[str, list[np.ndarray]] = {}
    for start in range(0, len(patches), batch_size):
        batch = patches.inputs[start : start + batch_size]
        # momentum 0 makes the returned state the batch statistics themselves
        states = view.forward_graph(batch, True, params=leaves, bn_momentum=0.0).bn_states
        for name, st in states.items():
            mean, var = st.mean.astype(np.float64), st.var.astype(np.float64)
            acc = sums.setdefault(name, [np.zeros_like(mean), np.zeros_like(mean)])
            acc[0] += len(batch) * mean
            acc[1] += len(batch) * (var + mean * mean)
    n = float(len(patches))
    for name, (s1, s2) in sums.items():
        mean = s1 / n
        dt = model.bn_states[name].mean.dtype
        model.bn_states[name] = BatchNormState(mean.astype(dt), np.maximum(s2 / n - mean * mean, 0.0).astype(dt))


def train_step(model: Unet, batch: PatchSet, state: AdamState, config: TrainConfig, dropout_seed: int) -> float:
    """Forward, backward and one Adam update on ``batch``; returns the batch loss."""
    fp = model.forward_graph(batch.inputs, training=True, seed=dropout_seed)
    loss = masked_bce(fp.output, batch.labels, batch.mask)
    loss.backward()
    value = float(loss.data)
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite loss {value}")
    grads = {k: t.grad for k, t in fp.params.items() if t.grad is not None}
    adam_step(model.params, grads, state, config)
    model.bn_states.update(fp.bn_states)
    return value


def train(model: Unet, train_set: PatchSet, val_set: PatchSet, config: TrainConfig, mode: str = "dense") -> TrainResult:
    """Fit ``model`` (a copy of it) and return the best-validation weights.

    Each epoch shuffles with a seeded permutation, augments every batch, and
    scores forest-class F1 on the validation mask-1 pixels. Training stops
    after ``patience`` epochs without a strict F1 improvement.
    """
    if mode not in ("dense", "sparse"):
        raise ValueError(f"mode must be 'dense' or 'sparse', got {mode!r}")
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train and validation patch sets must be non-empty")
    if mode == "dense" and not np.all(train_set.mask == 1):
        raise ValueError("dense mode requires an all-ones training mask")
    model = model.copy()
    state = AdamState()
    history: list[EpochRecord] = []
    best, best_score, best_epoch, waited = model.copy(), -np.inf, 0, 0
    n = len(train_set)
    for epoch in range(config.max_epochs):
        order = seeding.rng(config.seed, "shuffle", epoch).permutation(n)
        losses = []
        for b, start in enumerate(range(0, n, config.batch_size)):
            batch = train_set.subset(np.sort(order[start : start + config.batch_size]))
            if config.augment:
                batch = augment(batch, seeding.derive_seed(config.seed, "augment", epoch, b))
            if not batch.mask.any():
                continue
            try:
                losses.append(
                    train_step(model, batch, state, config, seeding.derive_seed(config.seed, "dropout", epoch, b))
                )
            except FloatingPointError as exc:
                raise DivergenceError(epoch, str(exc)) from exc
        if config.bn_recalibration:
            recalibrate_bn(model, train_set.subset(slice(0, config.bn_recalibration)), config.batch_size)
        scores = masked_scores(model, val_set)
        record = EpochRecord(epoch, float(np.mean(losses)), *scores)
        history.append(record)
        log.info("epoch %d loss %.4f val_f1 %s", epoch, record.train_loss, record.val_f1)
        score = -1.0 if record.val_f1 is None else record.val_f1
        if score > best_score:
            best, best_score, best_epoch, waited = model.copy(), score, epoch, 0
        else:
            waited += 1
            if waited >= config.patience:
                break
    return TrainResult(best, history, best_epoch)


def history_lines(history: list[EpochRecord]) -> str:
    return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in history)


def write_history(history: list[EpochRecord], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(history_lines(history))
