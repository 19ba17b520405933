"""Encoder-decoder segmentation network built on :mod:`forestwsl.tensor_autodiff`.

Layout for ``depth`` levels with widths ``base_filters * width_multipliers[i]``:

* encoder level i: [conv3x3 -> BN -> ReLU] x 2, 2x2 max-pool, dropout
* bottleneck: [conv3x3 -> BN -> ReLU] x 2 at ``base_filters * bottleneck_multiplier``
* decoder level i (deepest first): 2x2 stride-2 transposed conv back to the
  level-i width, merge with the encoder skip (concat or add),
  [conv3x3 -> BN -> ReLU] x 2, dropout
* head: 1x1 conv to one channel, sigmoid
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from . import tensor_autodiff as ad
from .tensor_autodiff import BatchNormState, Tensor

CHECKPOINT_MAGIC = b"WSLM"
CHECKPOINT_VERSION = 1
SKIP_MODES = ("concat", "add")


class CheckpointError(ValueError):
    """Raised when a checkpoint file is malformed or does not match its config."""


@dataclass(frozen=True)
class UnetConfig:
    depth: int = 5
    base_filters: int = 32
    width_multipliers: tuple[int, ...] = (1, 2, 4, 8, 16)
    bottleneck_multiplier: int = 32
    dropout_rate: float = 0.5
    skip_mode: str = "concat"
    input_channels: int = 2
    output_channels: int = 1
    init_mode: str = "he"

    def __post_init__(self) -> None:
        object.__setattr__(self, "width_multipliers", tuple(int(m) for m in self.width_multipliers))
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if len(self.width_multipliers) != self.depth:
            raise ValueError(
                f"width_multipliers has {len(self.width_multipliers)} entries for depth {self.depth}"
            )
        if self.base_filters < 1 or self.bottleneck_multiplier < 1 or min(self.width_multipliers) < 1:
            raise ValueError("filter counts must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.skip_mode not in SKIP_MODES:
            raise ValueError(f"skip_mode must be one of {SKIP_MODES}, got {self.skip_mode!r}")
        if self.output_channels != 1:
            raise ValueError("only single-channel (binary) heads are supported")
        if self.init_mode not in ("he", "xavier"):
            raise ValueError(f"init_mode must be 'he' or 'xavier', got {self.init_mode!r}")

    def widths(self) -> list[int]:
        return [self.base_filters * m for m in self.width_multipliers]

    @property
    def bottleneck_width(self) -> int:
        return self.base_filters * self.bottleneck_multiplier

    def check_side(self, side: int) -> None:
        if side % (2**self.depth):
            raise ValueError(f"patch side {side} is not divisible by 2**depth = {2**self.depth}")


FULL_CONFIG = UnetConfig()
TINY_CONFIG = UnetConfig(depth=3, base_filters=8, width_multipliers=(1, 2, 4), bottleneck_multiplier=8)
NAMED_CONFIGS = {"full": FULL_CONFIG, "tiny": TINY_CONFIG}


def layer_shapes(config: UnetConfig) -> Iterator[tuple[str, tuple[int, ...]]]:
    """Trainable tensors in their stable order, as (name, shape)."""

    def conv_pair(prefix: str, cin: int, cout: int):
        for j, c_in in enumerate((cin, cout)):
            yield f"{prefix}.conv{j}.kernel", (3, 3, c_in, cout)
            yield f"{prefix}.conv{j}.bias", (cout,)
            yield f"{prefix}.bn{j}.gamma", (cout,)
            yield f"{prefix}.bn{j}.beta", (cout,)

    widths = config.widths()
    cin = config.input_channels
    for i, w in enumerate(widths):
        yield from conv_pair(f"enc{i}", cin, w)
        cin = w
    yield from conv_pair("mid", cin, config.bottleneck_width)
    cin = config.bottleneck_width
    for i in reversed(range(config.depth)):
        w = widths[i]
        yield f"dec{i}.up.kernel", (2, 2, cin, w)
        yield f"dec{i}.up.bias", (w,)
        merged = 2 * w if config.skip_mode == "concat" else w
        yield from conv_pair(f"dec{i}", merged, w)
        cin = w
    yield "head.kernel", (1, 1, cin, config.output_channels)
    yield "head.bias", (config.output_channels,)


def batch_norm_layers(config: UnetConfig) -> list[tuple[str, int]]:
    return [(name[: -len(".gamma")], shape[0]) for name, shape in layer_shapes(config) if name.endswith(".gamma")]


def is_decayed(name: str) -> bool:
    """Only convolution kernels take weight decay; biases and BN affine terms do not."""
    return name.endswith(".kernel")


@dataclass
class ForwardPass:
    output: Tensor
    params: dict[str, Tensor]
    bn_states: dict[str, BatchNormState]


@dataclass
class Unet:
    config: UnetConfig
    params: dict[str, np.ndarray]
    bn_states: dict[str, BatchNormState] = field(default_factory=dict)

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype

    def parameter_count(self) -> int:
        return sum(v.size for v in self.params.values())

    def copy(self) -> "Unet":
        return Unet(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: BatchNormState(s.mean.copy(), s.var.copy()) for k, s in self.bn_states.items()},
        )

    def astype(self, dtype) -> "Unet":
        return Unet(
            self.config,
            {k: v.astype(dtype) for k, v in self.params.items()},
            {k: BatchNormState(s.mean.astype(dtype), s.var.astype(dtype)) for k, s in self.bn_states.items()},
        )

    def forward_graph(
        self,
        inputs: np.ndarray | Tensor,
        training: bool,
        seed: ad.SeedLike = None,
        params: dict[str, Tensor] | None = None,
        bn_momentum: float = ad.BN_MOMENTUM,
    ) -> ForwardPass:
        """Run the network and keep the autodiff graph.

        ``params`` may supply pre-built leaf tensors (gradient checks do this);
        otherwise leaves are created from the stored arrays, with gradients
        enabled only in training mode.
        """
        cfg = self.config
        x = inputs if isinstance(inputs, Tensor) else Tensor(np.asarray(inputs, dtype=self.dtype))
        if x.data.ndim != 4 or x.shape[-1] != cfg.input_channels:
            raise ValueError(f"expected N x H x W x {cfg.input_channels} input, got {x.shape}")
        if x.shape[1] != x.shape[2]:
            raise ValueError(f"expected square patches, got {x.shape[1]}x{x.shape[2]}")
        cfg.check_side(x.shape[1])
        if params is None:
            params = {k: Tensor(v, requires_grad=training) for k, v in self.params.items()}
        rng = ad._generator(seed) if training else None
        new_states: dict[str, BatchNormState] = {}

        def conv_pair(prefix: str, h: Tensor) -> Tensor:
            for j in range(2):
                h = ad.conv2d(h, params[f"{prefix}.conv{j}.kernel"], params[f"{prefix}.conv{j}.bias"])
                bn = f"{prefix}.bn{j}"
                h, new_states[bn] = ad.batch_norm(
                    h, params[f"{bn}.gamma"], params[f"{bn}.beta"], self.bn_states[bn], training, bn_momentum
                )
                h = ad.relu(h)
            return h

        skips = []
        h = x
        for i in range(cfg.depth):
            h = conv_pair(f"enc{i}", h)
            skips.append(h)
            h = ad.max_pool2(h)
            h = ad.dropout(h, cfg.dropout_rate, training, rng)
        h = conv_pair("mid", h)
        for i in reversed(range(cfg.depth)):
            h = ad.conv2d_transpose(h, params[f"dec{i}.up.kernel"], params[f"dec{i}.up.bias"])
            h = ad.concat_channels(h, skips[i]) if cfg.skip_mode == "concat" else ad.add(h, skips[i])
            h = conv_pair(f"dec{i}", h)
            h = ad.dropout(h, cfg.dropout_rate, training, rng)
        h = ad.conv2d(h, params["head.kernel"], params["head.bias"])
        return ForwardPass(ad.sigmoid(h), params, new_states)

    def predict(self, inputs: np.ndarray, batch_size: int = 32) -> np.ndarray:
        """Inference-mode probabilities, N x H x W x 1."""
        inputs = np.asarray(inputs, dtype=self.dtype)
        chunks = [
            self.forward_graph(inputs[i : i + batch_size], training=False).output.data
            for i in range(0, len(inputs), batch_size)
        ]
        return np.concatenate(chunks, axis=0)


def build(config: UnetConfig, seed: int, dtype=np.float32) -> Unet:
    """Initialise every kernel from ``seed``; biases and BN shifts start at zero, BN scales at one."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in layer_shapes(config):
        if name.endswith(".kernel"):
            params[name] = ad.he_init(shape, rng, dtype=dtype, mode=config.init_mode).data
        elif name.endswith(".gamma"):
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    states = {name: BatchNormState.fresh(c, dtype) for name, c in batch_norm_layers(config)}
    return Unet(config, params, states)


def forward(model: Unet, batch_inputs: np.ndarray, training: bool = False, seed: ad.SeedLike = None) -> np.ndarray:
    return model.forward_graph(batch_inputs, training, seed).output.data


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------


def _config_block(cfg: UnetConfig) -> bytes:
    dropout_ppm = int(round(cfg.dropout_rate * 1_000_000))
    head = struct.pack(
        "<9I",
        cfg.depth,
        cfg.base_filters,
        cfg.bottleneck_multiplier,
        dropout_ppm,
        SKIP_MODES.index(cfg.skip_mode),
        cfg.input_channels,
        cfg.output_channels,
        ("he", "xavier").index(cfg.init_mode),
        len(cfg.width_multipliers),
    )
    return head + struct.pack(f"<{cfg.depth}I", *cfg.width_multipliers)


def _records(model: Unet) -> Iterator[tuple[str, np.ndarray]]:
    yield from model.params.items()
    for name, state in model.bn_states.items():
        yield f"{name}.running_mean", state.mean
        yield f"{name}.running_var", state.var


def encode_checkpoint(model: Unet) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION), _config_block(model.config)]
    records = list(_records(model))
    parts.append(struct.pack("<I", len(records)))
    for name, arr in records:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model: Unet, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(model))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, fmt: str) -> tuple:
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.blob):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        out = struct.unpack_from(fmt, self.blob, self.pos)
        self.pos += size
        return out

    def raw(self, size: int) -> bytes:
        if self.pos + size > len(self.blob):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        out = self.blob[self.pos : self.pos + size]
        self.pos += size
        return out


def decode_checkpoint(blob: bytes) -> Unet:
    rd = _Reader(blob)
    if rd.raw(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic, expected b'WSLM'")
    (version,) = rd.take("<H")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    depth, base, bott, ppm, skip, cin, cout, init, nmult = rd.take("<9I")
    if nmult != depth or depth > 16:
        raise CheckpointError(f"config block inconsistent: depth {depth}, {nmult} multipliers")
    mults = rd.take(f"<{depth}I")
    try:
        cfg = UnetConfig(
            depth=depth,
            base_filters=base,
            width_multipliers=mults,
            bottleneck_multiplier=bott,
            dropout_rate=ppm / 1_000_000,
            skip_mode=SKIP_MODES[skip],
            input_channels=cin,
            output_channels=cout,
            init_mode=("he", "xavier")[init],
        )
    except (ValueError, IndexError) as exc:
        raise CheckpointError(f"invalid config block: {exc}") from exc
    expected: dict[str, tuple[int, ...]] = dict(layer_shapes(cfg))
    for name, c in batch_norm_layers(cfg):
        expected[f"{name}.running_mean"] = (c,)
        expected[f"{name}.running_var"] = (c,)
    (count,) = rd.take("<I")
    if count != len(expected):
        raise CheckpointError(f"checkpoint holds {count} tensors, config implies {len(expected)}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = rd.take("<H")
        name = rd.raw(nlen).decode("utf-8")
        (rank,) = rd.take("<B")
        dims = rd.take(f"<{rank}I")
        if name not in expected:
            raise CheckpointError(f"unexpected tensor {name!r}")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name!r}")
        if tuple(dims) != expected[name]:
            raise CheckpointError(f"shape mismatch for {name!r}: file {tuple(dims)}, config {expected[name]}")
        size = int(np.prod(dims))
        tensors[name] = np.frombuffer(rd.raw(4 * size), dtype="<f4").astype(np.float32).reshape(dims)
    if rd.pos != len(blob):
        raise CheckpointError(f"{len(blob) - rd.pos} trailing bytes after last tensor")
    params = {name: tensors[name] for name, _ in layer_shapes(cfg)}
    states = {
        name: BatchNormState(tensors[f"{name}.running_mean"], tensors[f"{name}.running_var"])
        for name, _ in batch_norm_layers(cfg)
    }
    return Unet(cfg, params, states)


def load_checkpoint(path: str | os.PathLike) -> Unet:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def config_with(config: UnetConfig, **changes) -> UnetConfig:
    return replace(config, **changes)
