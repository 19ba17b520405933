"""Shared gradient-check cases for the unit and acceptance suites."""

from __future__ import annotations

import numpy as np

from forestwsl.tensor_autodiff import (
    BatchNormState,
    GradCheckReport,
    Tensor,
    batch_norm,
    concat_channels,
    conv2d,
    conv2d_transpose,
    dropout,
    finite_diff_report,
    max_pool2,
    mul,
    relu,
    sigmoid,
    sum_all,
)
from forestwsl.unet_model import UnetConfig, build

GRAD_TINY_CONFIG = UnetConfig(depth=2, base_filters=4, width_multipliers=(1, 1), bottleneck_multiplier=1)


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    return sum_all(mul(out, Tensor(weights.astype(out.dtype))))


def layer_reports(dtype) -> dict[str, GradCheckReport]:
    """One finite-difference report per layer type on small random tensors."""
    rng = np.random.default_rng(0)

    def r(*shape):
        return rng.normal(size=shape).astype(dtype)

    state = BatchNormState(np.array([0.2, -0.1], dtype), np.array([1.3, 0.8], dtype))
    w5, w8, w4, w2 = r(1, 5, 5, 3), r(2, 4, 6, 3), r(2, 3, 3, 2), r(1, 2, 2, 4)
    pool_in = (rng.permutation(64).reshape(1, 4, 4, 4) / 10).astype(dtype)
    positive = rng.uniform(0.5, 2.0, size=(3, 4)).astype(dtype)
    cases = {
        "conv2d": (lambda x, k, b: _weighted(conv2d(x, k, b), w5), [r(1, 5, 5, 2), r(3, 3, 2, 3), r(3)]),
        "conv2d_1x1": (lambda x, k: _weighted(conv2d(x, k), w5), [r(1, 5, 5, 2), r(1, 1, 2, 3)]),
        "conv2d_transpose": (
            lambda x, k, b: _weighted(conv2d_transpose(x, k, b), w8),
            [r(2, 2, 3, 2), r(2, 2, 2, 3), r(3)],
        ),
        "batch_norm_train": (
            lambda x, g, b: _weighted(batch_norm(x, g, b, state, True)[0], w4),
            [r(2, 3, 3, 2), r(2), r(2)],
        ),
        "batch_norm_infer": (
            lambda x, g, b: _weighted(batch_norm(x, g, b, state, False)[0], w4),
            [r(2, 3, 3, 2), r(2), r(2)],
        ),
        "max_pool2": (lambda x: _weighted(max_pool2(x), w2), [pool_in]),
        "relu": (lambda x: sum_all(relu(x)), [positive]),
        "sigmoid": (lambda x: _weighted(sigmoid(x), w4), [r(2, 3, 3, 2)]),
        "dropout": (lambda x: _weighted(dropout(x, 0.5, True, seed=3), w4), [r(2, 3, 3, 2)]),
        "concat_channels": (
            lambda a, b: _weighted(concat_channels(a, b), np.concatenate([w4, w4[..., :1]], -1)),
            [r(2, 3, 3, 2), r(2, 3, 3, 1)],
        ),
    }
    return {name: finite_diff_report(fn, inputs) for name, (fn, inputs) in cases.items()}


def is_pre_bn_bias(name: str) -> bool:
    """Conv biases feeding a batch norm: the normalisation cancels them, so their gradient is exactly zero."""
    return name.endswith(".bias") and ".conv" in name


def tiny_model_report(dtype, max_elements: int | None = 80) -> tuple[GradCheckReport, float, float]:
    """End-to-end check of a depth-2, width-4 network on 8x8 inputs.

    Returns the relative-error report over the input and every parameter with
    a non-trivial gradient, the largest absolute analytic gradient among the
    batch-norm-cancelled biases, and the largest gradient overall for scale.
    """
    model = build(GRAD_TINY_CONFIG, seed=3).astype(dtype)
    names = list(model.params)
    checked = [n for n in names if not is_pre_bn_bias(n)]
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 8, 8, 2)).astype(dtype)
    weights = rng.normal(size=(2, 8, 8, 1))

    def run(x, params):
        return _weighted(model.forward_graph(x, training=True, seed=11, params=params).output, weights)

    def fn(x, *leaves):
        params = {n: Tensor(v.astype(x.dtype)) for n, v in model.params.items()}
        params.update(zip(checked, leaves))
        return run(x, params)

    report = finite_diff_report(fn, [x] + [model.params[n] for n in checked], max_elements=max_elements)
    leaves = {n: Tensor(v.copy(), requires_grad=True) for n, v in model.params.items()}
    run(Tensor(x), leaves).backward()
    cancelled = max(float(np.abs(leaves[n].grad).max()) for n in names if is_pre_bn_bias(n))
    overall = max(float(np.abs(t.grad).max()) for t in leaves.values())
    return report, cancelled, overall
