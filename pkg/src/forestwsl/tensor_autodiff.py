"""A small NHWC tensor engine with reverse-mode gradients.

Only the layers the segmentation network needs are provided. Every op keeps
the dtype of its inputs: models run in float32, and gradient checks can run
the same graph in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SeedLike = int | np.random.Generator | None


class Tensor:
    """Array value plus the bookkeeping needed to backpropagate into it.

    A tensor produced by an op records its parents and a closure that maps the
    output gradient to parent gradients; leaves have neither.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, op: str = "leaf"):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor through the recorded graph.

        Nodes are visited in reverse topological order, each exactly once.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str, backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data, op=op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def backward(g):
        a._accumulate(g)
        b._accumulate(g)

    return _result(a.data + b.data, (a, b), "add", backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")

    def backward(g):
        a._accumulate(g * b.data)
        b._accumulate(g * a.data)

    return _result(a.data * b.data, (a, b), "mul", backward)


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), "sum", backward)


def relu(x: Tensor) -> Tensor:
    active = x.data > 0

    def backward(g):
        x._accumulate(g * active)

    return _result(np.where(active, x.data, 0).astype(x.dtype), (x,), "relu", backward)


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, with the output held strictly inside (0, 1)."""
    e = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    one = x.dtype.type(1)
    np.clip(s, np.finfo(x.dtype).tiny, np.nextafter(one, x.dtype.type(0)), out=s)

    def backward(g):
        x._accumulate(g * s * (one - s))

    return _result(s, (x,), "sigmoid", backward)


def _generator(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def dropout(x: Tensor, rate: float, training: bool, seed: SeedLike = None) -> Tensor:
    """Inverted dropout: kept values are scaled by ``1 / (1 - rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = _generator(seed).random(x.shape) >= rate
    scale = (keep / (1.0 - rate)).astype(x.dtype)

    def backward(g):
        x._accumulate(g * scale)

    return _result(x.data * scale, (x,), "dropout", backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[:-1] != b.shape[:-1]:
        raise ValueError(f"concat spatial mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[-1]

    def backward(g):
        a._accumulate(g[..., :ca])
        b._accumulate(g[..., ca:])

    return _result(np.concatenate([a.data, b.data], axis=-1), (a, b), "concat", backward)


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, k: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1, zero-padded 'same' cross-correlation.

    ``x`` is N x H x W x Cin and ``k`` is kH x kW x Cin x Cout with odd kH, kW.
    """
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise ValueError(f"conv2d expects rank-4 input and kernel, got {x.shape} and {k.shape}")
    n, h, w, cin = x.shape
    kh, kw, kcin, cout = k.shape
    if kcin != cin:
        raise ValueError(f"conv2d channel mismatch: input has {cin}, kernel expects {kcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d needs odd kernel sides, got {kh}x{kw}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d bias shape {bias.shape} != ({cout},)")
    ph, pw = kh // 2, kw // 2
    kmat = k.data.reshape(kh * kw * cin, cout)
    if kh == 1 and kw == 1:
        cols = x.data.reshape(n * h * w, cin)
    else:
        xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # n, h, w, cin, kh, kw
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, kh * kw * cin)
    out = cols @ kmat
    if bias is not None:
        out += bias.data
    out = out.reshape(n, h, w, cout)
    parents = (x, k) if bias is None else (x, k, bias)

    def backward(g):
        g2 = g.reshape(n * h * w, cout)
        if k.requires_grad:
            k._accumulate((cols.T @ g2).reshape(k.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            dcols = g2 @ kmat.T
            if kh == 1 and kw == 1:
                x._accumulate(dcols.reshape(x.shape))
                return
            dcols = dcols.reshape(n, h, w, kh, kw, cin)
            dxp = np.zeros((n, h + 2 * ph, w + 2 * pw, cin), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + h, j : j + w, :] += dcols[:, :, :, i, j, :]
            x._accumulate(dxp[:, ph : ph + h, pw : pw + w, :])

    return _result(out, parents, "conv2d", backward)


def conv2d_transpose(x: Tensor, k: Tensor, bias: Tensor | None = None) -> Tensor:
    """2x2 stride-2 transposed convolution: N x H x W x Cin -> N x 2H x 2W x Cout.

    Input pixel (i, j) writes ``x[i, j] @ k[a, b]`` to output pixel
    (2i + a, 2j + b); this is the adjoint of a 2x2 stride-2 convolution.
    """
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise ValueError(f"conv2d_transpose expects rank-4 input and kernel, got {x.shape} and {k.shape}")
    n, h, w, cin = x.shape
    if k.shape[:2] != (2, 2) or k.shape[2] != cin:
        raise ValueError(f"conv2d_transpose kernel must be 2x2x{cin}xCout, got {k.shape}")
    cout = k.shape[3]
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d_transpose bias shape {bias.shape} != ({cout},)")
    kmat = k.data.transpose(2, 0, 1, 3).reshape(cin, 4 * cout)
    x2 = x.data.reshape(n * h * w, cin)
    y = (x2 @ kmat).reshape(n, h, w, 2, 2, cout).transpose(0, 1, 3, 2, 4, 5).reshape(n, 2 * h, 2 * w, cout)
    if bias is not None:
        y = y + bias.data
    parents = (x, k) if bias is None else (x, k, bias)

    def backward(g):
        g2 = g.reshape(n, h, 2, w, 2, cout).transpose(0, 1, 3, 2, 4, 5).reshape(n * h * w, 4 * cout)
        if k.requires_grad:
            k._accumulate((x2.T @ g2).reshape(cin, 2, 2, cout).transpose(1, 2, 0, 3))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 1, 2)))
        if x.requires_grad:
            x._accumulate((g2 @ kmat.T).reshape(x.shape))

    return _result(np.ascontiguousarray(y), parents, "conv2d_transpose", backward)


# ---------------------------------------------------------------------------
# normalisation and pooling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


BN_EPSILON = 1e-5
BN_MOMENTUM = 0.99


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    momentum: float = BN_MOMENTUM,
    epsilon: float = BN_EPSILON,
) -> tuple[Tensor, BatchNormState]:
    """Per-channel batch normalisation over the N, H, W axes.

    Returns the output and the running statistics to use afterwards. In
    inference mode the state is returned unchanged.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,) or state.mean.shape != (c,):
        raise ValueError(f"batch_norm channel mismatch: input has {c} channels")
    dt = x.dtype.type
    axes = (0, 1, 2)
    if training:
        mean = x.data.mean(axis=axes)
        centered = x.data - mean
        var = (centered * centered).mean(axis=axes)
        m = dt(momentum)
        new_state = BatchNormState(
            (m * state.mean + (dt(1) - m) * mean.astype(state.mean.dtype)).astype(state.mean.dtype),
            (m * state.var + (dt(1) - m) * var.astype(state.var.dtype)).astype(state.var.dtype),
        )
    else:
        mean = state.mean.astype(x.dtype)
        var = state.var.astype(x.dtype)
        centered = x.data - mean
        new_state = state
    inv_std = (dt(1) / np.sqrt(var + dt(epsilon))).astype(x.dtype)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data
    count = x.data.size // c

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if not x.requires_grad:
            return
        dxhat = g * gamma.data
        if training:
            s1 = dxhat.sum(axis=axes)
            s2 = (dxhat * xhat).sum(axis=axes)
            dx = (inv_std / dt(count)) * (dt(count) * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * inv_std
        x._accumulate(dx)

    return _result(out.astype(x.dtype), (x, gamma, beta), "batch_norm", backward), new_state


def max_pool2(x: Tensor) -> Tensor:
    """2x2, stride-2 max pooling; ties go to the first element in row-major order."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool2 needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        routed = np.zeros(win.shape, dtype=x.dtype)
        np.put_along_axis(routed, idx[..., None], g[..., None], axis=-1)
        dx = routed.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(x.shape)
        x._accumulate(dx)

    return _result(out, (x,), "max_pool2", backward)


# ---------------------------------------------------------------------------
# initialisers
# ---------------------------------------------------------------------------


def he_init(shape: Sequence[int], seed: SeedLike, dtype=np.float32, mode: str = "he") -> Tensor:
    """Random kernel of the given shape (kH x kW x Cin x Cout).

    ``mode="he"`` draws N(0, sqrt(2 / fan_in)) with fan_in = kH*kW*Cin;
    ``mode="xavier"`` draws N(0, sqrt(2 / (fan_in + fan_out))).
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s < 1 for s in shape):
        raise ValueError(f"he_init needs a non-empty positive shape, got {shape}")
    receptive = int(np.prod(shape[:-2])) if len(shape) > 2 else 1
    fan_in = receptive * shape[-2] if len(shape) >= 2 else shape[0]
    fan_out = receptive * shape[-1]
    if mode == "he":
        std = np.sqrt(2.0 / fan_in)
    elif mode == "xavier":
        std = np.sqrt(2.0 / (fan_in + fan_out))
    else:
        raise ValueError(f"unknown init mode {mode!r}")
    values = _generator(seed).normal(0.0, std, size=shape)
    return Tensor(values.astype(dtype), requires_grad=True)


def zeros_init(shape: Sequence[int], dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=dtype), requires_grad=True)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_relative_error: float
    checked: int
    skipped: int
    worst: tuple[int, int] | None = None  # (input index, flat element index)


def oracle_dtype_for(dtype) -> np.dtype:
    """A float type strictly wider than ``dtype`` for the numeric reference."""
    return np.dtype(np.float64) if np.dtype(dtype).itemsize <= 4 else np.dtype(np.longdouble)


def finite_diff_report(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    epsilon: float | None = None,
    oracle_dtype=None,
    kink_tolerance: float = 1e-2,
    max_elements: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``fn(*tensors)`` with central differences.

    The analytic pass runs in the inputs' own dtype. The numeric pass promotes
    the inputs to a wider ``oracle_dtype`` (float64 for float32 graphs,
    extended precision for float64 graphs), so the reference is not limited by
    the rounding noise of the precision under test.

    The default step is 1e-5 for float32 inputs and 1e-6 for float64 inputs:
    with a wider oracle, cancellation is not the limiting error, while a larger
    step reaches across nearby relu kinks in deep compositions.

    Elements where the left and right one-sided differences disagree by more
    than ``kink_tolerance`` (relative) straddle a non-differentiable point, for
    instance a relu at zero or a pooling tie, and are skipped.
    """
    arrays = [np.asarray(a) for a in inputs]
    if oracle_dtype is None:
        oracle_dtype = oracle_dtype_for(arrays[0].dtype)
    if epsilon is None:
        epsilon = 1e-5 if arrays[0].dtype.itemsize <= 4 else 1e-6
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    if out.data.size != 1:
        raise ValueError(f"finite_diff_check needs a scalar-valued fn, got shape {out.shape}")
    out.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    probe = [a.astype(oracle_dtype) for a in arrays]
    eps = np.dtype(oracle_dtype).type(epsilon)

    def value():
        return fn(*[Tensor(p) for p in probe]).data.reshape(()).astype(oracle_dtype)[()]

    rng = np.random.default_rng(seed)
    f0 = value()
    worst_err, worst_at, checked, skipped = 0.0, None, 0, 0
    for ti, p in enumerate(probe):
        flat = p.reshape(-1)
        positions = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            positions = np.sort(rng.choice(flat.size, max_elements, replace=False))
        for j in positions:
            orig = flat[j]
            flat[j] = orig + eps
            fp = value()
            flat[j] = orig - eps
            fm = value()
            flat[j] = orig
            right, left = float((fp - f0) / eps), float((f0 - fm) / eps)
            scale = max(abs(right), abs(left), 1e-8)
            if abs(right - left) > kink_tolerance * scale + 1e-7:
                skipped += 1
                continue
            numeric = float((fp - fm) / (2 * eps))
            a = float(analytic[ti].reshape(-1)[j])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            checked += 1
            if err > worst_err or worst_at is None:
                worst_err, worst_at = max(err, worst_err), (ti, int(j))
    return GradCheckReport(worst_err, checked, skipped, worst_at)


def finite_diff_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], epsilon: float | None = None, **kw) -> float:
    """Max relative error between analytic and central-difference gradients."""
    return finite_diff_report(fn, inputs, epsilon, **kw).max_relative_error
