"""Differentiable neural-network operations on (batch, channels, H, W) tensors.

Conventions, pinned here so oracles and tests agree:
  - conv2d is a correlation (no kernel flip), the mainstream deep-learning
    convention;
  - "same" padding keeps `ceil(n / stride)` outputs; zero padding is split
    symmetrically and any odd leftover row/column goes to the bottom/right;
  - max-pool gradients route to the first (row-major) maximum on ties;
  - average pooling divides by the number of real (unpadded) elements in
    each window, so a constant input stays constant under "same" padding;
  - dropout is inverted: train mode scales survivors by 1/(1-p) and eval
    mode is the identity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .tensor import Tensor, make_op

ACTIVATIONS = ("relu", "elu")
ELU_ALPHA = 1.0

# Test hook: set to an op name ("conv2d") to corrupt that op's weight
# gradient, so the gradient-check command can prove it localizes faults.
_gradient_fault: Optional[str] = None


def set_gradient_fault(op_name: Optional[str]) -> None:
    global _gradient_fault
    _gradient_fault = op_name


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


@dataclass
class ConvParams:
    """Weights of one convolution: weight (out_ch, in_ch, kh, kw), optional bias (out_ch,)."""

    weight: Tensor
    bias: Optional[Tensor] = None
    stride: int | tuple = 1
    padding: str = "same"

    def __post_init__(self):
        if self.weight.data.ndim != 4:
            raise ShapeError(f"conv weight must be 4-d, got shape {self.weight.shape}")
        kh, kw = self.weight.shape[2], self.weight.shape[3]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ConfigError(f"conv kernel extents must be odd, got {kh}x{kw}")
        if self.padding not in ("same", "valid"):
            raise ConfigError(f"padding must be 'same' or 'valid', got {self.padding!r}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match {self.weight.shape[0]} output channels"
            )

    @property
    def stride_pair(self) -> tuple:
        if isinstance(self.stride, int):
            return (self.stride, self.stride)
        return tuple(self.stride)


class BatchNormParams:
    """Per-channel batch-norm state: learnable gamma/beta plus running statistics.

    `mode` selects batch statistics ("train", which also updates the running
    estimates) or the stored running statistics ("eval"). Using eval mode
    before any train step (or explicit initialization) is an error, because
    the running statistics would be meaningless.
    """

    def __init__(
        self,
        channels: int,
        epsilon: float = 1e-5,
        momentum: float = 0.1,
        mode: str = "train",
        dtype=np.float32,
        stats_initialized: bool = False,
    ):
        if epsilon <= 0:
            raise ConfigError("batch-norm epsilon must be positive")
        if not 0.0 < momentum < 1.0:
            raise ConfigError("batch-norm momentum must lie in (0, 1)")
        self.channels = int(channels)
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.epsilon = float(epsilon)
        self.momentum = float(momentum)
        self.mode = mode
        self.initialized = bool(stats_initialized)


# ---------------------------------------------------------------------------
# padding / window helpers
# ---------------------------------------------------------------------------


def _pad_amount(n: int, k: int, stride: int, padding: str) -> tuple:
    if padding == "valid":
        return 0, 0
    out = -(-n // stride)
    total = max((out - 1) * stride + k - n, 0)
    before = total // 2
    return before, total - before


def _out_extent(n: int, k: int, stride: int, pad_before: int, pad_after: int) -> int:
    return (n + pad_before + pad_after - k) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, oh: int, ow: int) -> np.ndarray:
    """Read-only (N, C, kh, kw, oh, ow) view of all pooling/conv windows."""
    n, c = xp.shape[0], xp.shape[1]
    sn, sc, srow, scol = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, srow, scol, srow * sh, scol * sw),
        writeable=False,
    )


def _require_4d(name: str, x: Tensor) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{name}: expected a (batch, channels, H, W) tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, params: ConvParams) -> Tensor:
    """2-d correlation over a (N, C, H, W) tensor.

    Differentiable in the input, the weight, and the bias. Output extents
    follow the standard stride/padding arithmetic of the module docstring.
    """
    _require_4d("conv2d", x)
    w, b = params.weight, params.bias
    n, c, h, wid = x.data.shape
    oc, ic, kh, kw = w.data.shape
    if c != ic:
        raise ShapeError(
            f"conv2d: input has {c} channels on axis 1 but the weight expects {ic}"
        )
    sh, sw = params.stride_pair
    pt, pb = _pad_amount(h, kh, sh, params.padding)
    pl, pr = _pad_amount(wid, kw, sw, params.padding)
    oh = _out_extent(h, kh, sh, pt, pb)
    ow = _out_extent(wid, kw, sw, pl, pr)
    if oh <= 0 or ow <= 0:
        raise ShapeError(
            f"conv2d: {h}x{wid} input is smaller than the {kh}x{kw} kernel after padding"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    cols = _windows(xp, kh, kw, sh, sw, oh, ow).reshape(n, c * kh * kw, oh * ow)
    w2 = w.data.reshape(oc, -1)
    out = np.matmul(w2, cols)
    if b is not None:
        out = out + b.data[:, None]
    out = out.reshape(n, oc, oh, ow)

    x_rg, w_rg = x.requires_grad, w.requires_grad
    b_rg = b is not None and b.requires_grad

    def backward(g: np.ndarray):
        g2 = g.reshape(n, oc, oh * ow)
        dw = db = dx = None
        if w_rg:
            dw = np.einsum("nol,nkl->ok", g2, cols).reshape(w.data.shape)
            if _gradient_fault == "conv2d":
                dw = dw * 1.01
        if b_rg:
            db = g.sum(axis=(0, 2, 3))
        if x_rg:
            dcols = np.matmul(w2.T, g2).reshape(n, c, kh, kw, oh, ow)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += dcols[:, :, i, j]
            dx = dxp[:, :, pt : pt + h, pl : pl + wid]
        return (dx, dw, db) if b is not None else (dx, dw)

    parents = (x, w, b) if b is not None else (x, w)
    return make_op(out, parents, backward)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------


def pool2d(x: Tensor, kind: str, window: int = 3, stride: int = 1, padding: str = "valid") -> Tensor:
    """Max or average pooling with a square window (overlapping when stride < window)."""
    _require_4d("pool2d", x)
    if kind not in ("max", "avg"):
        raise ConfigError(f"pool kind must be 'max' or 'avg', got {kind!r}")
    if padding not in ("same", "valid"):
        raise ConfigError(f"padding must be 'same' or 'valid', got {padding!r}")
    n, c, h, wid = x.data.shape
    pt, pb = _pad_amount(h, window, stride, padding)
    pl, pr = _pad_amount(wid, window, stride, padding)
    hp, wp = h + pt + pb, wid + pl + pr
    if window > hp or window > wp:
        raise ShapeError(
            f"pool2d: window {window} exceeds padded input extent {hp}x{wp}"
        )
    oh = _out_extent(h, window, stride, pt, pb)
    ow = _out_extent(wid, window, stride, pl, pr)

    if kind == "max":
        fill = -np.inf
        xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)), constant_values=fill)
        flat = _windows(xp, window, window, stride, stride, oh, ow).reshape(
            n, c, window * window, oh, ow
        )
        idx = flat.argmax(axis=2)
        out = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]

        def backward_max(g: np.ndarray):
            ni, ci, ohi, owi = np.indices((n, c, oh, ow))
            hi = ohi * stride + idx // window
            wi = owi * stride + idx % window
            dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
            np.add.at(dxp, (ni, ci, hi, wi), g)
            return (dxp[:, :, pt : pt + h, pl : pl + wid],)

        return make_op(out, (x,), backward_max)

    # avg: divide by the count of real elements under each window position
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    ones = np.pad(np.ones((1, 1, h, wid), dtype=x.dtype), ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    counts = _windows(ones, window, window, stride, stride, oh, ow).sum(axis=(2, 3))[0, 0]
    sums = _windows(xp, window, window, stride, stride, oh, ow).sum(axis=(2, 3))
    out = sums / counts

    def backward_avg(g: np.ndarray):
        gn = g / counts
        dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        for i in range(window):
            for j in range(window):
                dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gn
        return (dxp[:, :, pt : pt + h, pl : pl + wid],)

    return make_op(out, (x,), backward_avg)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op(np.where(mask, x.data, 0), (x,), lambda g: (g * mask,))


def elu(x: Tensor) -> Tensor:
    pos = x.data > 0
    neg_branch = ELU_ALPHA * np.expm1(np.minimum(x.data, 0.0))
    out = np.where(pos, x.data, neg_branch)
    # d/dx for x <= 0 is alpha * e^x = out + alpha
    return make_op(out, (x,), lambda g: (g * np.where(pos, 1.0, out + ELU_ALPHA),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "elu":
        return elu(x)
    raise ConfigError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


def batch_norm(x: Tensor, params: BatchNormParams) -> Tensor:
    """Per-channel normalization over (batch, H, W), then scale and shift.

    Train mode uses batch statistics and updates the running estimates
    (biased variance normalizes; the unbiased variance feeds the running
    average). Eval mode uses the running statistics.
    """
    _require_4d("batch_norm", x)
    n, c, h, w = x.data.shape
    if c != params.channels:
        raise ShapeError(
            f"batch_norm: input has {c} channels on axis 1 but params hold {params.channels}"
        )
    gamma, beta = params.gamma, params.beta
    eps = params.epsilon

    if params.mode == "train":
        m = n * h * w
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu[:, None, None]) * inv_std[:, None, None]
        out = gamma.data[:, None, None] * xhat + beta.data[:, None, None]

        unbiased = var * (m / (m - 1)) if m > 1 else var
        mom = params.momentum
        params.running_mean = ((1 - mom) * params.running_mean + mom * mu).astype(
            params.running_mean.dtype
        )
        params.running_var = ((1 - mom) * params.running_var + mom * unbiased).astype(
            params.running_var.dtype
        )
        params.initialized = True

        def backward_train(g: np.ndarray):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            dxhat = g * gamma.data[:, None, None]
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = (inv_std[:, None, None] / m) * (m * dxhat - s1 - xhat * s2)
            return dx, dgamma, dbeta

        return make_op(out, (x, gamma, beta), backward_train)

    if params.mode == "eval":
        if not params.initialized:
            raise NumericError(
                "batch_norm eval mode requested before any running statistics exist; "
                "run a train step first or construct the params with stats_initialized=True"
            )
        inv_std = 1.0 / np.sqrt(params.running_var + eps)
        xhat = (x.data - params.running_mean[:, None, None]) * inv_std[:, None, None]
        out = gamma.data[:, None, None] * xhat + beta.data[:, None, None]

        def backward_eval(g: np.ndarray):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            dx = g * (gamma.data * inv_std)[:, None, None]
            return dx, dgamma, dbeta

        return make_op(out, (x, gamma, beta), backward_eval)

    if params.mode == "identity":
        # affine pass-through (no normalization); with default gamma=1,
        # beta=0 the op is exactly the identity — used to isolate the
        # residual path in unit tests
        out = gamma.data[:, None, None] * x.data + beta.data[:, None, None]

        def backward_identity(g: np.ndarray):
            dgamma = (g * x.data).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            return g * gamma.data[:, None, None], dgamma, dbeta

        return make_op(out, (x, gamma, beta), backward_identity)

    raise ConfigError(
        f"batch_norm mode must be 'train', 'eval', or 'identity', got {params.mode!r}"
    )


# ---------------------------------------------------------------------------
# dropout / concat / residual / dense / softmax
# ---------------------------------------------------------------------------


def dropout(x: Tensor, p: float, mode: str, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: eval mode and p=0 are the identity."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ConfigError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or p == 0.0:
        return make_op(x.data, (x,), lambda g: (g,))
    if rng is None:
        raise ConfigError("dropout in train mode needs a seeded generator")
    keep = (rng.random(x.data.shape) >= p).astype(x.dtype)
    scale = 1.0 / (1.0 - p)
    return make_op(x.data * keep * scale, (x,), lambda g: (g * keep * scale,))


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis; batch and spatial extents must agree."""
    if not inputs:
        raise ShapeError("concat_channels: need at least one input")
    first = inputs[0]
    _require_4d("concat_channels", first)
    for i, t in enumerate(inputs[1:], start=1):
        _require_4d("concat_channels", t)
        if t.shape[0] != first.shape[0] or t.shape[2:] != first.shape[2:]:
            raise ShapeError(
                f"concat_channels: input {i} has batch/spatial shape "
                f"{(t.shape[0],) + t.shape[2:]} but input 0 has {(first.shape[0],) + first.shape[2:]}"
            )
    widths = [t.shape[1] for t in inputs]
    out = np.concatenate([t.data for t in inputs], axis=1)
    edges = np.cumsum([0] + widths)

    def backward(g: np.ndarray):
        return tuple(g[:, edges[i] : edges[i + 1]] for i in range(len(inputs)))

    return make_op(out, tuple(inputs), backward)


def residual_add(x: Tensor, f: Tensor) -> Tensor:
    """Elementwise x + f; a shape mismatch means the residual block is mis-built."""
    if x.shape != f.shape:
        raise ShapeError(
            f"residual_add: shapes {x.shape} and {f.shape} differ; "
            "the residual branch must preserve its input dimensions"
        )
    return make_op(x.data + f.data, (x, f), lambda g: (g, g))


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map rows -> rows: out = x @ weight + bias."""
    if x.data.ndim != 2:
        raise ShapeError(f"dense: expected a (batch, features) tensor, got shape {x.shape}")
    if weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"dense: input features {x.shape[1]} do not match weight rows {weight.shape[0]}"
        )
    if bias.shape != (weight.shape[1],):
        raise ShapeError(
            f"dense: bias shape {bias.shape} does not match {weight.shape[1]} outputs"
        )
    out = x.data @ weight.data + bias.data

    def backward(g: np.ndarray):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return make_op(out, (x, weight, bias), backward)


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, computed with max subtraction."""
    if logits.shape[-1] < 2:
        raise ShapeError("softmax: the class axis must have at least 2 entries")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return ((g - inner) * out,)

    return make_op(out, (logits,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: (N, C, H, W) -> (N, C)."""
    _require_4d("global_avg_pool", x)
    n, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g: np.ndarray):
        return (np.broadcast_to(g[:, :, None, None], (n, c, h, w)) / (h * w),)

    return make_op(out, (x,), backward)
