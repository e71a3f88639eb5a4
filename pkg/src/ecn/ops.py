"""Differentiable neural operators used by the cascade network.

All convolutions have stride 1 and no bias.  3x3 kernels use padding 1 and
1x1 kernels padding 0, so spatial size only ever changes through
:func:`bilinear_resize`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, _check_same_dtype, _make, get_dtype

__all__ = [
    "ConvKernel",
    "BatchNormState",
    "ResizeGrid",
    "axis_grid",
    "conv2d",
    "batchnorm",
    "bilinear_resize",
    "global_avg_pool",
    "linear",
    "softmax_cross_entropy",
    "dropout",
]


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


@dataclass
class ConvKernel:
    """Biasless convolution weights of shape ``(out, in // groups, kh, kw)``."""

    weight: Tensor
    groups: int = 1
    padding: Optional[int] = None

    def __post_init__(self):
        if self.weight.data.ndim != 4:
            raise ValueError(f"kernel must be 4-D, got shape {self.weight.shape}")
        kh, kw = self.weight.shape[2:]
        if kh != kw or kh % 2 == 0:
            raise ValueError(f"only odd square kernels are supported, got {kh}x{kw}")
        if self.padding is None:
            self.padding = kh // 2

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def size(self) -> int:
        return self.weight.shape[2]

    @classmethod
    def create(cls, in_ch: int, out_ch: int, size: int, rng: np.random.Generator,
               groups: int = 1, name: Optional[str] = None, dtype=None) -> "ConvKernel":
        """He-normal initialised kernel."""
        if in_ch % groups or out_ch % groups:
            raise ValueError(f"groups={groups} must divide in={in_ch} and out={out_ch}")
        fan_in = (in_ch // groups) * size * size
        w = rng.standard_normal((out_ch, in_ch // groups, size, size)) * np.sqrt(2.0 / fan_in)
        w = w.astype(dtype or get_dtype())
        return cls(Tensor(w, requires_grad=True, name=name), groups=groups)


def _conv_dense(x: np.ndarray, w: np.ndarray, pad: int):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    oh, ow = xp.shape[2] - k + 1, xp.shape[3] - k + 1
    if k == 1:
        cols = xp.transpose(0, 2, 3, 1).reshape(n * oh * ow, c)
    else:
        win = sliding_window_view(xp, (k, k), axis=(2, 3))  # n, c, oh, ow, k, k
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * k * k)
    w2 = w.reshape(o, -1)
    out = (cols @ w2.T).reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols, xp.shape


def _conv_dense_backward(g: np.ndarray, cols: np.ndarray, w: np.ndarray, xp_shape, pad: int,
                         x_shape):
    n, o, oh, ow = g.shape
    c, k = w.shape[1], w.shape[2]
    g2 = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
    dw = (g2.T @ cols).reshape(w.shape)
    dcols = g2 @ w.reshape(o, -1)
    if k == 1:
        dxp = dcols.reshape(n, oh, ow, c).transpose(0, 3, 1, 2)
    else:
        dcols = dcols.reshape(n, oh, ow, c, k, k)
        dxp = np.zeros(xp_shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + oh, j:j + ow] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        dxp = dxp[:, :, pad:pad + x_shape[2], pad:pad + x_shape[3]]
    return np.ascontiguousarray(dxp), dw


def _conv_depthwise(x: np.ndarray, w: np.ndarray, pad: int):
    n, c, h, wd = x.shape
    k = w.shape[2]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    oh, ow = xp.shape[2] - k + 1, xp.shape[3] - k + 1
    out = np.zeros((n, c, oh, ow), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out += w[:, 0, i, j][None, :, None, None] * xp[:, :, i:i + oh, j:j + ow]
    return out, xp


def _conv_depthwise_backward(g: np.ndarray, xp: np.ndarray, w: np.ndarray, pad: int, x_shape):
    n, c, oh, ow = g.shape
    k = w.shape[2]
    dw = np.empty_like(w)
    dxp = np.zeros_like(xp)
    for i in range(k):
        for j in range(k):
            dw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xp[:, :, i:i + oh, j:j + ow])
            dxp[:, :, i:i + oh, j:j + ow] += w[:, 0, i, j][None, :, None, None] * g
    if pad:
        dxp = dxp[:, :, pad:pad + x_shape[2], pad:pad + x_shape[3]]
    return np.ascontiguousarray(dxp), dw


def conv2d(x: Tensor, kernel: ConvKernel) -> Tensor:
    """Stride-1 biasless convolution with ``kernel.groups`` channel groups."""
    w = kernel.weight
    _check_same_dtype(x, w)
    if x.data.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input, got shape {x.shape}")
    c = x.shape[1]
    groups = kernel.groups
    if groups < 1 or c % groups or kernel.out_channels % groups:
        raise ValueError(f"groups={groups} does not divide channels ({c} in, {kernel.out_channels} out)")
    if c != kernel.in_channels:
        raise ValueError(f"input has {c} channels, kernel expects {kernel.in_channels}")
    pad = kernel.padding
    wd = w.data
    xs = x.shape

    if groups == 1:
        out, cols, xp_shape = _conv_dense(x.data, wd, pad)

        def back(g):
            dx, dw = _conv_dense_backward(g, cols, wd, xp_shape, pad, xs)
            return dx, dw

        return _make(out, (x, w), back)

    if groups == c and kernel.out_channels == c:
        out, xp = _conv_depthwise(x.data, wd, pad)

        def back(g):
            return _conv_depthwise_backward(g, xp, wd, pad, xs)

        return _make(out, (x, w), back)

    # general grouped case: dense convolution per group
    cg, og = c // groups, kernel.out_channels // groups
    saved = []
    outs = []
    for gi in range(groups):
        o, cols, xp_shape = _conv_dense(x.data[:, gi * cg:(gi + 1) * cg], wd[gi * og:(gi + 1) * og], pad)
        outs.append(o)
        saved.append((cols, xp_shape))
    out = np.concatenate(outs, axis=1)

    def back(g):
        dx = np.empty(xs, dtype=g.dtype)
        dw = np.empty_like(wd)
        for gi in range(groups):
            cols, xp_shape = saved[gi]
            dxg, dwg = _conv_dense_backward(
                np.ascontiguousarray(g[:, gi * og:(gi + 1) * og]), cols, wd[gi * og:(gi + 1) * og],
                xp_shape, pad, (xs[0], cg, xs[2], xs[3]))
            dx[:, gi * cg:(gi + 1) * cg] = dxg
            dw[gi * og:(gi + 1) * og] = dwg
        return dx, dw

    return _make(out, (x, w), back)


# ---------------------------------------------------------------------------
# batch normalisation
# ---------------------------------------------------------------------------


@dataclass
class BatchNormState:
    """Per-channel affine parameters plus running statistics.

    Only ``gamma`` and ``beta`` are trainable; the running statistics are
    buffers and never count as parameters.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def create(cls, channels: int, name: Optional[str] = None, dtype=None,
               eps: float = 1e-5, momentum: float = 0.1) -> "BatchNormState":
        dtype = dtype or get_dtype()
        prefix = f"{name}." if name else ""
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True, name=prefix + "gamma"),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True, name=prefix + "beta"),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            eps=eps,
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batchnorm(x: Tensor, state: BatchNormState, train: bool) -> Tensor:
    """Normalise each channel, then apply ``gamma * x_hat + beta``.

    In training mode the batch statistics over (batch, height, width) are used
    and the running statistics are updated in place (the running variance uses
    the unbiased estimate).  In eval mode the running statistics are used.
    """
    gamma, beta = state.gamma, state.beta
    _check_same_dtype(x, gamma, beta)
    n, c, h, w = x.shape
    if c != state.channels:
        raise ValueError(f"input has {c} channels, batch norm has {state.channels}")
    m = n * h * w
    dt = x.dtype.type
    eps = dt(state.eps)
    g4 = gamma.data.reshape(1, c, 1, 1)
    b4 = beta.data.reshape(1, c, 1, 1)

    if train:
        if m < 2:
            raise ValueError("batch norm in training mode needs more than one value per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mean.reshape(1, c, 1, 1)
        var = (centered * centered).mean(axis=(0, 2, 3))
        inv_std = dt(1) / np.sqrt(var + eps)
        x_hat = centered * inv_std.reshape(1, c, 1, 1)
        mom = dt(state.momentum)
        state.running_mean[...] = (1 - mom) * state.running_mean + mom * mean
        state.running_var[...] = (1 - mom) * state.running_var + mom * var * dt(m / (m - 1))
        out = x_hat * g4 + b4

        def back(gout):
            dgamma = np.einsum("nchw,nchw->c", gout, x_hat)
            dbeta = gout.sum(axis=(0, 2, 3))
            dxhat = gout * g4
            mean_dxhat = dxhat.mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            mean_dxhat_xhat = np.einsum("nchw,nchw->c", dxhat, x_hat).reshape(1, c, 1, 1) / dt(m)
            dx = (dxhat - mean_dxhat - x_hat * mean_dxhat_xhat) * inv_std.reshape(1, c, 1, 1)
            return dx, dgamma, dbeta

        return _make(out, (x, gamma, beta), back)

    inv_std = (dt(1) / np.sqrt(state.running_var.astype(x.dtype) + eps)).reshape(1, c, 1, 1)
    x_hat = (x.data - state.running_mean.astype(x.dtype).reshape(1, c, 1, 1)) * inv_std
    out = x_hat * g4 + b4

    def back_eval(gout):
        dgamma = np.einsum("nchw,nchw->c", gout, x_hat)
        dbeta = gout.sum(axis=(0, 2, 3))
        return gout * g4 * inv_std, dgamma, dbeta

    return _make(out, (x, gamma, beta), back_eval)


# ---------------------------------------------------------------------------
# fractional bilinear scaling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ResizeGrid:
    """Source sampling positions along one axis.

    Output index ``i`` reads ``(1 - frac[i]) * x[lo[i]] + frac[i] * x[hi[i]]``.
    The 2-D bilinear weights are products of the per-axis weights.
    """

    lo: np.ndarray
    hi: np.ndarray
    frac: np.ndarray
    coords: np.ndarray = field(repr=False)

    def matrix(self, n_in: int, dtype=np.float64) -> np.ndarray:
        """Dense ``(n_out, n_in)`` interpolation matrix."""
        m = np.zeros((len(self.lo), n_in), dtype=dtype)
        rows = np.arange(len(self.lo))
        np.add.at(m, (rows, self.lo), 1 - self.frac.astype(dtype))
        np.add.at(m, (rows, self.hi), self.frac.astype(dtype))
        return m


def axis_grid(n_in: int, n_out: int, align_corners: bool = False) -> ResizeGrid:
    """Uniform sampling grid for one axis.

    The default maps output centres onto input centres,
    ``src = (i + 0.5) * n_in / n_out - 0.5``, clamped to ``[0, n_in - 1]``.
    With ``align_corners`` the end samples coincide instead:
    ``src = i * (n_in - 1) / (n_out - 1)``.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError(f"extents must be positive, got {n_in} -> {n_out}")
    i = np.arange(n_out, dtype=np.float64)
    if align_corners:
        src = i * ((n_in - 1) / (n_out - 1)) if n_out > 1 else np.zeros(1)
    else:
        src = (i + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return ResizeGrid(lo=lo, hi=hi, frac=frac, coords=src)


def _lerp_axis(a: np.ndarray, grid: ResizeGrid, axis: int) -> np.ndarray:
    shape = [1] * a.ndim
    shape[axis] = -1
    t = grid.frac.astype(a.dtype).reshape(shape)
    lo = np.take(a, grid.lo, axis=axis)
    hi = np.take(a, grid.hi, axis=axis)
    # lo + t * (hi - lo) keeps constants and the identity grid exact
    return lo + t * (hi - lo)


def bilinear_resize(x: Tensor, out_hw: Tuple[int, int], align_corners: bool = False) -> Tensor:
    """Resize the spatial extent of ``x`` by bilinear interpolation."""
    out_h, out_w = int(out_hw[0]), int(out_hw[1])
    n, c, h, w = x.shape
    gy = axis_grid(h, out_h, align_corners)
    gx = axis_grid(w, out_w, align_corners)
    out = _lerp_axis(_lerp_axis(x.data, gy, 2), gx, 3)

    def back(g):
        my = gy.matrix(h, g.dtype)
        mx = gx.matrix(w, g.dtype)
        # adjoint of out = My @ x @ Mx^T
        dx = np.einsum("oh,ncop,pw->nchw", my, g, mx, optimize=True)
        return (np.ascontiguousarray(dx),)

    return _make(np.ascontiguousarray(out), (x,), back)


# ---------------------------------------------------------------------------
# head, loss, regularisation
# ---------------------------------------------------------------------------


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h * w == 0:
        raise ValueError("cannot pool a zero-sized spatial extent")
    out = x.data.mean(axis=(2, 3), keepdims=True)
    inv = x.dtype.type(1.0 / (h * w))
    return _make(out, (x,), lambda g: (np.broadcast_to(g * inv, x.shape).copy(),))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map from channels to ``weight.shape[0]`` outputs; x must be ``N x C x 1 x 1``."""
    _check_same_dtype(x, weight, bias)
    n, c, h, w = x.shape
    if (h, w) != (1, 1):
        raise ValueError(f"linear expects 1x1 spatial input, got {h}x{w}")
    if weight.data.ndim != 2 or weight.shape[1] != c or bias.shape != (weight.shape[0],):
        raise ValueError(f"weight {weight.shape} / bias {bias.shape} do not fit {c} input channels")
    xf = x.data.reshape(n, c)
    out = (xf @ weight.data.T + bias.data).reshape(n, -1, 1, 1)

    def back(g):
        g2 = g.reshape(n, -1)
        return (g2 @ weight.data).reshape(n, c, 1, 1), g2.T @ xf, g2.sum(axis=0)

    return _make(out, (x, weight, bias), back)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.intp)
    n = logits.shape[0]
    z = logits.data.reshape(n, -1)
    k = z.shape[1]
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    loss = -logp[np.arange(n), labels].mean()
    out = np.asarray(loss, dtype=logits.dtype).reshape(1, 1, 1, 1)
    shape = logits.shape

    def back(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1
        return ((p * (g.reshape(()) / n)).reshape(shape),)

    return _make(out, (logits,), back)


def dropout(x: Tensor, rate: float, train: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; the identity in eval mode or when ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return _make(x.data * mask, (x,), lambda g: (g * mask,))
