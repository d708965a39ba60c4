"""Structured array operations: convolution and cubic resampling.

Both operations are built from matrix products so the backward passes are
exact transposes of the forward maps, not re-derived approximations.
Convolution goes through im2col + GEMM; resampling precomputes sparse-ish
interpolation matrices once per (in, out) length pair and applies them to
the two trailing axes.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, _accumulate, _tracking, as_tensor

__all__ = ["conv2d", "bicubic_resize", "bicubic_matrix"]


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """All kh x kw patches of a padded NCHW array, stride applied.

    Returns a view of shape (B, C, OH, OW, kh, kw).
    """
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    if stride > 1:
        win = win[:, :, ::stride, ::stride]
    return win


def _conv_forward(x: np.ndarray, w: np.ndarray, b, stride: int, padding: int, groups: int) -> np.ndarray:
    batch, cin, _, _ = x.shape
    cout, cin_g, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = _windows(xp, kh, kw, stride)
    oh, ow = win.shape[2], win.shape[3]
    if groups == 1:
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(batch * oh * ow, cin * kh * kw)
        y = cols @ w.reshape(cout, -1).T
        y = y.reshape(batch, oh, ow, cout).transpose(0, 3, 1, 2)
    else:
        cout_g = cout // groups
        cols = (
            win.reshape(batch, groups, cin_g, oh, ow, kh, kw)
            .transpose(1, 0, 3, 4, 2, 5, 6)
            .reshape(groups, batch * oh * ow, cin_g * kh * kw)
        )
        wg = w.reshape(groups, cout_g, cin_g * kh * kw).transpose(0, 2, 1)
        y = np.matmul(cols, wg)
        y = y.reshape(groups, batch, oh, ow, cout_g).transpose(1, 0, 4, 2, 3)
        y = y.reshape(batch, cout, oh, ow)
    y = np.ascontiguousarray(y)
    if b is not None:
        y += b.reshape(1, cout, 1, 1)
    return y


def _dilate(y: np.ndarray, stride: int) -> np.ndarray:
    """Insert stride-1 zeros between spatial samples."""
    if stride == 1:
        return y
    batch, ch, h, w = y.shape
    out = np.zeros((batch, ch, (h - 1) * stride + 1, (w - 1) * stride + 1), dtype=y.dtype)
    out[:, :, ::stride, ::stride] = y
    return out


def _conv_input_grad(gy: np.ndarray, w: np.ndarray, stride: int, padding: int, groups: int, in_hw) -> np.ndarray:
    cout, cin_g, kh, kw = w.shape
    h, w_ = in_hw
    gyd = _dilate(gy, stride)
    # A stride-1 convolution of the dilated output gradient with the spatially
    # flipped, channel-swapped kernel is the adjoint of the forward map.  The
    # trailing pad is sized from the input rather than mirrored from the
    # leading one: a stride that does not tile the input leaves a ragged edge
    # which the last window may still have read, and which the symmetric pad
    # would silently drop.  Rows the forward never read come out zero because
    # only pad zeros reach them.
    lead = kh - 1 - padding
    trail_h = h + padding - (gy.shape[2] - 1) * stride - 1
    trail_w = w_ + padding - (gy.shape[3] - 1) * stride - 1
    gyd = np.pad(gyd, ((0, 0), (0, 0), (lead, trail_h), (lead, trail_w)))
    wt = w.reshape(groups, cout // groups, cin_g, kh, kw)
    wt = wt.transpose(0, 2, 1, 3, 4)[..., ::-1, ::-1]
    wt = np.ascontiguousarray(wt.reshape(groups * cin_g, cout // groups, kh, kw))
    return _conv_forward(gyd, wt, None, stride=1, padding=0, groups=groups)


def _conv_weight_grad(x: np.ndarray, gy: np.ndarray, w_shape, stride: int, padding: int, groups: int) -> np.ndarray:
    cout, cin_g, kh, kw = w_shape
    batch, cin, _, _ = x.shape
    _, _, oh, ow = gy.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = _windows(xp, kh, kw, stride)[:, :, :oh, :ow]
    if groups == 1:
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(batch * oh * ow, cin * kh * kw)
        gmat = gy.transpose(0, 2, 3, 1).reshape(batch * oh * ow, cout)
        return (gmat.T @ cols).reshape(cout, cin, kh, kw)
    cout_g = cout // groups
    cols = (
        win.reshape(batch, groups, cin_g, oh, ow, kh, kw)
        .transpose(1, 0, 3, 4, 2, 5, 6)
        .reshape(groups, batch * oh * ow, cin_g * kh * kw)
    )
    gmat = (
        gy.reshape(batch, groups, cout_g, oh, ow)
        .transpose(1, 2, 0, 3, 4)
        .reshape(groups, cout_g, batch * oh * ow)
    )
    gw = np.matmul(gmat, cols)
    return gw.reshape(cout, cin_g, kh, kw)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation on NCHW tensors.

    ``weight`` has shape (cout, cin // groups, kh, kw).  Square kernels and
    symmetric padding only; shape mismatches raise with the offending
    dimension named rather than silently broadcasting.
    """
    x = as_tensor(x)
    weight = as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be NCHW, got ndim={x.ndim}")
    if weight.ndim != 4:
        raise ValueError(f"conv2d weight must be 4-D, got ndim={weight.ndim}")
    batch, cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if kh != kw:
        raise ValueError(f"conv2d kernel must be square, got {kh}x{kw}")
    if cin % groups or cout % groups:
        raise ValueError(f"channels ({cin} in, {cout} out) must divide groups={groups}")
    if cin_g != cin // groups:
        raise ValueError(f"weight expects {cin_g} input channels per group, input has {cin // groups}")
    if padding > kh - 1:
        raise ValueError(f"padding {padding} exceeds kernel-1 ({kh - 1})")
    if (h + 2 * padding) % stride or (w + 2 * padding) % stride:
        raise ValueError(
            f"spatial size ({h}x{w}) with padding {padding} is not divisible by stride {stride}"
        )
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(f"spatial size ({h}x{w}) too small for a {kh}x{kw} kernel with padding {padding}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} does not match cout={cout}")

    out_data = _conv_forward(x.data, weight.data, None if bias is None else bias.data, stride, padding, groups)
    parents = (x, weight) if bias is None else (x, weight, bias)
    if not _tracking(*parents):
        return Tensor(out_data)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, _conv_input_grad(g, weight.data, stride, padding, groups, (h, w)))
        if weight.requires_grad:
            _accumulate(weight, _conv_weight_grad(x.data, g, weight.shape, stride, padding, groups))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))

    return Tensor._from_op(out_data, parents, backward)


# -- cubic resampling ----------------------------------------------------------


def _cubic_kernel(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel."""
    t = np.abs(t)
    out = np.zeros_like(t)
    near = t <= 1.0
    far = (t > 1.0) & (t < 2.0)
    out[near] = ((a + 2.0) * t[near] - (a + 3.0)) * t[near] * t[near] + 1.0
    out[far] = (((t[far] - 5.0) * t[far] + 8.0) * t[far] - 4.0) * a
    return out


def bicubic_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Dense 1-D cubic interpolation matrix M with y = M @ x.

    Sample positions follow the half-pixel convention: output pixel i reads
    from source coordinate (i + 0.5) * n_in / n_out - 0.5.  Edge taps clamp
    to the border sample, so rows always sum to one and constants are
    preserved exactly.
    """
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    base = np.floor(src).astype(np.int64)
    frac = src - base
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    for tap in range(-1, 3):
        weight = _cubic_kernel(frac - tap)
        idx = np.clip(base + tap, 0, n_in - 1)
        np.add.at(mat, (np.arange(n_out), idx), weight)
    return mat.astype(dtype)


_MATRIX_CACHE: dict = {}


def _cached_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    key = (n_in, n_out, np.dtype(dtype).str)
    mat = _MATRIX_CACHE.get(key)
    if mat is None:
        mat = bicubic_matrix(n_in, n_out, dtype)
        _MATRIX_CACHE[key] = mat
    return mat


def bicubic_resize(x, out_h: int, out_w: int) -> Tensor:
    """Separable cubic resampling of the two trailing axes of an NCHW tensor."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"bicubic_resize input must be NCHW, got ndim={x.ndim}")
    h, w = x.shape[-2], x.shape[-1]
    if (h, w) == (out_h, out_w):
        return x
    mh = _cached_matrix(h, out_h, x.dtype)
    mw = _cached_matrix(w, out_w, x.dtype)
    out_data = np.matmul(np.matmul(mh, x.data), mw.T)
    if not _tracking(x):
        return Tensor(out_data)

    def backward(g):
        _accumulate(x, np.matmul(np.matmul(mh.T, g), mw))

    return Tensor._from_op(out_data, (x,), backward)
