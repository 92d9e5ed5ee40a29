"""Dilated and deformable depthwise 1-D convolution.

The deformable variant shifts every kernel tap by a learned, real-valued,
per-frame offset and reads the input through linear interpolation with zero
extension outside the sequence. The interpolation's lower index is clamped
to ``anchor + P*f - 1`` so a tap can never reach past the kernel's maximum
span; offsets are unbounded below.

Layout: inputs are (..., G, L) with one kernel row per channel; offsets are
(..., L, P), shared across channels. Both ops preserve length via zero
padding of (P-1)*f split evenly around the sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor


@dataclass
class DepthwiseKernel:
    """Per-channel taps plus the dilation they are applied with."""

    weights: Tensor  # (G, P)
    dilation: int = 1

    def __post_init__(self):
        if self.weights.data.ndim != 2:
            raise ValueError("depthwise kernel weights must be (channels, taps)")
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")

    @property
    def kernel_size(self):
        return self.weights.data.shape[1]

    @property
    def channels(self):
        return self.weights.data.shape[0]


@dataclass
class OffsetField:
    """Per-frame, per-tap sampling offsets in frame units."""

    tau: Tensor  # (..., L, P)


def _pad_amounts(kernel_size, dilation):
    total = (kernel_size - 1) * dilation
    left = total // 2
    return left, total - left


def dconv(y, kernel):
    """Dilated depthwise convolution, "same" output length.

    out[g, l] = sum_p k[g, p] * ypad[l + f*p] with zero padding.
    """
    if not isinstance(kernel, DepthwiseKernel):
        raise TypeError("dconv expects a DepthwiseKernel")
    y = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=np.float64))
    k = kernel.weights
    f = kernel.dilation
    g_chan, p_taps = k.data.shape
    if y.data.shape[-2] != g_chan:
        raise ValueError(f"dconv: input has {y.data.shape[-2]} channels, kernel has {g_chan}")
    length = y.data.shape[-1]
    pad_l, pad_r = _pad_amounts(p_taps, f)
    pad_spec = [(0, 0)] * (y.data.ndim - 1) + [(pad_l, pad_r)]
    ypad = np.pad(y.data, pad_spec)
    out = np.zeros_like(y.data)
    for p in range(p_taps):
        out += k.data[:, p:p + 1] * ypad[..., p * f:p * f + length]

    def bw(g):
        gypad = np.zeros_like(ypad)
        gk = np.zeros_like(k.data)
        for p in range(p_taps):
            gypad[..., p * f:p * f + length] += g * k.data[:, p:p + 1]
            prod = g * ypad[..., p * f:p * f + length]
            gk[:, p] = prod.sum(axis=tuple(i for i in range(prod.ndim) if i != prod.ndim - 2))
        gy = gypad[..., pad_l:pad_l + length]
        return (np.ascontiguousarray(gy), gk)

    return Tensor(out, parents=(y, k), bw=bw)


def linear_interp(y, pos, channel=0):
    """Sample channel ``channel`` of y at real position ``pos``.

    Two-point linear interpolation with zero extension: positions outside
    [0, L-1] read as 0. Integer positions return the sample exactly.
    """
    data = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    if data.ndim == 1:
        row = data
    else:
        row = data[..., channel, :]
    if not np.isfinite(pos):
        raise ValueError("linear_interp: position must be finite")
    length = row.shape[-1]
    u0 = int(np.floor(pos))
    total = 0.0
    for u in (u0, u0 + 1):
        w = max(0.0, 1.0 - abs(u - pos))
        if 0 <= u < length and w > 0.0:
            total += w * float(row[..., u])
    return total


def _interp_pieces(ypad, u, batch_shape, g_chan, length):
    """Gather ypad at integer index array ``u`` with zero extension.

    Returns (values, mask, flat_index) where values is (..., G, L) and
    flat_index addresses the flattened (rows, lpad) view for the backward
    scatter.
    """
    lpad = ypad.shape[-1]
    mask = (u >= 0) & (u < lpad)
    uc = np.clip(u, 0, lpad - 1)
    full_shape = batch_shape + (g_chan, length)
    rows = ypad.size // lpad
    row_base = (np.arange(rows, dtype=np.int64) * lpad)[:, None]
    flat_idx = row_base + np.broadcast_to(uc[..., None, :], full_shape).reshape(rows, length)
    vals = ypad.reshape(-1)[flat_idx].reshape(full_shape)
    vals *= mask[..., None, :]
    return vals, mask, flat_idx


def _dweight(t):
    """d/dpos of max(0, 1-|pos-u|) at t = pos-u, left-limit at the kinks."""
    d = np.zeros_like(t)
    d[(t > -1.0) & (t <= 0.0)] = 1.0
    d[(t > 0.0) & (t <= 1.0)] = -1.0
    return d


def _ddconv_setup(y_data, k_data, tau_data, dilation):
    g_chan, p_taps = k_data.shape
    if y_data.shape[-2] != g_chan:
        raise ValueError(f"ddconv: input has {y_data.shape[-2]} channels, kernel has {g_chan}")
    length = y_data.shape[-1]
    if tau_data.shape[-2:] != (length, p_taps):
        raise ValueError(
            f"ddconv: offsets must be (..., {length}, {p_taps}), got {tau_data.shape}")
    if tau_data.shape[:-2] != y_data.shape[:-2]:
        raise ValueError("ddconv: offset batch axes must match the input's")
    pad_l, pad_r = _pad_amounts(p_taps, dilation)
    pad_spec = [(0, 0)] * (y_data.ndim - 1) + [(pad_l, pad_r)]
    ypad = np.pad(y_data, pad_spec)
    frames = np.arange(length, dtype=y_data.dtype)
    # lower interpolation index may never exceed anchor + P*f - 1
    bound = (frames + p_taps * dilation - 1).astype(np.int64)
    return g_chan, p_taps, length, pad_l, ypad, frames, bound


def _ddconv_forward(y_data, k_data, tau_data, dilation):
    g_chan, p_taps, length, pad_l, ypad, frames, bound = _ddconv_setup(
        y_data, k_data, tau_data, dilation)
    batch_shape = y_data.shape[:-2]
    out = np.zeros_like(y_data)
    cache = []
    for p in range(p_taps):
        pos = frames + p * dilation + tau_data[..., :, p]
        # ceil(pos)-1 equals floor(pos) off integers and keeps the backward
        # pass on the left-limit subgradient at integer positions
        u0 = np.minimum(np.ceil(pos).astype(np.int64) - 1, bound)
        u1 = u0 + 1
        w0 = np.maximum(0.0, 1.0 - np.abs(u0 - pos))
        w1 = np.maximum(0.0, 1.0 - np.abs(u1 - pos))
        y0, m0, f0 = _interp_pieces(ypad, u0, batch_shape, g_chan, length)
        y1, m1, f1 = _interp_pieces(ypad, u1, batch_shape, g_chan, length)
        # fold the extension masks into the weights; y0/y1 are already masked
        w0 *= m0
        w1 *= m1
        val = w0[..., None, :] * y0 + w1[..., None, :] * y1
        out += k_data[:, p:p + 1] * val
        cache.append((pos, u0, u1, w0, w1, y0, y1, f0, f1, val))
    return out, (ypad, pad_l, length, cache)


def ddconv_backward(upstream, y, k_weights, tau, dilation):
    """Vector-Jacobian products of the deformable depthwise convolution.

    Returns (grad_y, grad_k, grad_tau) for the given upstream gradient.
    The offset gradient uses the interpolation derivative (piecewise +/- the
    neighboring samples) summed over channels with the kernel weights.
    """
    y_data = np.asarray(y, dtype=np.float64) if not isinstance(y, np.ndarray) else y
    k_data = np.asarray(k_weights, dtype=np.float64) if not isinstance(k_weights, np.ndarray) else k_weights
    tau_data = np.asarray(tau, dtype=np.float64) if not isinstance(tau, np.ndarray) else tau
    _, cache_pack = _ddconv_forward(y_data, k_data, tau_data, dilation)
    return _ddconv_vjp(upstream, y_data, k_data, tau_data, dilation, cache_pack)


def _ddconv_vjp(g, y_data, k_data, tau_data, dilation, cache_pack):
    ypad, pad_l, length, cache = cache_pack
    g_chan, p_taps = k_data.shape
    lpad = ypad.shape[-1]
    gk = np.empty_like(k_data)
    gtau = np.empty_like(tau_data)
    batched = y_data.ndim > 2
    g3 = g.reshape(-1, g_chan, length)
    idx_chunks, val_chunks = [], []
    for p in range(p_taps):
        pos, u0, u1, w0, w1, y0, y1, f0, f1, val = cache[p]
        gk[:, p] = np.einsum("bgl,bgl->g", g3, val.reshape(g3.shape))
        gkp = g * k_data[:, p:p + 1]  # (..., G, L)
        gkp3 = gkp.reshape(g3.shape)
        # input gradient: scatter both interpolation weights (one fused bincount)
        for w, flat_idx in ((w0, f0), (w1, f1)):
            contrib = gkp * w[..., None, :]
            idx_chunks.append(flat_idx.ravel())
            val_chunks.append(contrib.reshape(-1))
        # offset gradient through the interpolation derivative, channels reduced
        s0 = np.einsum("bgl,bgl->bl", gkp3, y0.reshape(g3.shape))
        s1 = np.einsum("bgl,bgl->bl", gkp3, y1.reshape(g3.shape))
        gt = _dweight(pos - u0).reshape(s0.shape) * s0 + _dweight(pos - u1).reshape(s1.shape) * s1
        gtau[..., :, p] = gt.reshape(tau_data.shape[:-1]) if batched else gt[0]
    flat = np.bincount(np.concatenate(idx_chunks), weights=np.concatenate(val_chunks),
                       minlength=(ypad.size // lpad) * lpad)
    gypad = flat.reshape(ypad.shape).astype(y_data.dtype, copy=False)
    gy = gypad[..., pad_l:pad_l + length]
    return np.ascontiguousarray(gy), gk, gtau


def ddconv(y, kernel, tau):
    """Deformable depthwise convolution with learned per-frame tap offsets.

    out[g, l] = sum_p k[g, p] * interp(ypad, l + f*p + tau[l, p]) with the
    clamped interpolation described in the module docstring. With tau = 0
    this reduces exactly to :func:`dconv`.
    """
    if not isinstance(kernel, DepthwiseKernel):
        raise TypeError("ddconv expects a DepthwiseKernel")
    if isinstance(tau, OffsetField):
        tau = tau.tau
    y = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=np.float64))
    tau = tau if isinstance(tau, Tensor) else Tensor(np.asarray(tau, dtype=np.float64))
    k = kernel.weights
    f = kernel.dilation
    out, cache_pack = _ddconv_forward(y.data, k.data, tau.data, f)

    def bw(g):
        return _ddconv_vjp(g, y.data, k.data, tau.data, f, cache_pack)

    return Tensor(out, parents=(y, k, tau), bw=bw)
