"""Waveform framing, learned encoder/decoder, masking, and overlap-add.

Frames are length ``block_len`` with 50% overlap (hop = block_len / 2); the
input is zero-padded at the tail so the final frame is complete, and
reconstruction divides by the per-sample overlap count, which makes
segment -> overlap_add an exact round trip over the original length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, matmul, mul, relu


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 8000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("waveform samples must be 1-D")

    def __len__(self):
        return self.samples.shape[0]


@dataclass
class FrameMatrix:
    frames: Tensor  # (..., L_x, block_len)
    block_len: int
    orig_len: int

    def __post_init__(self):
        if self.block_len % 2 != 0:
            raise ValueError("block length must be even (50% overlap)")

    @property
    def hop(self):
        return self.block_len // 2

    @property
    def num_frames(self):
        return self.frames.data.shape[-2]


def _padded_length(n, block_len):
    hop = block_len // 2
    if n <= block_len:
        return block_len
    return block_len + hop * int(np.ceil((n - block_len) / hop))


def _frame_indices(padded_len, block_len):
    hop = block_len // 2
    n_frames = (padded_len - block_len) // hop + 1
    return hop * np.arange(n_frames)[:, None] + np.arange(block_len)[None, :]


def frame_signal(x, block_len):
    """Autodiff framing primitive: (..., T) -> (..., L_x, block_len)."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    n = x.data.shape[-1]
    if n < 1:
        raise ValueError("cannot segment an empty signal")
    padded = _padded_length(n, block_len)
    idx = _frame_indices(padded, block_len)
    pad_spec = [(0, 0)] * (x.data.ndim - 1) + [(0, padded - n)]
    xpad = np.pad(x.data, pad_spec)
    out = xpad[..., idx]

    def bw(g):
        gpad = np.zeros_like(xpad)
        if gpad.ndim == 1:
            np.add.at(gpad, idx, g)
        else:
            lead = gpad.shape[:-1]
            gflat = gpad.reshape(-1, padded)
            bidx = np.arange(gflat.shape[0])[:, None, None]
            np.add.at(gflat, (bidx, idx[None]), g.reshape(-1, *idx.shape))
            gpad = gflat.reshape(*lead, padded)
        return (np.ascontiguousarray(gpad[..., :n]),)

    return Tensor(out, parents=(x,), bw=bw)


def overlap_add_signal(frames, block_len, out_len):
    """Autodiff overlap-add primitive: (..., L_x, block_len) -> (..., out_len).

    Sums aligned frame contributions and divides by the per-sample overlap
    count (2 in the interior, 1 at the edges).
    """
    frames = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames, dtype=np.float64))
    hop = block_len // 2
    n_frames = frames.data.shape[-2]
    full_len = (n_frames - 1) * hop + block_len
    if out_len > full_len:
        raise ValueError(f"out_len {out_len} exceeds reconstructable length {full_len}")
    idx = _frame_indices(full_len, block_len)
    counts = np.zeros(full_len, dtype=frames.data.dtype)
    np.add.at(counts, idx, 1.0)
    lead = frames.data.shape[:-2]
    acc = np.zeros(lead + (full_len,), dtype=frames.data.dtype)
    if acc.ndim == 1:
        np.add.at(acc, idx, frames.data)
    else:
        aflat = acc.reshape(-1, full_len)
        bidx = np.arange(aflat.shape[0])[:, None, None]
        np.add.at(aflat, (bidx, idx[None]), frames.data.reshape(-1, *idx.shape))
        acc = aflat.reshape(lead + (full_len,))
    out = (acc / counts)[..., :out_len]

    def bw(g):
        gfull = np.zeros(lead + (full_len,), dtype=g.dtype)
        gfull[..., :out_len] = g / counts[:out_len]
        return (gfull[..., idx],)

    return Tensor(np.ascontiguousarray(out), parents=(frames,), bw=bw)


def segment(x, block_len):
    """Split a waveform into 50%-overlapped frames, padding the tail."""
    if isinstance(x, Waveform):
        data = x.samples
    else:
        data = np.asarray(x, dtype=np.float64) if not isinstance(x, Tensor) else x.data
    if data.shape[-1] < 1:
        raise ValueError("cannot segment an empty signal")
    t = frame_signal(x if isinstance(x, Tensor) else data, block_len)
    return FrameMatrix(frames=t, block_len=block_len, orig_len=data.shape[-1])


def overlap_add(fm, out_len=None):
    """Reconstruct a waveform from a FrameMatrix."""
    if out_len is None:
        out_len = fm.orig_len
    return overlap_add_signal(fm.frames, fm.block_len, out_len)


def encode(frames, enc_w):
    """Encode frames with the learned filterbank: w = relu(frames @ B)."""
    t = frames.frames if isinstance(frames, FrameMatrix) else frames
    t = t if isinstance(t, Tensor) else Tensor(np.asarray(t, dtype=np.float64))
    enc_w = enc_w if isinstance(enc_w, Tensor) else Tensor(np.asarray(enc_w, dtype=np.float64))
    if t.data.shape[-1] != enc_w.data.shape[0]:
        raise ValueError(
            f"encode: frame length {t.data.shape[-1]} != encoder rows {enc_w.data.shape[0]}")
    return relu(matmul(t, enc_w))


def apply_mask(w, m):
    """Hadamard product of encoded features and a nonnegative mask."""
    w = w if isinstance(w, Tensor) else Tensor(np.asarray(w, dtype=np.float64))
    m = m if isinstance(m, Tensor) else Tensor(np.asarray(m, dtype=np.float64))
    if w.data.shape != m.data.shape:
        raise ValueError(f"apply_mask: shape mismatch {w.data.shape} vs {m.data.shape}")
    return mul(w, m)


def decode(v, dec_w):
    """Map masked features back to time-domain frames: s = v @ U."""
    v = v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=np.float64))
    dec_w = dec_w if isinstance(dec_w, Tensor) else Tensor(np.asarray(dec_w, dtype=np.float64))
    if v.data.shape[-1] != dec_w.data.shape[0]:
        raise ValueError(
            f"decode: feature dim {v.data.shape[-1]} != decoder rows {dec_w.data.shape[0]}")
    return matmul(v, dec_w)
