"""Mask-estimation separator: dilated/deformable conv blocks, assembly, counters.

The mask network is a stack of ``repeats`` x ``stack_blocks`` residual
blocks. Each block projects bottleneck features up to ``conv_dim``, runs a
depthwise (optionally deformable) convolution whose dilation doubles through
the stack, and projects back down. Offsets for the deformable convolution
come from a small sub-network branched off the block's first pointwise
convolution; its final projection is zero-initialized so a fresh deformable
model behaves exactly like its non-deformable twin.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .autodiff import (Tensor, ParamStore, channel_linear, cumulative_layer_norm,
                       global_layer_norm, mul, narrow, prelu, relu, transpose_ct, matmul)
from .deform import DepthwiseKernel, dconv, ddconv
from .frames import Waveform, frame_signal, overlap_add_signal, _padded_length


@dataclass
class SeparatorConfig:
    """Architecture hyperparameters for one separator."""

    enc_dim: int = 512          # encoder feature channels
    enc_kernel: int = 16        # frame / encoder filter length (samples)
    bottleneck_dim: int = 128   # channels between blocks
    conv_dim: int = 512         # channels inside a block
    kernel_size: int = 3        # depthwise taps
    stack_blocks: int = 8       # blocks per stack (dilations 1..2^(X-1))
    repeats: int = 3            # stack repeats
    num_sources: int = 2
    deformable: bool = True
    shared_weights: bool = False
    skip_connections: bool = False
    offset_hidden: int = 12     # width of the factorized offset projection
    skip_dim: int = 96          # skip-path channels (skip_connections only)
    sample_rate: int = 8000

    def validate(self):
        positive = ["enc_dim", "enc_kernel", "bottleneck_dim", "conv_dim", "kernel_size",
                    "stack_blocks", "repeats", "num_sources", "offset_hidden", "skip_dim",
                    "sample_rate"]
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"config field {name} must be positive")
        if self.enc_kernel % 2 != 0:
            raise ValueError("enc_kernel must be even (50% frame overlap)")

    def num_blocks(self):
        return self.stack_blocks * self.repeats

    def num_unique_blocks(self):
        return self.stack_blocks if self.shared_weights else self.num_blocks()

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        cfg = cls(**d)
        cfg.validate()
        return cfg


def dilation_schedule(stack_blocks):
    """Dilations double through a stack: [1, 2, 4, ..., 2^(X-1)]."""
    if stack_blocks < 1:
        raise ValueError("stack depth must be >= 1")
    return [2 ** i for i in range(stack_blocks)]


class SeparatorModel:
    """Parameter set plus forward passes for one separator."""

    def __init__(self, config, params, seed):
        self.config = config
        self.params = params
        self.seed = seed
        self.step = 0

    @property
    def dtype(self):
        return self.params.dtype

    # -- parameter bookkeeping -------------------------------------------------

    def block_name(self, stack, pos):
        idx = pos if self.config.shared_weights else stack * self.config.stack_blocks + pos
        return f"block{idx}"

    def __getitem__(self, name):
        return self.params[name]

    # -- forward passes --------------------------------------------------------

    def _offset_subnet(self, h, prefix, dilation):
        """Offsets from the block's first pointwise conv output: (..., L, P)."""
        p = self.params
        t = dconv(h, DepthwiseKernel(p[f"{prefix}.offset.dw"], dilation))
        t = channel_linear(t, p[f"{prefix}.offset.pw1"])
        t = channel_linear(t, p[f"{prefix}.offset.head"])
        t = prelu(t, p[f"{prefix}.offset.slope"])
        return transpose_ct(t)

    def _conv_block(self, z, prefix, dilation, capture=None):
        p = self.params
        cfg = self.config
        h = channel_linear(z, p[f"{prefix}.in_conv.w"])
        a = prelu(h, p[f"{prefix}.in_slope"])
        n1 = global_layer_norm(a, p[f"{prefix}.norm1.gain"], p[f"{prefix}.norm1.bias"])
        kern = DepthwiseKernel(p[f"{prefix}.dw.k"], dilation)
        if cfg.deformable:
            tau = self._offset_subnet(h, prefix, dilation)
            if capture is not None:
                capture.append(tau)
            y = ddconv(n1, kern, tau)
        else:
            y = dconv(n1, kern)
        a2 = prelu(y, p[f"{prefix}.mid_slope"])
        n2 = global_layer_norm(a2, p[f"{prefix}.norm2.gain"], p[f"{prefix}.norm2.bias"])
        out = channel_linear(n2, p[f"{prefix}.out_conv.w"])
        skip = channel_linear(n2, p[f"{prefix}.skip_conv.w"]) if cfg.skip_connections else None
        return z + out, skip

    def mask_network(self, wt, capture=None):
        """Encoded features (..., N, L) -> stacked masks (..., C*N, L)."""
        p = self.params
        cfg = self.config
        z = cumulative_layer_norm(wt, p["post_enc_norm.gain"], p["post_enc_norm.bias"])
        z = channel_linear(z, p["bottleneck.w"])
        skip_sum = None
        for stack in range(cfg.repeats):
            for pos, f in enumerate(dilation_schedule(cfg.stack_blocks)):
                z, skip = self._conv_block(z, self.block_name(stack, pos), f, capture)
                if skip is not None:
                    skip_sum = skip if skip_sum is None else skip_sum + skip
        head_in = skip_sum if cfg.skip_connections else z
        return relu(channel_linear(head_in, p["mask_conv.w"]))

    def forward(self, x, capture=None, mask_override=None):
        """Separate mixtures (..., T) into a list of C estimates (..., T)."""
        cfg = self.config
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        n = x.data.shape[-1]
        if n < cfg.enc_kernel:
            raise ValueError(
                f"input of {n} samples is shorter than one frame ({cfg.enc_kernel})")
        fm = frame_signal(x, cfg.enc_kernel)
        w = relu(matmul(fm, self.params["encoder.w"]))
        wt = transpose_ct(w)
        if mask_override is None:
            masks = self.mask_network(wt, capture)
        else:
            masks = mask_override if isinstance(mask_override, Tensor) else Tensor(
                np.asarray(mask_override, dtype=np.float64))
        outs = []
        for c in range(cfg.num_sources):
            mc = narrow(masks, -2, c * cfg.enc_dim, cfg.enc_dim)
            v = mul(wt, mc)
            sf = matmul(transpose_ct(v), self.params["decoder.w"])
            outs.append(overlap_add_signal(sf, cfg.enc_kernel, n))
        return outs


def build_separator(config, seed=0, dtype=np.float64):
    """Initialize a separator deterministically from a seed.

    The random draws are made in double precision so float32 and float64
    builds of the same seed hold the same parameters up to rounding.
    """
    cfg = config
    cfg.validate()
    store = ParamStore(seed, dtype=dtype)
    n, lbl = cfg.enc_dim, cfg.enc_kernel
    b, h, p = cfg.bottleneck_dim, cfg.conv_dim, cfg.kernel_size
    store.uniform("encoder.w", (lbl, n), fan_in=lbl)
    store.uniform("decoder.w", (n, lbl), fan_in=n)
    store.constant("post_enc_norm.gain", (n, 1), 1.0)
    store.zeros("post_enc_norm.bias", (n, 1))
    store.uniform("bottleneck.w", (n, b), fan_in=n)
    for i in range(cfg.num_unique_blocks()):
        pre = f"block{i}"
        store.uniform(f"{pre}.in_conv.w", (b, h), fan_in=b)
        store.constant(f"{pre}.in_slope", (), 0.25)
        store.constant(f"{pre}.norm1.gain", (h, 1), 1.0)
        store.zeros(f"{pre}.norm1.bias", (h, 1))
        store.uniform(f"{pre}.dw.k", (h, p), fan_in=p)
        if cfg.deformable:
            store.uniform(f"{pre}.offset.dw", (h, p), fan_in=p)
            store.uniform(f"{pre}.offset.pw1", (h, cfg.offset_hidden), fan_in=h)
            store.zeros(f"{pre}.offset.head", (cfg.offset_hidden, p))
            store.constant(f"{pre}.offset.slope", (), 0.25)
        store.constant(f"{pre}.mid_slope", (), 0.25)
        store.constant(f"{pre}.norm2.gain", (h, 1), 1.0)
        store.zeros(f"{pre}.norm2.bias", (h, 1))
        store.uniform(f"{pre}.out_conv.w", (h, b), fan_in=h)
        if cfg.skip_connections:
            store.uniform(f"{pre}.skip_conv.w", (h, cfg.skip_dim), fan_in=h)
    head_in = cfg.skip_dim if cfg.skip_connections else b
    store.uniform("mask_conv.w", (head_in, cfg.num_sources * n), fan_in=head_in)
    return SeparatorModel(cfg, store, seed)


def estimate_masks(w, model):
    """Masks for encoded features w (..., L_x, N): list of C tensors, same shape."""
    w = w if isinstance(w, Tensor) else Tensor(np.asarray(w, dtype=np.float64))
    cfg = model.config
    stacked = model.mask_network(transpose_ct(w))
    return [transpose_ct(narrow(stacked, -2, c * cfg.enc_dim, cfg.enc_dim))
            for c in range(cfg.num_sources)]


def separate(x, model, mask_override=None):
    """Run the full pipeline on one waveform; returns C Waveforms."""
    if isinstance(x, Waveform):
        if x.sample_rate != model.config.sample_rate:
            raise ValueError(
                f"sample rate {x.sample_rate} does not match the model's "
                f"{model.config.sample_rate}")
        data = x.samples
    else:
        data = np.asarray(x, dtype=np.float64)
    outs = model.forward(data, mask_override=mask_override)
    return [Waveform(o.data.copy(), model.config.sample_rate) for o in outs]


def count_params(model):
    """Exact number of scalar parameters; shared blocks counted once."""
    return model.params.num_scalars()


def count_macs(model, input_len):
    """Multiply-accumulates for one forward pass at the given input length.

    Counts the encoder, every pointwise/depthwise convolution (deformable
    taps add two interpolation multiplies each, and the offset sub-network
    is included), and the decoder. Normalizations and activations excluded.
    """
    cfg = model.config
    padded = _padded_length(int(input_len), cfg.enc_kernel)
    frames = (padded - cfg.enc_kernel) // (cfg.enc_kernel // 2) + 1
    n, lbl = cfg.enc_dim, cfg.enc_kernel
    b, h, p = cfg.bottleneck_dim, cfg.conv_dim, cfg.kernel_size
    per_frame = lbl * n            # encoder
    per_frame += n * b             # bottleneck
    block = b * h + h * p + h * b
    if cfg.skip_connections:
        block += h * cfg.skip_dim
    if cfg.deformable:
        block += 2 * h * p                      # interpolation weights
        block += h * p                          # offset depthwise
        block += h * cfg.offset_hidden          # offset projection
        block += cfg.offset_hidden * p          # offset head
    per_frame += cfg.num_blocks() * block
    head_in = cfg.skip_dim if cfg.skip_connections else b
    per_frame += head_in * cfg.num_sources * n  # mask head
    per_frame += cfg.num_sources * n * lbl      # decoder
    return frames * per_frame
