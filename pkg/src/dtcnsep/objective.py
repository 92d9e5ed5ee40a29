"""Scale-invariant SDR, permutation-invariant loss, and the improvement metric.

The dB value is stabilized with an epsilon on both energies, which caps the
score for a perfect estimate instead of letting it diverge; the cap is
reported through ``SISDRValue.capped``. The permutation search enumerates
all C! assignments (C is 2 in the experiments) and breaks ties toward the
lexicographically smallest permutation.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np

from .autodiff import EPS, Tensor, log, mul, tsum
from .frames import Waveform

_LOG10 = float(np.log(10.0))


@dataclass
class SISDRValue:
    value: float           # dB
    capped: bool = False   # error energy underflowed the epsilon floor

    def __float__(self):
        return self.value


@dataclass
class PermutationAssignment:
    mapping: tuple  # mapping[estimate_index] = reference_index

    def __post_init__(self):
        if sorted(self.mapping) != list(range(len(self.mapping))):
            raise ValueError("permutation must be a bijection on 0..C-1")


def _as_samples(x):
    if isinstance(x, Waveform):
        return x.samples
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def sisdr(est, ref, eps=EPS):
    """Scale-invariant SDR of ``est`` against ``ref`` in dB."""
    e = _as_samples(est)
    r = _as_samples(ref)
    if e.shape != r.shape:
        raise ValueError(f"length mismatch: {e.shape} vs {r.shape}")
    if e.size == 0:
        raise ValueError("cannot score zero-length signals")
    ref_energy = float(np.dot(r, r))
    if ref_energy == 0.0:
        raise ValueError("reference signal is all-zero")
    alpha = float(np.dot(e, r)) / (ref_energy + eps)
    target = alpha * r
    err = e - target
    num = float(np.dot(target, target)) + eps
    den = float(np.dot(err, err)) + eps
    value = 10.0 * np.log10(num / den)
    return SISDRValue(value=float(value), capped=bool(np.dot(err, err) < eps))


def pit_loss(ests, refs, eps=EPS):
    """Minimum over speaker assignments of the mean negative SI-SDR.

    Returns (loss in dB, best PermutationAssignment).
    """
    ests = [_as_samples(e) for e in ests]
    refs = [_as_samples(r) for r in refs]
    if len(ests) != len(refs):
        raise ValueError(f"estimate/reference count mismatch: {len(ests)} vs {len(refs)}")
    c = len(ests)
    if c < 1:
        raise ValueError("need at least one source")
    pairwise = np.empty((c, c))
    for i in range(c):
        for j in range(c):
            pairwise[i, j] = sisdr(ests[i], refs[j], eps=eps).value
    best_loss, best_perm = None, None
    for perm in permutations(range(c)):
        loss = -np.mean([pairwise[i, perm[i]] for i in range(c)])
        if best_loss is None or loss < best_loss:
            best_loss, best_perm = loss, perm
    return float(best_loss), PermutationAssignment(mapping=best_perm)


def delta_sisdr(est, ref, mixture, eps=EPS):
    """SI-SDR improvement of the estimate over the unprocessed mixture, dB."""
    return sisdr(est, ref, eps=eps).value - sisdr(mixture, ref, eps=eps).value


# -- differentiable path (training) ---------------------------------------------


def sisdr_graph(est, ref, eps=EPS):
    """SI-SDR in dB as an autodiff node; est (..., T) Tensor, ref constant."""
    est = est if isinstance(est, Tensor) else Tensor(np.asarray(est, dtype=np.float64))
    ref_data = _as_samples(ref).astype(est.data.dtype, copy=False)
    ref_c = Tensor(ref_data)
    ref_energy = float((ref_data * ref_data).sum(axis=-1).min())
    if ref_energy == 0.0:
        raise ValueError("reference signal is all-zero")
    denom = (ref_data * ref_data).sum(axis=-1, keepdims=True) + eps
    alpha = tsum(mul(est, ref_c), axis=-1, keepdims=True) * Tensor(1.0 / denom)
    target = mul(alpha, ref_c)
    err = est - target
    num = tsum(mul(target, target), axis=-1) + eps
    den = tsum(mul(err, err), axis=-1) + eps
    return (log(num) - log(den)) * (10.0 / _LOG10)


def pit_loss_graph(ests, refs, eps=EPS):
    """Batched utterance-level PIT loss as an autodiff node.

    ests: list of C Tensors (..., T); refs: array (..., C, T) or matching list.
    Returns (scalar Tensor loss in dB, chosen permutation indices per item).
    """
    c = len(ests)
    if isinstance(refs, (list, tuple)):
        ref_rows = [_as_samples(r) for r in refs]
    else:
        refs = np.asarray(refs, dtype=np.float64)
        ref_rows = [refs[..., j, :] for j in range(refs.shape[-2])]
    if len(ref_rows) != c:
        raise ValueError(f"estimate/reference count mismatch: {c} vs {len(ref_rows)}")
    pair = {(i, j): sisdr_graph(ests[i], ref_rows[j], eps=eps)
            for i in range(c) for j in range(c)}
    perms = list(permutations(range(c)))
    losses = []
    for perm in perms:
        total = pair[(0, perm[0])]
        for i in range(1, c):
            total = total + pair[(i, perm[i])]
        losses.append(total * (-1.0 / c))  # (...,) negative mean over speakers
    stacked = np.stack([l.data for l in losses])  # (P, ...)
    chosen = np.argmin(stacked, axis=0)           # (...,)
    total = None
    for pi, loss in enumerate(losses):
        pick = (chosen == pi).astype(np.float64)
        if pick.any():
            term = tsum(mul(loss, Tensor(pick)))
            total = term if total is None else total + term
    n_items = max(1, int(np.prod(chosen.shape)))
    return total * (1.0 / n_items), chosen
