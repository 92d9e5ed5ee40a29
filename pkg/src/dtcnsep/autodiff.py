"""Minimal dense-tensor core with reverse-mode gradients.

Holds exactly what the separator needs: a numpy-backed ``Tensor`` that
records its producing operation, elementwise/linear-algebra primitives with
hand-written vector-Jacobian products, the normalization layers, a named
parameter store, and a central-difference gradient checker.

Feature tensors follow (batch, channel, time) layout; all ops accept an
optional leading batch axis. Double precision is the default dtype; single
precision is accepted for training speed.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float64
EPS = 1e-8


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode autodiff.

    ``_bw`` receives the upstream gradient and returns one gradient per
    parent (or None for parents that need no gradient). Tensors are treated
    as immutable once created by an op.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bw")

    def __init__(self, data, requires_grad=False, parents=(), bw=None):
        self.data = np.asarray(data, dtype=DEFAULT_DTYPE) if not isinstance(data, np.ndarray) else data
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._bw = bw if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Reverse-mode sweep from this tensor through the recorded graph.

        Visits each node exactly once in reverse topological order;
        accumulation order is fixed by graph construction, so repeated runs
        are bit-identical.
        """
        if grad is None:
            grad = np.ones_like(self.data)
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(topo):
            if node._bw is None or node.grad is None:
                continue
            gs = node._bw(node.grad)
            for parent, g in zip(node._parents, gs):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g

    # operator sugar used throughout the model code
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return neg(self)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b):
    out = Tensor(a.data + b.data, parents=(a, b),
                 bw=lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))
    return out


def sub(a, b):
    return Tensor(a.data - b.data, parents=(a, b),
                  bw=lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def neg(a):
    return Tensor(-a.data, parents=(a,), bw=lambda g: (-g,))


def mul(a, b):
    return Tensor(a.data * b.data, parents=(a, b),
                  bw=lambda g: (_unbroadcast(g * b.data, a.data.shape),
                                _unbroadcast(g * a.data, b.data.shape)))


def div(a, b):
    q = a.data / b.data
    return Tensor(q, parents=(a, b),
                  bw=lambda g: (_unbroadcast(g / b.data, a.data.shape),
                                _unbroadcast(-g * q / b.data, b.data.shape)))


def sqrt(a):
    r = np.sqrt(a.data)
    return Tensor(r, parents=(a,), bw=lambda g: (g * (0.5 / r),))


def log(a):
    return Tensor(np.log(a.data), parents=(a,), bw=lambda g: (g / a.data,))


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return Tensor(out, parents=(a,), bw=bw)


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def cumsum(a, axis=-1):
    out = np.cumsum(a.data, axis=axis)

    def bw(g):
        rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        return (rev,)

    return Tensor(out, parents=(a,), bw=bw)


def transpose_ct(a):
    """Swap the trailing (channel, time) axes."""
    out = np.swapaxes(a.data, -1, -2)
    return Tensor(np.ascontiguousarray(out), parents=(a,),
                  bw=lambda g: (np.ascontiguousarray(np.swapaxes(g, -1, -2)),))


def narrow(a, axis, start, length):
    """Contiguous slice along one axis."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return Tensor(np.ascontiguousarray(a.data[idx]), parents=(a,), bw=bw)


def matmul(a, b):
    """a @ b with optional leading batch axes on ``a``; ``b`` is 2-D."""
    out = a.data @ b.data

    def bw(g):
        ga = g @ b.data.T
        if a.data.ndim > 2:
            a2 = a.data.reshape(-1, a.data.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            gb = a2.T @ g2
        else:
            gb = a.data.T @ g
        return (ga, gb)

    return Tensor(out, parents=(a, b), bw=bw)


def relu(x):
    x = _wrap(x)
    mask = x.data >= 0
    return Tensor(np.where(mask, x.data, 0.0), parents=(x,),
                  bw=lambda g: (np.where(mask, g, 0.0),))


def prelu(x, a):
    """x for x >= 0, a*x below; ``a`` is a trainable scalar or per-channel slope."""
    x, a = _wrap(x), _wrap(a)
    mask = x.data >= 0
    out = np.where(mask, x.data, a.data * x.data)

    def bw(g):
        gx = np.where(mask, g, a.data * g)
        ga = _unbroadcast(np.where(mask, 0.0, g * x.data), a.data.shape)
        return (gx, ga)

    return Tensor(out, parents=(x, a), bw=bw)


def channel_linear(x, w, b=None):
    """Pointwise (1x1) convolution over channels: out[c,t] = b[c] + sum_j x[j,t] w[j,c].

    x: (..., C_in, T), w: (C_in, C_out), b: (C_out,) or None.
    """
    x, w = _wrap(x), _wrap(w)
    if x.data.shape[-2] != w.data.shape[0]:
        raise ValueError(
            f"channel_linear: x has {x.data.shape[-2]} channels, w expects {w.data.shape[0]}")
    out = np.matmul(w.data.T, x.data)

    def _weight_grad(g):
        x2 = np.swapaxes(x.data, -1, -2).reshape(-1, x.data.shape[-2])
        g2 = np.swapaxes(g, -1, -2).reshape(-1, g.shape[-2])
        return x2.T @ g2

    if b is None:
        def bw(g):
            return (np.matmul(w.data, g), _weight_grad(g))

        return Tensor(out, parents=(x, w), bw=bw)

    b = _wrap(b)
    if b.data.shape != (w.data.shape[1],):
        raise ValueError("channel_linear: bias shape must be (C_out,)")
    out = out + b.data[:, None]

    def bw(g):
        gx = np.matmul(w.data, g)
        gb = g.sum(axis=tuple(i for i in range(g.ndim) if i != g.ndim - 2))
        return (gx, _weight_grad(g), gb)

    return Tensor(out, parents=(x, w, b), bw=bw)


def global_layer_norm(x, gain, bias, eps=EPS):
    """Normalize to zero mean / unit variance over (channel, time) jointly, then affine.

    Statistics are per batch item. gain/bias are per-channel, shape (C, 1).
    """
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    ax = (-2, -1)
    mu = x.data.mean(axis=ax, keepdims=True)
    var = x.data.var(axis=ax, keepdims=True)
    s = np.sqrt(var + eps)
    xhat = (x.data - mu) / s
    out = gain.data * xhat + bias.data

    def bw(g):
        ggain = _unbroadcast(g * xhat, gain.data.shape)
        gbias = _unbroadcast(g, bias.data.shape)
        gg = g * gain.data
        gx = (gg - gg.mean(axis=ax, keepdims=True)
              - xhat * (gg * xhat).mean(axis=ax, keepdims=True)) / s
        return (gx, ggain, gbias)

    return Tensor(out, parents=(x, gain, bias), bw=bw)


def cumulative_layer_norm(x, gain, bias, eps=EPS):
    """Causal layer norm: statistics over channels and all frames up to t.

    Output at frame t depends only on x[:, 0..t]. Built from primitives so
    the backward pass comes from the graph.
    """
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    n_chan = x.data.shape[-2]
    n_frames = x.data.shape[-1]
    counts = Tensor((np.arange(1, n_frames + 1, dtype=x.data.dtype) * n_chan)[None, :])
    csum = cumsum(tsum(x, axis=-2, keepdims=True), axis=-1)
    csq = cumsum(tsum(mul(x, x), axis=-2, keepdims=True), axis=-1)
    mean_t = div(csum, counts)
    var_t = sub(div(csq, counts), mul(mean_t, mean_t))
    denom = sqrt(add(var_t, Tensor(np.asarray(eps, dtype=x.data.dtype))))
    xhat = div(sub(x, mean_t), denom)
    return add(mul(gain, xhat), bias)


class ParamStore:
    """Named parameter tensors with matching gradient slots and seeded init."""

    def __init__(self, seed=0, dtype=DEFAULT_DTYPE):
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self._rng = np.random.default_rng(seed)
        self._params: dict[str, Tensor] = {}

    def add(self, name, value):
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True)
        self._params[name] = t
        return t

    def uniform(self, name, shape, fan_in):
        """Weight init: uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))."""
        bound = 1.0 / np.sqrt(fan_in)
        return self.add(name, self._rng.uniform(-bound, bound, size=shape))

    def zeros(self, name, shape):
        return self.add(name, np.zeros(shape))

    def constant(self, name, shape, value):
        return self.add(name, np.full(shape, float(value)))

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def num_scalars(self):
        return sum(t.data.size for t in self._params.values())


def grad_check(fn, inputs, h=1e-6, seed=0):
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps the given Tensors to an output Tensor; the output is reduced
    to a scalar with a fixed random projection so every output entry carries
    weight. Error per entry: |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    tensors = [t if isinstance(t, Tensor) else Tensor(np.asarray(t, dtype=DEFAULT_DTYPE), requires_grad=True)
               for t in inputs]
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    rng = np.random.default_rng(seed)
    out = fn(*tensors)
    proj = rng.standard_normal(out.data.shape)

    def scalar(*ts):
        o = fn(*ts)
        return float((o.data * proj).sum())

    loss = tsum(mul(out, Tensor(proj)))
    if not np.isfinite(loss.data):
        raise FloatingPointError("grad_check: non-finite forward value")
    loss.backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = scalar(*tensors)
            flat[i] = orig - h
            down = scalar(*tensors)
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            if not np.isfinite(numeric):
                raise FloatingPointError("grad_check: non-finite finite-difference value")
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
