"""Dense n-dimensional arrays with reverse-mode automatic differentiation.

A ``Tensor`` wraps a row-major numpy array (float32 by default, float64 for
verification runs) together with the operation that produced it.  Every op
below records its parents and a closure that routes the output gradient back
to them, so a forward pass implicitly builds a DAG and ``backward`` walks it
once in reverse topological order.

Only the operations the video model actually needs are provided: batched
matmul, softmax/log-softmax, layer normalization, ReLU, sigmoid, strided 3D
convolution with signed padding, raster-causal masked 3D convolution,
gathers, reshapes and concatenation.  ``grad_check`` compares every analytic
gradient against central finite differences and is the binding contract for
all of them.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(ValueError):
    """A geometry or configuration parameter is invalid."""


# When enabled, every op asserts its output is finite.  Off by default; the
# verification tests switch it on.
CHECK_FINITE = False

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph construction (sampling, eval)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


def _make(data, parents, backward):
    """Create an op output, keeping the graph only where gradients can flow."""
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by a forward op")
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t, grad):
    if not t.requires_grad:
        return
    if grad.shape != t.data.shape:
        raise ShapeError(f"gradient shape {grad.shape} != value shape {t.data.shape}")
    if t.grad is None:
        t.grad = grad.astype(t.data.dtype, copy=True)
    else:
        t.grad += grad


def _wrap(x, like):
    """Coerce a scalar or array constant to a Tensor matching ``like``'s dtype."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` along axes numpy broadcasting expanded."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


def clear_graph_grads(t):
    """Reset .grad on every node reachable from ``t`` so the same graph can
    be swept backward again with a different seed."""
    seen = set()
    stack = [t]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        node.grad = None
        stack.extend(node._parents)


def backward(t, seed=None):
    """Reverse-mode sweep from ``t``; accumulates into ``.grad`` of leaves.

    Visits each node exactly once, children before parents.
    """
    topo = []
    visited = set()
    stack = [(t, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    if seed is None:
        seed = np.ones_like(t.data)
    _accumulate(t, np.asarray(seed, dtype=t.data.dtype))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------

def add(a, b):
    a = a if isinstance(a, Tensor) else _wrap(a, b)
    b = _wrap(b, a)

    def back(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), back)


def sub(a, b):
    a = a if isinstance(a, Tensor) else _wrap(a, b)
    b = _wrap(b, a)

    def back(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), back)


def mul(a, b):
    a = a if isinstance(a, Tensor) else _wrap(a, b)
    b = _wrap(b, a)

    def back(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), back)


def neg(a):
    def back(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), back)


def relu(a):
    def back(g):
        _accumulate(a, g * (a.data > 0))

    return _make(np.maximum(a.data, 0), (a,), back)


def sigmoid(a):
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))).astype(x.dtype)

    def back(g):
        _accumulate(a, g * y * (1.0 - y))

    return _make(y, (a,), back)


def log(a):
    def back(g):
        _accumulate(a, g / a.data)

    return _make(np.log(a.data), (a,), back)


def clip(a, lo, hi):
    """Clamp values; gradient passes through only in the interior."""
    y = np.clip(a.data, lo, hi)

    def back(g):
        _accumulate(a, g * ((a.data >= lo) & (a.data <= hi)))

    return _make(y, (a,), back)


def sum_all(a):
    def back(g):
        _accumulate(a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype))

    return _make(a.data.sum(), (a,), back)


# ---------------------------------------------------------------------------
# linear algebra and normalization
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Matrix product; leading extents broadcast, so stacked batches are free."""
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.data.shape} @ {b.data.shape}")
    out = np.matmul(a.data, b.data)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accumulate(a, _unbroadcast(ga, a.data.shape))
        _accumulate(b, _unbroadcast(gb, b.data.shape))

    return _make(out, (a, b), back)


def softmax(a, axis=-1):
    """Exp-normalize along ``axis``, stabilized by max subtraction."""
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accumulate(a, y * (g - dot))

    return _make(y, (a,), back)


def log_softmax(a, axis=-1):
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    s = x - m
    ls = s - np.log(np.exp(s).sum(axis=axis, keepdims=True))

    def back(g):
        _accumulate(a, g - np.exp(ls) * g.sum(axis=axis, keepdims=True))

    return _make(ls, (a,), back)


def layernorm(a, gain, bias, eps=1e-6):
    """Zero-mean unit-variance over the last (feature) axis, then affine."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        _accumulate(gain, _unbroadcast(g * xhat, gain.data.shape))
        _accumulate(bias, _unbroadcast(g, bias.data.shape))
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accumulate(a, inv * (dxhat - m1 - xhat * m2))

    return _make(out, (a, gain, bias), back)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a, shape):
    old = a.data.shape

    def back(g):
        _accumulate(a, g.reshape(old))

    return _make(a.data.reshape(shape), (a,), back)


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def back(g):
        _accumulate(a, g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), back)


def concat(parts, axis=-1):
    parts = list(parts)
    sizes = [p.data.shape[axis] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)

    def back(g):
        offs = np.cumsum([0] + sizes)
        for p, lo, hi in zip(parts, offs[:-1], offs[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(p, g[tuple(sl)])

    return _make(out, tuple(parts), back)


def narrow(a, axis, start, length):
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def back(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        _accumulate(a, full)

    return _make(a.data[sl], (a,), back)


def subsample3d(a, starts, steps):
    """Strided slice over the first three axes: a[s0::d0, s1::d1, s2::d2]."""
    sl = tuple(slice(s, None, d) for s, d in zip(starts, steps))

    def back(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        _accumulate(a, full)

    return _make(a.data[sl].copy(), (a,), back)


def gather(table, idx, axis=0):
    """Differentiable lookup: rows of ``table`` along ``axis`` at ``idx``."""
    idx = np.asarray(idx)
    out = np.take(table.data, idx, axis=axis)

    def back(g):
        gt = np.zeros_like(table.data)
        if axis == 0:
            np.add.at(gt, idx, g)
        else:
            sl = (slice(None),) * axis
            np.add.at(gt, sl + (idx,), g)
        _accumulate(table, gt)

    return _make(out, (table,), back)


def take_index_last(a, idx):
    """Pick one entry along the last axis per position (for NLL targets)."""
    idx = np.asarray(idx)
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def back(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        _accumulate(a, full)

    return _make(out, (a,), back)


def one_hot(values, n, dtype=np.float32):
    """Plain one-hot encoding of an integer array (a constant, not an op)."""
    values = np.asarray(values)
    out = np.zeros(values.shape + (n,), dtype=dtype)
    np.put_along_axis(out, values[..., None].astype(np.int64), 1.0, axis=-1)
    return out


# ---------------------------------------------------------------------------
# 3D convolution with signed padding, and its raster-causal masked variant
# ---------------------------------------------------------------------------

_CONV_INDEX_CACHE = {}


def _conv_index_map(in_shape, taps, stride, pad, out_shape):
    """Flat gather indices (P_out*K,) into a zero-padded flat input.

    Out-of-bounds taps point at the sentinel row ``N`` (kept all-zero), which
    realizes both zero padding and negative (window-shifting) padding.
    """
    key = (in_shape, tuple(map(tuple, taps)), stride, pad, out_shape)
    hit = _CONV_INDEX_CACHE.get(key)
    if hit is not None:
        return hit
    T, H, W = in_shape
    ot, oh, ow = np.meshgrid(np.arange(out_shape[0]), np.arange(out_shape[1]),
                             np.arange(out_shape[2]), indexing="ij")
    outs = np.stack([ot.ravel(), oh.ravel(), ow.ravel()], axis=1)  # (P_out, 3)
    taps = np.asarray(taps)  # (K, 3)
    coords = outs[:, None, :] * np.asarray(stride) - np.asarray(pad) + taps[None, :, :]
    inb = ((coords >= 0) & (coords < np.asarray([T, H, W]))).all(axis=2)
    flat = coords[..., 0] * (H * W) + coords[..., 1] * W + coords[..., 2]
    flat = np.where(inb, flat, T * H * W).astype(np.int64)  # sentinel row
    flat = flat.reshape(-1)
    _CONV_INDEX_CACHE[key] = flat
    return flat


def _conv_core(x, kernel, bias, taps, stride, pad, out_shape):
    """Shared gather-matmul convolution.  x: (B,T,H,W,Cin); taps: (K,3)."""
    B, T, H, W, cin = x.data.shape
    k_rows = kernel.data.shape[0]  # K*Cin
    K = len(taps)
    if k_rows != K * cin:
        raise ShapeError(f"kernel expects {k_rows // K if K else 0} input channels, got {cin}")
    cout = kernel.data.shape[1]
    idx = _conv_index_map((T, H, W), taps, stride, pad, out_shape)
    n = T * H * W
    flat = np.concatenate(
        [x.data.reshape(B, n, cin), np.zeros((B, 1, cin), dtype=x.data.dtype)], axis=1)
    patches = flat[:, idx, :].reshape(B, -1, K * cin)  # (B, P_out, K*Cin)
    out = np.matmul(patches, kernel.data) + bias.data
    p_out = out.shape[1]

    def back(g):
        g2 = g.reshape(B, p_out, cout)
        _accumulate(bias, g2.sum(axis=(0, 1)))
        gk = np.einsum("bpi,bpo->io", patches, g2).astype(kernel.data.dtype)
        _accumulate(kernel, gk)
        gp = np.matmul(g2, kernel.data.T).reshape(B, p_out * K, cin)
        gflat = np.zeros((B, n + 1, cin), dtype=x.data.dtype)
        np.add.at(gflat, (slice(None), idx), gp)
        _accumulate(x, gflat[:, :n, :].reshape(x.data.shape))

    data = out.reshape(B, *out_shape, cout)

    def back_shaped(g):
        back(g.reshape(B, p_out, cout))

    return _make(data, (x, kernel, bias), back_shaped)


def kernel_taps(extents):
    kt, kh, kw = extents
    g = np.meshgrid(np.arange(kt), np.arange(kh), np.arange(kw), indexing="ij")
    return [(int(a), int(b), int(c)) for a, b, c in
            zip(g[0].ravel(), g[1].ravel(), g[2].ravel())]


def conv3d(x, kernel, bias, extents, stride, pad, out_shape):
    """Strided 3D convolution with signed padding and an explicit out shape.

    x: (B, T, H, W, Cin); kernel: flattened (K*Cin, Cout) with taps in raster
    order over ``extents``; ``pad`` components may be negative, which shifts
    the window forward instead of padding.
    output(o) = sum_taps kernel . input(o*stride - pad + tap) + bias
    """
    return _conv_core(x, kernel, bias, kernel_taps(extents), tuple(stride),
                      tuple(pad), tuple(out_shape))


def masked_taps(extents):
    """Taps strictly before the center in raster (t,h,w) order (center excluded)."""
    kt, kh, kw = extents
    if kt % 2 == 0 or kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"masked conv kernel extents must be odd, got {extents}")
    center = (kt // 2, kh // 2, kw // 2)
    return [t for t in kernel_taps(extents) if t < center]


def masked_conv3d(x, kernel, bias, extents):
    """Raster-causal 3D convolution: output at p sees only inputs before p.

    Kernel is stored flat as (K_allowed*Cin, Cout) over the allowed taps only;
    extents must be odd and the window is centered (stride 1).
    """
    taps = masked_taps(extents)
    pad = (extents[0] // 2, extents[1] // 2, extents[2] // 2)
    out_shape = x.data.shape[1:4]
    return _conv_core(x, kernel, bias, taps, (1, 1, 1), pad, out_shape)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(fn, inputs, eps=1e-3, max_entries=None, seed=0):
    """Max relative error between reverse-mode and central finite differences.

    ``fn`` maps the input Tensors to a scalar Tensor; inputs should be float64
    leaves with requires_grad=True.  Relative error uses max(1, |a|, |n|) in
    the denominator so near-zero gradients do not blow it up.  By default
    every coordinate is perturbed; ``max_entries`` caps the (seeded, random)
    coordinate sample per input, which keeps large composites affordable.
    """
    out = fn(*inputs)
    if out.data.shape != ():
        raise ShapeError("grad_check needs a scalar-valued function")
    zero_grads(inputs)
    backward(out)
    analytic = [np.zeros_like(i.data) if i.grad is None else i.grad.copy()
                for i in inputs]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i, inp in enumerate(inputs):
        flat = inp.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            coords = rng.choice(flat.size, size=max_entries, replace=False)
        for j in coords:
            orig = flat[j]
            flat[j] = orig + eps
            hi = fn(*inputs).item()
            flat[j] = orig - eps
            lo = fn(*inputs).item()
            flat[j] = orig
            num = (hi - lo) / (2.0 * eps)
            ana = analytic[i].reshape(-1)[j]
            rel = abs(ana - num) / max(1.0, abs(ana), abs(num))
            worst = max(worst, rel)
    return worst
