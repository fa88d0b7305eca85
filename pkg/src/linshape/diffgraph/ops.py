"""Differentiable primitives.

Each op computes its output with numpy and registers a closure mapping the
output gradient to input gradients.  Shapes follow the (batch, points,
channels) convention; broadcasting is limited to what numpy does for
elementwise ops.
"""
from __future__ import annotations

import numpy as np

from .. import kernels
from ..errors import InvalidGraphError
from ..geometry import affine_points as _affine_np
from .core import Tensor, as_tensor, current_tape, is_training, record


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise InvalidGraphError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    out = Tensor(a.data + b.data)
    return record("add", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    out = Tensor(a.data - b.data)
    return record("sub", out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    out = Tensor(a.data * b.data)
    return record("mul", out, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a, c: float):
    a = as_tensor(a)
    out = Tensor(a.data * c)
    return record("scale", out, (a,), lambda g: (g * c,))


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = Tensor(a.data.reshape(shape))
    except ValueError as exc:
        raise InvalidGraphError(f"reshape: cannot reshape {a.shape} to {shape}") from exc
    return record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def getitem(a, idx):
    a = as_tensor(a)
    out = Tensor(a.data[idx])

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return record("getitem", out, (a,), backward)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    except ValueError as exc:
        raise InvalidGraphError(f"concat: {exc}") from exc
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return record("concat", out, tensors, lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = Tensor(np.stack([t.data for t in tensors], axis=axis))
    except ValueError as exc:
        raise InvalidGraphError(f"stack: {exc}") from exc
    n = len(tensors)
    return record("stack", out, tensors,
                  lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def broadcast_to(a, shape):
    a = as_tensor(a)
    try:
        out = Tensor(np.broadcast_to(a.data, shape))
    except ValueError as exc:
        raise InvalidGraphError(f"broadcast_to: {exc}") from exc
    return record("broadcast_to", out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def sum(a, axis=None):
    a = as_tensor(a)
    out = Tensor(np.sum(a.data, axis=axis))

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return record("sum", out, (a,), backward)


def mean(a, axis=None):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    out = Tensor(np.mean(a.data, axis=axis))

    def backward(g):
        if axis is None:
            return (np.full(a.shape, g / n),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, a.shape).copy(),)

    return record("mean", out, (a,), backward)


def linear(x, W, b=None):
    """``x @ W + b`` over the last axis."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise InvalidGraphError(f"linear: input width {x.shape[-1]} vs weight {W.shape}")
    y = x.data @ W.data
    inputs = [x, W]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise InvalidGraphError(f"linear: bias {b.shape} vs output width {W.shape[1]}")
        y = y + b.data
        inputs.append(b)
    out = Tensor(y)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        gx = (g2 @ W.data.T).reshape(x.shape) if x.requires_grad else None
        gW = x2.T @ g2
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    return record("linear", out, inputs, backward)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0))
    return record("relu", out, (x,), lambda g: (g * mask,))


class BatchNormState:
    """Running statistics for one batchnorm layer, stored as ParamSet buffers."""

    def __init__(self, params, prefix, channels, momentum=0.1, eps=1e-5):
        self.params = params
        self.prefix = prefix
        self.momentum = momentum
        self.eps = eps
        self.channels = channels
        if f"{prefix}.running_mean" not in params.buffers:
            params.add_buffer(f"{prefix}.running_mean", np.zeros(channels))
            params.add_buffer(f"{prefix}.running_var", np.ones(channels))

    @property
    def running_mean(self):
        return self.params.buffers[f"{self.prefix}.running_mean"]

    @property
    def running_var(self):
        return self.params.buffers[f"{self.prefix}.running_var"]

    def update(self, mean, var, n):
        m = self.momentum
        unbiased = var * n / max(n - 1, 1)
        self.params.buffers[f"{self.prefix}.running_mean"] = (1 - m) * self.running_mean + m * mean
        self.params.buffers[f"{self.prefix}.running_var"] = (1 - m) * self.running_var + m * unbiased


def batchnorm(x, gamma, beta, state: BatchNormState, update_stats=True):
    """Per-channel normalisation over every axis but the last.

    Train mode (active tape in 'train') uses batch statistics and updates
    the running averages; otherwise the running statistics are used.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise InvalidGraphError(f"batchnorm: {C} channels vs scale {gamma.shape}")
    axes = tuple(range(x.ndim - 1))
    if is_training():
        n = x.data.size // C
        mu = x.data.mean(axis=axes)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes)
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = xc * inv
        if update_stats:
            state.update(mu, var, n)
        out = Tensor(xhat * gamma.data + beta.data)

        def backward(g):
            gb = g.sum(axis=axes)
            gg = (g * xhat).sum(axis=axes)
            dxhat = g * gamma.data
            gx = inv / n * (n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
            return gx, gg, gb
    else:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean) * inv
        out = Tensor(xhat * gamma.data + beta.data)

        def backward(g):
            return (g * gamma.data * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes))

    return record("batchnorm", out, (x, gamma, beta), backward)


def maxpool_points(x):
    """Max over the points axis (-2).  Returns ``(pooled, argmax)``; the
    first maximal index wins and receives the whole gradient."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise InvalidGraphError("maxpool_points needs a points axis")
    idx = np.argmax(x.data, axis=-2)
    out = Tensor(np.take_along_axis(x.data, idx[..., None, :], axis=-2)[..., 0, :])

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[..., None, :], g[..., None, :], axis=-2)
        return (gx,)

    record("maxpool_points", out, (x,), backward)
    return out, idx


def quat_rotation(r):
    """Rotation matrices from quaternion residuals ``(B, 3)``.

    The quaternion is ``(1, r0, r1, r2)`` normalised to unit length, so a zero
    residual gives the identity.
    """
    r = as_tensor(r)
    if r.shape[-1] != 3:
        raise InvalidGraphError(f"quat_rotation expects (..., 3), got {r.shape}")
    q_raw = np.concatenate([np.ones(r.shape[:-1] + (1,)), r.data], axis=-1)
    norm = np.sqrt((q_raw * q_raw).sum(axis=-1, keepdims=True))
    q = q_raw / norm
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(r.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    out = Tensor(R)

    def backward(G):
        g00, g01, g02 = G[..., 0, 0], G[..., 0, 1], G[..., 0, 2]
        g10, g11, g12 = G[..., 1, 0], G[..., 1, 1], G[..., 1, 2]
        g20, g21, g22 = G[..., 2, 0], G[..., 2, 1], G[..., 2, 2]
        dw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
        dx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22)
        dy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22)
        dz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21)
        gq = np.stack([dw, dx, dy, dz], axis=-1)
        # through q = q_raw / |q_raw|
        g_raw = (gq - q * (gq * q).sum(axis=-1, keepdims=True)) / norm
        return (g_raw[..., 1:],)

    return record("quat_rotation", out, (r,), backward)


def affine_points(u, L, t):
    """Apply per-sample affine maps: ``u`` (M,3) or (B,M,3), ``L`` (B,3,3),
    ``t`` (B,3) -> (B,M,3)."""
    u, L, t = as_tensor(u), as_tensor(L), as_tensor(t)
    if L.shape[-2:] != (3, 3) or t.shape[-1] != 3 or u.shape[-1] != 3:
        raise InvalidGraphError(f"affine_points: bad shapes {u.shape}, {L.shape}, {t.shape}")
    out = Tensor(_affine_np(L.data, t.data, u.data))

    def backward(g):
        # g: (B, M, 3)
        ub = np.broadcast_to(u.data, g.shape)
        gu = np.einsum("bmj,bjk->bmk", g, L.data)
        if u.ndim == 2:
            gu = gu.sum(axis=0)
        gL = np.einsum("bmj,bmk->bjk", g, ub)
        gt = g.sum(axis=1)
        return gu, gL, gt

    return record("affine_points", out, (u, L, t), backward)


def family_points(c, a, V):
    """Numpy ``c + sum_i a_i V_i``, accumulated in index order (shared with
    the non-differentiable path so results are bitwise equal)."""
    a = np.asarray(a)
    out = np.broadcast_to(c, a.shape[:-1] + c.shape).copy() if a.ndim > 1 else c.copy()
    for i in range(a.shape[-1]):
        if a.ndim > 1:
            out = out + a[:, i, None, None] * V[i]
        else:
            out = out + a[i] * V[i]
    return out


def combine_basis(c, a, V):
    """Linear-family elements: ``c`` (M,3), ``a`` (B,D), ``V`` (D,M,3) ->
    (B,M,3)."""
    c, a, V = as_tensor(c), as_tensor(a), as_tensor(V)
    if a.ndim != 2 or V.ndim != 3 or a.shape[1] != V.shape[0] or V.shape[1:] != c.shape:
        raise InvalidGraphError(f"combine_basis: shapes {c.shape}, {a.shape}, {V.shape}")
    out = Tensor(family_points(c.data, a.data, V.data))

    def backward(g):
        gc = g.sum(axis=0)
        ga = np.einsum("bmk,dmk->bd", g, V.data)
        gV = np.einsum("bd,bmk->dmk", a.data, g)
        return gc, ga, gV

    return record("combine_basis", out, (c, a, V), backward)


def _scatter_rows(values, index, n):
    """out[p, index[p, j]] += values[p, j] for (P, m, 3) values."""
    P = values.shape[0]
    flat = (np.arange(P)[:, None] * n + index).ravel()
    out = np.empty((P * n, 3))
    for c in range(3):
        out[:, c] = np.bincount(flat, weights=values[..., c].ravel(), minlength=P * n)
    return out.reshape(P, n, 3)


def chamfer_pairs(rec, x, rec_labels=None, x_labels=None):
    """Per-pair Chamfer distances between ``rec`` and ``x`` (both (P,M,3)).

    With labels, nearest neighbours are restricted to equal labels; every
    point must then have at least one same-label partner.
    """
    rec, x = as_tensor(rec), as_tensor(x)
    if rec.ndim != 3 or x.ndim != 3 or rec.shape[0] != x.shape[0]:
        raise InvalidGraphError(f"chamfer_pairs: shapes {rec.shape} and {x.shape}")
    if rec_labels is None:
        dr, ir, dx, ix = kernels.batch_nn(rec.data, x.data)
    else:
        dr, ir, dx, ix = kernels.batch_nn_labeled(rec.data, rec_labels, x.data, x_labels)
        if (ir < 0).any() or (ix < 0).any():
            raise InvalidGraphError("chamfer_pairs: a label has no counterpart in the other cloud")
    P, m1 = rec.shape[:2]
    m2 = x.shape[1]
    out = Tensor(dr.mean(axis=1) + dx.mean(axis=1))

    def backward(g):
        rows = np.arange(P)[:, None]
        # term 1: mean_i |rec_i - x_{ir(i)}|^2
        diff1 = rec.data - x.data[rows, ir]
        w1 = (2.0 / m1) * g[:, None, None]
        # term 2: mean_j |x_j - rec_{ix(j)}|^2
        diff2 = x.data - rec.data[rows, ix]
        w2 = (2.0 / m2) * g[:, None, None]
        grec = w1 * diff1 + _scatter_rows(-w2 * diff2, ix, m1)
        gx = None
        if x.requires_grad:
            gx = w2 * diff2 + _scatter_rows(-w1 * diff1, ir, m2)
        return grec, gx

    return record("chamfer_pairs", out, (rec, x), backward)


def min_select(d, mask=None):
    """Row-wise minimum of ``d`` (B,K) restricted to ``mask`` (True = allowed).

    Returns ``(values, argmin)``; ties go to the lowest column and only the
    selected entry receives gradient.
    """
    d = as_tensor(d)
    vals = d.data if mask is None else np.where(mask, d.data, np.inf)
    idx = np.argmin(vals, axis=1)
    rows = np.arange(d.shape[0])
    out = Tensor(d.data[rows, idx])

    def backward(g):
        gd = np.zeros_like(d.data)
        gd[rows, idx] = g
        return (gd,)

    record("min_select", out, (d,), backward)
    return out, idx


def no_grad(mode="eval"):
    """Context that evaluates ops without recording."""
    from .core import Tape

    return Tape(mode=mode, record=False)


__all__ = [
    "add", "sub", "mul", "scale", "reshape", "getitem", "concat", "stack", "broadcast_to",
    "sum", "mean", "linear", "relu", "BatchNormState", "batchnorm", "maxpool_points",
    "quat_rotation", "affine_points", "combine_basis", "family_points", "chamfer_pairs",
    "min_select", "no_grad", "current_tape",
]
