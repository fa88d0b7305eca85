"""Network components: the shared PointNet-style encoder, per-model MLP
heads, transform-family decoders and implicit displacement fields."""
from __future__ import annotations

import enum

import numpy as np

from .diffgraph import ops
from .diffgraph.core import Tape, Tensor
from .errors import InvalidInputError, NumericError
from .geometry import AffineTransform


def init_linear(params, prefix, fan_in, fan_out, rng, zero=False):
    """Register ``{prefix}.weight`` (fan_in, fan_out) and ``{prefix}.bias``.

    Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) unless ``zero``.
    """
    if zero:
        w = np.zeros((fan_in, fan_out))
        b = np.zeros(fan_out)
    else:
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = rng.uniform(-bound, bound, size=fan_out)
    params.add(f"{prefix}.weight", w)
    params.add(f"{prefix}.bias", b)


def apply_linear(params, prefix, x):
    return ops.linear(x, params.tensor(f"{prefix}.weight"), params.tensor(f"{prefix}.bias"))


class TransformFamily(enum.Enum):
    RIGID6 = ("rigid6", 6)
    TRANS_ISO_SCALE4 = ("trans_iso_scale4", 4)
    TRANS_ANISO_SCALE6 = ("trans_aniso_scale6", 6)
    LINEAR9 = ("linear9", 9)
    AFFINE12 = ("affine12", 12)

    def __init__(self, key, raw_dim):
        self.key = key
        self.raw_dim = raw_dim

    @classmethod
    def parse(cls, value) -> "TransformFamily":
        if isinstance(value, cls):
            return value
        for fam in cls:
            if fam.key == str(value).lower() or fam.name == str(value).upper():
                return fam
        raise InvalidInputError(f"unknown transform family {value!r}")


_EYE = np.eye(3)


def decode_transform_graph(family: TransformFamily, raw):
    """Differentiable decoding of raw head outputs ``(B, raw_dim)`` into
    ``(linear (B,3,3), translation (B,3))``.  Zero raw decodes to identity.

    Layout: transform parameters first, translation (when present) last.
    """
    raw = ops.Tensor(raw) if not isinstance(raw, Tensor) else raw
    if raw.ndim != 2 or raw.shape[1] != family.raw_dim:
        raise InvalidInputError(f"{family.key} expects raw vectors of length {family.raw_dim}, got {raw.shape}")
    B = raw.shape[0]
    zero_t = np.zeros((B, 3))
    if family is TransformFamily.RIGID6:
        L = ops.quat_rotation(raw[:, 0:3])
        t = raw[:, 3:6]
    elif family is TransformFamily.TRANS_ISO_SCALE4:
        s = ops.reshape(raw[:, 0:1], (B, 1, 1))
        L = ops.mul(ops.add(s, 1.0), _EYE)
        t = raw[:, 1:4]
    elif family is TransformFamily.TRANS_ANISO_SCALE6:
        s = ops.reshape(raw[:, 0:3], (B, 1, 3))
        L = ops.mul(ops.add(s, 1.0), _EYE)
        t = raw[:, 3:6]
    elif family is TransformFamily.LINEAR9:
        L = ops.add(ops.reshape(raw[:, 0:9], (B, 3, 3)), _EYE)
        t = zero_t
    else:
        L = ops.add(ops.reshape(raw[:, 0:9], (B, 3, 3)), _EYE)
        t = raw[:, 9:12]
    return L, t


def decode_transform(family, raw) -> AffineTransform:
    family = TransformFamily.parse(family)
    raw = np.asarray(raw, dtype=np.float64).reshape(1, -1)
    if raw.shape[1] != family.raw_dim:
        raise InvalidInputError(f"{family.key} expects {family.raw_dim} raw values, got {raw.shape[1]}")
    with Tape(mode="eval", record=False):
        L, t = decode_transform_graph(family, raw)
    L = np.asarray(L.data if isinstance(L, Tensor) else L)
    t = np.asarray(t.data if isinstance(t, Tensor) else t)
    if not (np.isfinite(L).all() and np.isfinite(t).all()):
        raise NumericError("decoded transform is not finite", where="decode_transform")
    return AffineTransform(L[0], t[0])


class SharedEncoder:
    """Per-point linear+batchnorm+ReLU stages followed by a max-pool."""

    def __init__(self, params, rng, prefix="enc", widths=(64, 128, 1024), momentum=0.1, eps=1e-5):
        self.params = params
        self.prefix = prefix
        self.widths = tuple(widths)
        self.bn = []
        fan_in = 3
        for i, w in enumerate(self.widths):
            init_linear(params, f"{prefix}.fc{i}", fan_in, w, rng)
            params.add(f"{prefix}.bn{i}.weight", np.ones(w))
            params.add(f"{prefix}.bn{i}.bias", np.zeros(w))
            self.bn.append(ops.BatchNormState(params, f"{prefix}.bn{i}", w, momentum, eps))
            fan_in = w

    @property
    def width(self):
        return self.widths[-1]

    def pointwise(self, x):
        h = x
        for i in range(len(self.widths)):
            h = apply_linear(self.params, f"{self.prefix}.fc{i}", h)
            h = ops.batchnorm(h, self.params.tensor(f"{self.prefix}.bn{i}.weight"),
                              self.params.tensor(f"{self.prefix}.bn{i}.bias"), self.bn[i])
            h = ops.relu(h)
        return h

    def __call__(self, x):
        """``x`` (B, M, 3) -> global feature (B, width)."""
        g, _ = ops.maxpool_points(self.pointwise(x))
        return g


class MLPHead:
    """in -> hidden (ReLU) -> out.  With ``per_output_final`` every output
    unit has its own final layer ``{prefix}.out{i}`` so dimensions can be
    unfrozen one at a time."""

    def __init__(self, params, rng, prefix, in_dim, out_dim, hidden=128, zero_final=True,
                 per_output_final=False):
        self.params = params
        self.prefix = prefix
        self.out_dim = out_dim
        self.per_output_final = per_output_final
        init_linear(params, f"{prefix}.fc1", in_dim, hidden, rng)
        if per_output_final:
            for i in range(out_dim):
                init_linear(params, f"{prefix}.out{i}", hidden, 1, rng, zero=zero_final)
        else:
            init_linear(params, f"{prefix}.fc2", hidden, out_dim, rng, zero=zero_final)

    def final_names(self, dims=None):
        if not self.per_output_final:
            return [f"{self.prefix}.fc2.weight", f"{self.prefix}.fc2.bias"]
        dims = range(self.out_dim) if dims is None else dims
        return [f"{self.prefix}.out{i}.{k}" for i in dims for k in ("weight", "bias")]

    def __call__(self, g, n_out=None):
        h = ops.relu(apply_linear(self.params, f"{self.prefix}.fc1", g))
        if not self.per_output_final:
            return apply_linear(self.params, f"{self.prefix}.fc2", h)
        n_out = self.out_dim if n_out is None else n_out
        outs = [apply_linear(self.params, f"{self.prefix}.out{i}", h) for i in range(n_out)]
        return ops.concat(outs, axis=-1) if len(outs) > 1 else outs[0]


class ImplicitField:
    """MLP R^3 -> 128 -> 128 -> R^3 mapping a location to a displacement."""

    def __init__(self, params, rng, prefix, hidden=128, zero_final=True):
        self.params = params
        self.prefix = prefix
        init_linear(params, f"{prefix}.fc1", 3, hidden, rng)
        init_linear(params, f"{prefix}.fc2", hidden, hidden, rng)
        init_linear(params, f"{prefix}.fc3", hidden, 3, rng, zero=zero_final)

    def hidden(self, p):
        h = ops.relu(apply_linear(self.params, f"{self.prefix}.fc1", p))
        return ops.relu(apply_linear(self.params, f"{self.prefix}.fc2", h))

    def __call__(self, p):
        return apply_linear(self.params, f"{self.prefix}.fc3", self.hidden(p))

    def lipschitz_bound(self):
        """Product of the layers' spectral norms (ReLU is 1-Lipschitz)."""
        out = 1.0
        for layer in ("fc1", "fc2", "fc3"):
            out *= np.linalg.norm(self.params[f"{self.prefix}.{layer}.weight"].value, 2)
        return out


def eval_field(field: ImplicitField, p):
    """Displacement at 3D location(s) ``p`` (shape (3,) or (n, 3))."""
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    with Tape(mode="eval", record=False):
        out = field(p.reshape(-1, 3)).data
    return out[0] if single else out
