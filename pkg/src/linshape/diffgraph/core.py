"""Tape-based reverse-mode differentiation over numpy arrays.

Ops executed inside an active :class:`Tape` append a node (output, inputs,
backward closure) in execution order, i.e. a Wengert list.  Backward walks
the list in reverse.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidGraphError, NumericError, StaleTapeError

_local = threading.local()


class Tensor:
    __slots__ = ("data", "requires_grad", "param", "name")

    def __init__(self, data, requires_grad=False, param=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.param = param
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f" param={self.param.name}" if self.param is not None else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # operator sugar, implemented in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __getitem__(self, idx):
        from . import ops
        return ops.getitem(self, idx)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


@dataclass
class Param:
    name: str
    value: np.ndarray
    grad: np.ndarray = None
    trainable: bool = True
    version: int = 0

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    def assign(self, value):
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.value.shape:
            raise InvalidGraphError(f"shape mismatch assigning {self.name}: {value.shape} vs {self.value.shape}")
        self.value = value.copy()
        self.version += 1


class ParamSet:
    """Named trainable parameters plus non-trainable buffers (batchnorm
    running statistics)."""

    def __init__(self):
        self.params: dict[str, Param] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add(self, name, value, trainable=True) -> Param:
        if name in self.params:
            raise InvalidGraphError(f"duplicate parameter name {name!r}")
        p = Param(name, np.array(value, dtype=np.float64), trainable=trainable)
        self.params[name] = p
        return p

    def add_buffer(self, name, value):
        self.buffers[name] = np.array(value, dtype=np.float64)

    def __getitem__(self, name) -> Param:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params.values())

    def __len__(self):
        return len(self.params)

    def names(self, prefix=""):
        return [n for n in self.params if n.startswith(prefix)]

    def tensor(self, name) -> Tensor:
        """Leaf tensor bound to a parameter; records its version on the tape."""
        p = self.params[name]
        tape = current_tape()
        if tape is not None and tape.record:
            tape.params_used[p.name] = (p, p.version)
        return Tensor(p.value, requires_grad=p.trainable, param=p, name=name)

    def zero_grad(self):
        for p in self.params.values():
            p.grad[...] = 0.0

    def count(self, prefix="", trainable_only=True) -> int:
        return int(sum(p.value.size for n, p in self.params.items()
                       if n.startswith(prefix) and (p.trainable or not trainable_only)))

    def state_dict(self):
        out = {n: p.value.copy() for n, p in self.params.items()}
        out.update({f"buffer:{n}": v.copy() for n, v in self.buffers.items()})
        return out

    def load_state_dict(self, state):
        for key, value in state.items():
            if key.startswith("buffer:"):
                self.buffers[key[len("buffer:"):]] = np.array(value, dtype=np.float64)
            elif key in self.params:
                self.params[key].assign(value)
            else:
                self.add(key, value)


@dataclass
class Node:
    op: str
    out: Tensor
    inputs: tuple
    backward: object  # callable(grad_out) -> tuple of grads (None allowed)


@dataclass
class Tape:
    """Recording context.  ``mode`` is 'train' or 'eval' (batchnorm reads it)."""

    mode: str = "train"
    record: bool = True
    check_finite: bool = True
    nodes: list = field(default_factory=list)
    params_used: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {self.mode!r}")

    def __enter__(self):
        stack = _stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    @property
    def training(self):
        return self.mode == "train"


def _stack():
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def current_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def is_training() -> bool:
    tape = current_tape()
    return tape is not None and tape.training


def check_finite(op, arr):
    tape = current_tape()
    if tape is not None and not tape.check_finite:
        return
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite value produced by op '{op}'", where=op)


def record(op, out: Tensor, inputs, backward):
    """Register ``out`` as produced by ``op``; called by every primitive."""
    check_finite(op, out.data)
    tape = current_tape()
    if tape is None or not tape.record:
        return out
    if any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(Node(op, out, tuple(inputs), backward))
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def run_forward(fn, inputs=(), params: ParamSet | None = None, mode="train", check_finite=True):
    """Evaluate ``fn(*input_tensors)`` while recording a tape.

    ``inputs`` entries that should receive gradients can be passed as
    ``Tensor(..., requires_grad=True)``.  Returns ``(outputs, tape)``.
    """
    tape = Tape(mode=mode, record=True, check_finite=check_finite)
    tensors = [as_tensor(x) for x in inputs]
    with tape:
        outputs = fn(*tensors)
    tape.inputs = tensors
    tape.params = params
    return outputs, tape


def run_backward(tape: Tape, output: Tensor, output_gradient=None, accumulate=True):
    """Reverse pass from ``output``.

    Parameter gradients are accumulated into ``Param.grad`` (when
    ``accumulate``); returns ``{"params": {name: grad}, "inputs": [grad or
    None per run_forward input]}``.
    """
    if not tape.record:
        raise InvalidGraphError("tape was not recorded")
    for name, (p, version) in tape.params_used.items():
        if p.version != version:
            raise StaleTapeError(f"parameter {name!r} changed since the forward pass")
    if output_gradient is None:
        output_gradient = np.ones_like(output.data)
    output_gradient = np.asarray(output_gradient, dtype=np.float64)
    if output_gradient.shape != output.data.shape:
        raise InvalidGraphError(f"output gradient shape {output_gradient.shape} != {output.data.shape}")

    grads = {id(output): output_gradient}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            if gi.shape != t.data.shape:
                raise InvalidGraphError(f"op '{node.op}' produced gradient of shape {gi.shape} for input {t.data.shape}")
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi

    param_grads = {}
    seen = set()
    for node in tape.nodes:
        for t in node.inputs:
            if isinstance(t, Tensor) and t.param is not None and id(t) in grads and id(t) not in seen:
                seen.add(id(t))
                g = grads[id(t)]
                name = t.param.name
                param_grads[name] = param_grads[name] + g if name in param_grads else g
    if accumulate:
        for name, g in param_grads.items():
            tape.params_used[name][0].grad += g
    inputs = getattr(tape, "inputs", [])
    return {"params": param_grads, "inputs": [grads.get(id(t)) for t in inputs]}
