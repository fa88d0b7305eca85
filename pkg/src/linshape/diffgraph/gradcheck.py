"""Central finite-difference check of reverse-mode gradients."""
from __future__ import annotations

import numpy as np

from .core import Tape, Tensor, run_backward, run_forward


def _scalar(out):
    return float(np.sum(out.data))


def finite_difference_check(fn, inputs=(), params=None, eps=1e-4, names=None, mode="train",
                            check_inputs=True, max_entries=None, rng=None, atol=1e-7):
    """Max relative error between analytic and central-difference gradients.

    ``fn(*inputs)`` must return a scalar Tensor.  Batchnorm running stats are
    restored after every evaluation so the probe points see the same graph.
    Relative error per entry is ``|a - n| / max(|a|, |n|, 1e-8)``; entries
    where both are below ``atol`` count as exact (e.g. a bias feeding a
    batchnorm has a true gradient of zero, and both sides are round-off).
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    saved_buffers = {k: v.copy() for k, v in params.buffers.items()} if params is not None else {}

    def evaluate(arrays):
        if params is not None:
            for k, v in saved_buffers.items():
                params.buffers[k] = v.copy()
        with Tape(mode=mode, record=False):
            return _scalar(fn(*[Tensor(a) for a in arrays]))

    tensors = [Tensor(a, requires_grad=check_inputs) for a in inputs]
    if params is not None:
        params.zero_grad()
    out, tape = run_forward(fn, tensors, params, mode=mode)
    result = run_backward(tape, out, accumulate=False)
    if params is not None:
        for k, v in saved_buffers.items():
            params.buffers[k] = v.copy()

    rng = rng or np.random.default_rng(0)
    worst = 0.0

    def probe(arr, analytic, setter):
        nonlocal worst
        flat = np.arange(arr.size)
        if max_entries is not None and arr.size > max_entries:
            flat = rng.choice(arr.size, size=max_entries, replace=False)
        for i in flat:
            idx = np.unravel_index(i, arr.shape)
            orig = arr[idx]
            arr[idx] = orig + eps
            up = setter()
            arr[idx] = orig - eps
            down = setter()
            arr[idx] = orig
            num = (up - down) / (2 * eps)
            a = 0.0 if analytic is None else float(analytic[idx])
            if abs(a) < atol and abs(num) < atol:
                continue
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-8))

    if params is not None:
        for name in (names if names is not None else [p.name for p in params if p.trainable]):
            p = params[name]
            if name not in tape.params_used:
                continue
            original = p.value
            arr = original.copy()

            def setter(p=p, arr=arr):
                p.value = arr
                return evaluate(inputs)

            probe(arr, result["params"].get(name), setter)
            p.value = original
    if check_inputs:
        for k, arr in enumerate(inputs):
            probe(arr, result["inputs"][k], lambda: evaluate(inputs))
    return worst
