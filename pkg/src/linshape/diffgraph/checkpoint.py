"""Parameter checkpoints: a ``.npz`` archive of name -> array with a JSON
header entry ``__meta__`` carrying the format version."""
from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from ..errors import FormatError

FORMAT_VERSION = 1


def save_params(params, path, extra: dict | None = None):
    arrays = params.state_dict()
    meta = {"format": "linshape-params", "format_version": FORMAT_VERSION,
            "shapes": {k: list(v.shape) for k, v in arrays.items()}}
    if extra:
        meta["extra"] = extra
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def load_arrays(path):
    """Return ``(arrays, meta)`` from a checkpoint file."""
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: not a parameter checkpoint ({exc})") from exc
    if "__meta__" not in arrays:
        raise FormatError(f"{path}: missing checkpoint header")
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    if meta.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
    return arrays, meta


def load_params(params, path):
    arrays, meta = load_arrays(path)
    params.load_state_dict(arrays)
    return meta
