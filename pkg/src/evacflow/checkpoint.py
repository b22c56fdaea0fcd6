"""Versioned checkpoint files.

Layout: a numpy ``.npz`` archive (uncompressed) holding

* ``__meta__``: a 0-d unicode array with a JSON document
  ``{"format": "evacflow-checkpoint", "version": 1, "kind": ..., ...}``
* ``param/<name>``: float64 parameter arrays
* ``adam/<name>/m``, ``adam/<name>/v``: ADAM moment buffers, with the step
  counters and hyperparameters stored in the metadata under ``"adam"``
* ``extra/<name>``: any other float64 arrays (normalization statistics...)

Arrays are stored raw, so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import hashlib
import io
import json
from pathlib import Path

import numpy as np

from .autodiff import AdamState

FORMAT = "evacflow-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def params_digest(params: dict[str, np.ndarray]) -> str:
    """SHA-256 over parameter names, shapes and raw bytes, in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype=np.float64)
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save_checkpoint(
    path,
    params: dict[str, np.ndarray],
    meta: dict,
    adam: dict[str, AdamState] | None = None,
    extra: dict[str, np.ndarray] | None = None,
) -> str:
    """Write a checkpoint and return the parameter digest."""
    arrays: dict[str, np.ndarray] = {}
    for name, value in params.items():
        arrays[f"param/{name}"] = np.asarray(value, dtype=np.float64)
    adam_meta = {}
    for name, st in (adam or {}).items():
        arrays[f"adam/{name}/m"] = st.m
        arrays[f"adam/{name}/v"] = st.v
        adam_meta[name] = {
            "step": st.step,
            "lr": st.lr,
            "beta1": st.beta1,
            "beta2": st.beta2,
            "eps": st.eps,
        }
    for name, value in (extra or {}).items():
        arrays[f"extra/{name}"] = np.asarray(value, dtype=np.float64)

    digest = params_digest(params)
    header = dict(meta)
    header.update(format=FORMAT, version=VERSION, adam=adam_meta, params_sha256=digest)
    arrays["__meta__"] = np.array(json.dumps(header, sort_keys=True))

    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())
    return digest


def load_checkpoint(path):
    """Return ``(params, meta, adam_states, extra)``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        if "__meta__" not in data.files:
            raise CheckpointError(f"{path}: missing metadata")
        meta = json.loads(str(data["__meta__"]))
        if meta.get("format") != FORMAT:
            raise CheckpointError(f"{path}: not an {FORMAT} file")
        if meta.get("version") != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        params, extra, moments = {}, {}, {}
        for key in data.files:
            if key.startswith("param/"):
                params[key[6:]] = data[key].copy()
            elif key.startswith("extra/"):
                extra[key[6:]] = data[key].copy()
            elif key.startswith("adam/"):
                _, name, which = key.split("/")
                moments.setdefault(name, {})[which] = data[key].copy()
    adam = {}
    for name, hyper in meta.get("adam", {}).items():
        adam[name] = AdamState(moments[name]["m"], moments[name]["v"], **hyper)
    if params_digest(params) != meta["params_sha256"]:
        raise CheckpointError(f"{path}: parameter digest mismatch")
    return params, meta, adam, extra
