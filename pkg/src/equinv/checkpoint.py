"""Directory checkpoints: a JSON manifest plus one float32 blob per array.

Layout::

    ckpt/
      manifest.json        {"format_version", "config", "arrays": {name: {...}}}
      arrays/<name>.f32    little-endian float32, C order
"""
from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np
import torch

from .errors import CorruptCheckpoint, InvalidArgument, UnsupportedVersion

FORMAT_VERSION = "1"
_SAFE = re.compile(r"[^A-Za-z0-9_.-]")


def _as_array(v):
    if torch.is_tensor(v):
        v = v.detach().cpu().numpy()
    return np.array(v, dtype="<f4", order="C")


def save_checkpoint(arrays, path, config=None, meta=None):
    """Write ``{name: array}`` under directory ``path``."""
    root = Path(path)
    (root / "arrays").mkdir(parents=True, exist_ok=True)
    index = {}
    used = set()
    for name, value in arrays.items():
        arr = _as_array(value)
        fname = _SAFE.sub("_", name) + ".f32"
        while fname in used:
            fname = "_" + fname
        used.add(fname)
        (root / "arrays" / fname).write_bytes(arr.tobytes())
        index[name] = {"file": f"arrays/{fname}", "shape": list(arr.shape), "nbytes": arr.nbytes}
    manifest = {"format_version": FORMAT_VERSION, "config": config or {}, "meta": meta or {},
                "arrays": index}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def load_checkpoint(path):
    """Returns ``(arrays, manifest)`` with arrays as float32 numpy."""
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise CorruptCheckpoint(f"missing manifest in {root}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptCheckpoint(f"unreadable manifest: {exc}") from exc
    version = manifest.get("format_version")
    if version is None:
        raise CorruptCheckpoint("manifest has no format_version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"checkpoint version {version!r}, expected {FORMAT_VERSION!r}")
    arrays = {}
    for name, entry in manifest.get("arrays", {}).items():
        shape = tuple(int(s) for s in entry["shape"])
        expect = int(np.prod(shape, dtype=np.int64)) * 4
        blob_path = root / entry["file"]
        if not blob_path.exists():
            raise CorruptCheckpoint(f"missing blob for {name}")
        blob = blob_path.read_bytes()
        if len(blob) != expect or entry.get("nbytes", expect) != expect:
            raise CorruptCheckpoint(f"{name}: blob has {len(blob)} bytes, shape needs {expect}")
        arrays[name] = np.frombuffer(blob, dtype="<f4").reshape(shape).copy()
    return arrays, manifest


# ---------------------------------------------------------------- model helpers


def save_module(module, path, config=None, meta=None, prefix=""):
    arrays = {prefix + k: v for k, v in module.state_dict().items()}
    return save_checkpoint(arrays, path, config, meta)


def load_into(module, arrays, prefix=""):
    state = {}
    for k, ref in module.state_dict().items():
        if prefix + k not in arrays:
            raise InvalidArgument(f"checkpoint lacks {prefix + k}")
        state[k] = torch.from_numpy(arrays[prefix + k]).to(ref.dtype).reshape(ref.shape)
    module.load_state_dict(state)
    return module


def encoder_state_arrays(state):
    out = {f"query.{k}": v for k, v in state.query_params.items()}
    out.update({f"key.{k}": v for k, v in state.key_params.items()})
    out["queue"] = state.queue
    return out


def encoder_state_from_arrays(arrays, momentum, tau, head=0):
    from .invariant import EncoderState

    q = {k[6:]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("query.")}
    k_ = {k[4:]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("key.")}
    return EncoderState(q, k_, momentum, torch.from_numpy(arrays["queue"]), head, tau)


__all__ = ["save_checkpoint", "load_checkpoint", "save_module", "load_into", "FORMAT_VERSION"]
