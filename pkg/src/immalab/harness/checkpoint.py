"""JSON checkpoints with base64 little-endian float32 payloads.

Layout::

    {"format": "imma-ckpt-v1",
     "metadata": {"role": ..., "method": ..., "target": ..., "seed": ..., "command": ...},
     "params": {name: {"shape": [...], "dtype": "f32le", "data": "<base64>"}}}
"""

from __future__ import annotations

import base64
import binascii
import json
from pathlib import Path

import numpy as np

from ..autodiff import ParamStore

FORMAT = "imma-ckpt-v1"
ROLES = ("pretrained", "erased", "immunized", "adapter", "classifier")
_TOP = {"format", "metadata", "params"}
_F32LE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


class FormatTagError(CheckpointError):
    pass


class PayloadError(CheckpointError):
    """A parameter's payload is corrupt; ``name`` says which one."""

    def __init__(self, name, msg):
        super().__init__(f"parameter {name!r}: {msg}")
        self.name = name


def encode_array(a) -> dict:
    a = np.asarray(a, dtype=np.float32)
    return {
        "shape": list(a.shape),
        "dtype": "f32le",
        "data": base64.b64encode(a.astype(_F32LE).tobytes()).decode("ascii"),
    }


def decode_array(name, rec) -> np.ndarray:
    if not isinstance(rec, dict) or set(rec) != {"shape", "dtype", "data"}:
        raise PayloadError(name, "expected keys shape, dtype, data")
    if rec["dtype"] != "f32le":
        raise PayloadError(name, f"unsupported dtype {rec['dtype']!r}")
    shape = rec["shape"]
    if not isinstance(shape, list) or not all(isinstance(d, int) and d >= 0 for d in shape):
        raise PayloadError(name, f"bad shape {shape!r}")
    try:
        raw = base64.b64decode(rec["data"], validate=True)
    except (binascii.Error, ValueError, TypeError) as e:
        raise PayloadError(name, f"truncated or invalid base64 ({e})") from None
    n = int(np.prod(shape, dtype=np.int64))
    if len(raw) != 4 * n:
        raise PayloadError(name, f"payload holds {len(raw)} bytes, shape {shape} needs {4 * n}")
    return np.frombuffer(raw, dtype=_F32LE).astype(np.float32).reshape(shape)


def save_checkpoint(store, metadata: dict, path):
    """Write ``store`` (ParamStore or name -> array) with ``metadata`` to ``path``."""
    role = metadata.get("role")
    if role not in ROLES:
        raise CheckpointError(f"metadata.role must be one of {ROLES}, got {role!r}")
    arrays = store.arrays() if isinstance(store, ParamStore) else store
    doc = {
        "format": FORMAT,
        "metadata": metadata,
        "params": {n: encode_array(arrays[n]) for n in sorted(arrays)},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(doc, sort_keys=True, indent=1) + "\n"
    path.write_text(text, encoding="utf-8", newline="\n")
    return path


def _read(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: not valid JSON ({e})") from None
    if not isinstance(doc, dict):
        raise CheckpointError(f"{path}: top level must be an object")
    extra = set(doc) - _TOP
    if extra:
        raise CheckpointError(f"{path}: unknown top-level fields {sorted(extra)}")
    if doc.get("format") != FORMAT:
        raise FormatTagError(f"{path}: format tag {doc.get('format')!r}, expected {FORMAT!r}")
    missing = _TOP - set(doc)
    if missing:
        raise CheckpointError(f"{path}: missing fields {sorted(missing)}")
    return doc


def load_checkpoint(path, metadata_only=False):
    """Return (ParamStore, metadata), or just metadata with ``metadata_only``."""
    doc = _read(path)
    if metadata_only:
        return doc["metadata"]
    params = doc["params"]
    if not isinstance(params, dict):
        raise CheckpointError(f"{path}: params must be an object")
    store = ParamStore({n: decode_array(n, rec) for n, rec in params.items()})
    return store, doc["metadata"]


def read_metadata(path) -> dict:
    return load_checkpoint(path, metadata_only=True)
