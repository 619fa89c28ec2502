"""Checkpoint directories: ``manifest.txt`` + one raw little-endian file per tensor.

Manifest line format: ``<name> <shape> <dtype>`` where shape is ``AxBxC``
(``-`` for scalars) and dtype is one of ``float32``, ``int32``, ``uint32``
or ``bool`` (stored as 4-byte unsigned). Free-form metadata goes to
``meta.json``.
"""

from __future__ import annotations

import json
import shutil
import tempfile
from pathlib import Path

import numpy as np

MANIFEST = "manifest.txt"
META = "meta.json"
_STORED = {"float32": "<f4", "int32": "<i4", "uint32": "<u4", "bool": "<u4"}


class MissingArtifact(FileNotFoundError):
    pass


def _shape_str(shape) -> str:
    return "x".join(str(s) for s in shape) if shape else "-"


def _parse_shape(text: str) -> tuple[int, ...]:
    return () if text == "-" else tuple(int(s) for s in text.split("x"))


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write atomically: build in a sibling temp dir, then swap into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=path.name + ".", dir=path.parent))
    lines = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dtype = str(arr.dtype)
        if dtype not in _STORED:
            raise TypeError(f"tensor {name!r} has unsupported dtype {dtype}")
        if any(c.isspace() for c in name):
            raise ValueError(f"tensor name {name!r} contains whitespace")
        np.ascontiguousarray(arr, dtype=_STORED[dtype]).tofile(tmp / f"{name}.bin")
        lines.append(f"{name} {_shape_str(arr.shape)} {dtype}")
    (tmp / MANIFEST).write_text("\n".join(lines) + "\n")
    (tmp / META).write_text(json.dumps(meta or {}, indent=1, sort_keys=True))
    if path.exists():
        old = path.with_name(path.name + ".old")
        shutil.rmtree(old, ignore_errors=True)
        path.rename(old)
        tmp.rename(path)
        shutil.rmtree(old)
    else:
        tmp.rename(path)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not (path / MANIFEST).exists():
        raise MissingArtifact(f"no checkpoint manifest in {path}")
    tensors = {}
    for line in (path / MANIFEST).read_text().splitlines():
        if not line.strip():
            continue
        name, shape, dtype = line.split()
        raw = np.fromfile(path / f"{name}.bin", dtype=_STORED[dtype])
        arr = raw.reshape(_parse_shape(shape))
        tensors[name] = arr.astype(bool) if dtype == "bool" else arr.astype(dtype)
    meta = json.loads((path / META).read_text()) if (path / META).exists() else {}
    return tensors, meta
