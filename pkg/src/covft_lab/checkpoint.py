"""Flat named-parameter checkpoints.

Each tensor, in sorted name order, is a text header ``name d0,d1,...\\n``
followed by its values as little-endian float64. A scalar has shape ``-``.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import numpy as np

from .autodiff import Tensor
from .errors import InputError

MAGIC = b"covft-ckpt 1\n"


def _array(v) -> np.ndarray:
    return v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)


def dumps(params: Mapping[str, Tensor | np.ndarray]) -> bytes:
    parts = [MAGIC]
    for name in sorted(params):
        if not name or any(c.isspace() for c in name):
            raise InputError(f"parameter name {name!r} cannot be stored")
        arr = _array(params[name])
        shape = ",".join(str(n) for n in arr.shape) or "-"
        parts.append(f"{name} {shape}\n".encode())
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if not blob.startswith(MAGIC):
        raise InputError("not a covft-lab checkpoint")
    out: dict[str, np.ndarray] = {}
    pos = len(MAGIC)
    while pos < len(blob):
        end = blob.find(b"\n", pos)
        if end < 0:
            raise InputError("truncated checkpoint header")
        try:
            name, shape_txt = blob[pos:end].decode().split(" ")
            shape = () if shape_txt == "-" else tuple(int(n) for n in shape_txt.split(","))
        except ValueError as exc:
            raise InputError(f"malformed checkpoint header at byte {pos}") from exc
        count = int(np.prod(shape)) if shape else 1
        start, stop = end + 1, end + 1 + 8 * count
        if stop > len(blob):
            raise InputError(f"truncated data for {name!r}")
        out[name] = np.frombuffer(blob[start:stop], dtype="<f8").reshape(shape).astype(np.float64)
        pos = stop
    return out


def save_checkpoint(path: str | Path, params: Mapping[str, Tensor | np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(params))
    return path


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def restore(params: Mapping[str, Tensor], saved: Mapping[str, np.ndarray]) -> None:
    """Copy saved values into live parameters; names and shapes must match exactly."""
    if set(params) != set(saved):
        missing = sorted(set(params) ^ set(saved))[:5]
        raise InputError(f"checkpoint parameter names differ, e.g. {missing}")
    for name, t in params.items():
        if t.shape != saved[name].shape:
            raise InputError(f"shape mismatch for {name!r}: {t.shape} vs {saved[name].shape}")
        t.data = saved[name].copy()
