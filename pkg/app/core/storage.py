"""Atomic file writes and raw float64 payloads."""

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Tuple, Union

import numpy as np

from app.core.errors import CorruptPayloadError

PathLike = Union[str, Path]

_LE_F64 = np.dtype("<f8")


def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    """Write ``data`` to ``path`` via a temp file in the same directory and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: PathLike, payload: Any) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path: PathLike) -> Any:
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def write_f64(path: PathLike, array: np.ndarray) -> Tuple[int, ...]:
    """
    Store ``array`` as little-endian float64 in column-major order.

    Returns:
        The shape to record in the manifest
    """
    array = np.asarray(array, dtype=np.float64)
    atomic_write_bytes(path, array.astype(_LE_F64).tobytes(order="F"))
    return tuple(array.shape)


def read_f64(path: PathLike, shape: Tuple[int, ...]) -> np.ndarray:
    """Load a payload written by ``write_f64``; the byte size must match ``shape``."""
    raw = Path(path).read_bytes()
    expected = 8 * int(np.prod(shape, dtype=np.int64))
    if len(raw) != expected:
        raise CorruptPayloadError(
            f"{path}: expected {expected} bytes for shape {tuple(shape)}, found {len(raw)}"
        )
    flat = np.frombuffer(raw, dtype=_LE_F64).astype(np.float64)
    return flat.reshape(shape, order="F")


def fingerprint(array: np.ndarray) -> str:
    """SHA-256 of an array's little-endian float64 bytes."""
    data = np.ascontiguousarray(np.asarray(array, dtype=_LE_F64)).tobytes()
    return hashlib.sha256(data).hexdigest()
