"""Raw tensor files: a little-endian binary payload plus a JSON sidecar.

For ``weights/embed.weight.bin`` the descriptor lives at
``weights/embed.weight.json`` and looks like::

    {"shape": [16, 64], "dtype": "f64", "layout": "row-major"}
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DataError
from .tensor import Tensor

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save_tensor(path, tensor, dtype: str = "f64") -> Path:
    if dtype not in _DTYPES:
        raise DataError(f"unsupported dtype {dtype!r}; expected one of {sorted(_DTYPES)}")
    path = Path(path)
    data = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor, dtype=np.float64)
    payload = np.ascontiguousarray(data, dtype=_DTYPES[dtype])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload.tobytes(order="C"))
    descriptor = {"shape": [int(s) for s in data.shape], "dtype": dtype, "layout": "row-major"}
    sidecar_path(path).write_text(json.dumps(descriptor) + "\n")
    return path


def load_tensor(path) -> Tensor:
    path = Path(path)
    try:
        descriptor = json.loads(sidecar_path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"missing tensor descriptor for {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed tensor descriptor for {path}: {exc}") from None
    dtype = descriptor.get("dtype")
    if dtype not in _DTYPES:
        raise DataError(f"unsupported dtype {dtype!r} in {path}")
    if descriptor.get("layout", "row-major") != "row-major":
        raise DataError(f"unsupported layout {descriptor['layout']!r} in {path}")
    shape = tuple(int(s) for s in descriptor["shape"])
    raw = path.read_bytes()
    expected = int(np.prod(shape, dtype=np.int64)) * _DTYPES[dtype].itemsize
    if len(raw) != expected:
        raise DataError(f"{path}: payload has {len(raw)} bytes, descriptor implies {expected}")
    arr = np.frombuffer(raw, dtype=_DTYPES[dtype]).astype(np.float64).reshape(shape)
    return Tensor(arr)
