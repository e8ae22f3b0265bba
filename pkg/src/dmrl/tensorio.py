"""Binary tensor files and tensor archives.

Tensor file layout (all integers little-endian u32)::

    b"DMRT" | version=1 | dtype code | ndim | dims... | row-major payload

dtype codes: 0 = float32, 1 = int32.

An archive is an uncompressed zip holding ``header.json`` plus any number of
tensor files. Entries are written with a fixed timestamp and in sorted order so
that identical contents give byte-identical archives.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zipfile
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"DMRT"
VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<i4")}
_CODE_OF = {np.dtype("<f4"): 0, np.dtype("<i4"): 1}
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class TensorFormatError(ValueError):
    pass


def _dtype_code(arr: np.ndarray) -> int:
    dt = arr.dtype.newbyteorder("<")
    if dt not in _CODE_OF:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}; use float32 or int32")
    return _CODE_OF[dt]


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _dtype_code(arr)
    header = MAGIC + struct.pack("<III", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes(order="C")
    return header + payload


def decode_tensor(buf: bytes, name: str = "<bytes>") -> np.ndarray:
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise TensorFormatError(f"{name}: bad magic")
    version, code, ndim = struct.unpack_from("<III", buf, 4)
    if version != VERSION:
        raise TensorFormatError(f"{name}: unsupported version {version}")
    if code not in DTYPE_CODES:
        raise TensorFormatError(f"{name}: unknown dtype code {code}")
    off = 16 + 4 * ndim
    if len(buf) < off:
        raise TensorFormatError(f"{name}: truncated header")
    dims = struct.unpack_from(f"<{ndim}I", buf, 16)
    dtype = DTYPE_CODES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) - off != expected:
        raise TensorFormatError(
            f"{name}: payload has {len(buf) - off} bytes, expected {expected} for shape {dims}"
        )
    return np.frombuffer(buf, dtype=dtype, offset=off).reshape(dims).copy()


def save_tensor(path: str | Path, arr: np.ndarray) -> str:
    """Write ``arr`` to ``path``; returns the sha256 hex digest of the file."""
    data = encode_tensor(arr)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_tensor(path: str | Path) -> np.ndarray:
    path = Path(path)
    return decode_tensor(path.read_bytes(), name=str(path))


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _zinfo(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def write_archive(path: str | Path, header: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    """Write a header plus named tensors as one archive, atomically."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        zf.writestr(_zinfo("header.json"), json.dumps(header, sort_keys=True, indent=1))
        for name in sorted(tensors):
            zf.writestr(_zinfo(f"tensors/{name}.dmrt"), encode_tensor(tensors[name]))
    tmp.replace(path)


def read_archive(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        with zipfile.ZipFile(path, "r") as zf:
            header = json.loads(zf.read("header.json").decode("utf-8"))
            tensors = {}
            for name in zf.namelist():
                if name.startswith("tensors/") and name.endswith(".dmrt"):
                    key = name[len("tensors/") : -len(".dmrt")]
                    tensors[key] = decode_tensor(zf.read(name), name=f"{path}:{name}")
    except (zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise TensorFormatError(f"{path}: not a valid archive ({exc})") from None
    return header, tensors
