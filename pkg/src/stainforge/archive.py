"""Deterministic single-file archive for checkpoints and prompt/anchor files.

Layout (little endian)::

    b"STAINFRG"          8 bytes magic
    u32                  format version
    u64                  header length in bytes
    header               UTF-8 JSON, sorted keys
    blobs                raw array bytes, concatenated in header order

The header holds ``kind``, a ``blobs`` table (dtype, shape, offset, nbytes,
array library) and the ``payload`` structure in which every array is replaced
by ``{"__blob__": i}``. Nothing time- or host-dependent is written, so equal
inputs give byte-identical files.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .errors import ArchiveError

MAGIC = b"STAINFRG"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def _encode(obj: Any, blobs: list) -> Any:
    if isinstance(obj, torch.Tensor):
        arr = obj.detach().cpu().contiguous().numpy()
        blobs.append(("torch", arr))
        return {"__blob__": len(blobs) - 1}
    if isinstance(obj, np.ndarray):
        blobs.append(("numpy", np.ascontiguousarray(obj)))
        return {"__blob__": len(blobs) - 1}
    if isinstance(obj, dict):
        if all(isinstance(k, str) for k in obj):
            return {"__map__": {k: _encode(v, blobs) for k, v in obj.items()}}
        return {"__pairs__": [[_encode(k, blobs), _encode(v, blobs)] for k, v in obj.items()]}
    if isinstance(obj, tuple):
        return {"__tuple__": [_encode(v, blobs) for v in obj]}
    if isinstance(obj, list):
        return [_encode(v, blobs) for v in obj]
    if isinstance(obj, bytes):
        blobs.append(("bytes", np.frombuffer(obj, dtype=np.uint8)))
        return {"__blob__": len(blobs) - 1}
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if obj is None or isinstance(obj, (bool, int, float, str)):
        return obj
    raise ArchiveError(f"cannot archive object of type {type(obj).__name__}")


def _decode(obj: Any, blobs: list) -> Any:
    if isinstance(obj, list):
        return [_decode(v, blobs) for v in obj]
    if isinstance(obj, dict):
        if "__blob__" in obj:
            return blobs[obj["__blob__"]]
        if "__map__" in obj:
            return {k: _decode(v, blobs) for k, v in obj["__map__"].items()}
        if "__pairs__" in obj:
            return {_decode(k, blobs): _decode(v, blobs) for k, v in obj["__pairs__"]}
        if "__tuple__" in obj:
            return tuple(_decode(v, blobs) for v in obj["__tuple__"])
        raise ArchiveError(f"malformed archive node with keys {sorted(obj)}")
    return obj


def dumps(kind: str, payload: Any) -> bytes:
    blobs: list = []
    tree = _encode(payload, blobs)
    table = []
    offset = 0
    for lib, arr in blobs:
        table.append({
            "lib": lib,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": arr.nbytes,
        })
        offset += arr.nbytes
    header = json.dumps(
        {"kind": kind, "blobs": table, "payload": tree}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    body = b"".join(arr.tobytes() for _, arr in blobs)
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + body


def loads(data: bytes, kind: str | None = None) -> Any:
    if len(data) < _PREFIX.size:
        raise ArchiveError("truncated archive")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise ArchiveError("not a stainforge archive (bad magic)")
    if version != FORMAT_VERSION:
        raise ArchiveError(
            f"archive format version {version} is not supported (expected {FORMAT_VERSION}); "
            "re-create it with a matching release"
        )
    start = _PREFIX.size
    header = json.loads(data[start:start + hlen].decode("utf-8"))
    if kind is not None and header["kind"] != kind:
        raise ArchiveError(f"expected a {kind!r} archive, got {header['kind']!r}")
    base = start + hlen
    blobs = []
    for entry in header["blobs"]:
        lo = base + entry["offset"]
        raw = data[lo:lo + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise ArchiveError("truncated archive body")
        if entry["lib"] == "bytes":
            blobs.append(bytes(raw))
            continue
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
        blobs.append(torch.from_numpy(arr) if entry["lib"] == "torch" else arr)
    return _decode(header["payload"], blobs)


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path: str | os.PathLike, kind: str, payload: Any) -> None:
    atomic_write_bytes(path, dumps(kind, payload))


def load(path: str | os.PathLike, kind: str | None = None) -> Any:
    return loads(Path(path).read_bytes(), kind=kind)
