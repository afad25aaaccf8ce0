"""Single container format for every model artifact.

Layout: ``b"DIVE"`` | u32 version | u64 header length | UTF-8 JSON header |
payload.  The header is ``{"entries": [{"name", "shape", "dtype", "offset",
"nbytes"}, ...], "meta": {...}}`` in insertion order; offsets are relative
to the payload start.  Arrays are stored little-endian float32 or float64
(integer arrays are accepted and stored as int64).
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile

import numpy as np

from .errors import ArgumentError, FormatError

MAGIC = b"DIVE"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


def _as_storable(name, arr):
    a = np.asarray(arr)
    if a.dtype == np.float32:
        return a.astype("<f4"), "float32"
    if a.dtype == np.float64:
        return a.astype("<f8"), "float64"
    if np.issubdtype(a.dtype, np.integer) or a.dtype == bool:
        return a.astype("<i8"), "int64"
    raise ArgumentError(f"array {name!r} has unsupported dtype {a.dtype}")


def encode_checkpoint(arrays, meta=None):
    """Serialize an ordered mapping name -> array into container bytes."""
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        if not isinstance(name, str) or not name:
            raise ArgumentError("array names must be non-empty strings")
        data, dtype = _as_storable(name, arr)
        raw = np.ascontiguousarray(data).tobytes()
        entries.append({"name": name, "shape": list(data.shape), "dtype": dtype,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"entries": entries, "meta": meta or {}}, sort_keys=False).encode()
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(blobs)


def decode_checkpoint(buf):
    """Parse container bytes; returns ``(arrays, meta)``.  Nothing partial on error."""
    if len(buf) < _PREFIX.size:
        raise FormatError("file too short for a checkpoint header")
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}; not a checkpoint container")
    if version != VERSION:
        raise FormatError(f"checkpoint format version {version} is not supported (expected "
                          f"{VERSION}); re-export the artifact with a matching tool version")
    start = _PREFIX.size + hlen
    if start > len(buf):
        raise FormatError("truncated checkpoint header")
    try:
        header = json.loads(bytes(buf[_PREFIX.size:start]).decode())
        entries = header["entries"]
    except (ValueError, KeyError, TypeError) as err:
        raise FormatError(f"unreadable checkpoint header: {err}") from None
    payload = len(buf) - start
    names, spans, out = set(), [], {}
    for e in entries:
        name, dtype = e.get("name"), e.get("dtype")
        if name in names:
            raise FormatError(f"duplicate entry {name!r}")
        names.add(name)
        if dtype not in _DTYPES:
            raise FormatError(f"entry {name!r} has unknown dtype {dtype!r}")
        shape = tuple(int(s) for s in e["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(_DTYPES[dtype]).itemsize
        off = int(e["offset"])
        if nbytes != int(e.get("nbytes", nbytes)) or off < 0:
            raise FormatError(f"entry {name!r} has an inconsistent size")
        if off + nbytes > payload:
            raise FormatError(f"entry {name!r} extends past the end of the file (truncated?)")
        spans.append((off, off + nbytes, name))
    spans.sort()
    for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise FormatError(f"entries {an!r} and {bn!r} overlap")
    for e in entries:
        shape = tuple(int(s) for s in e["shape"])
        dt = np.dtype(_DTYPES[e["dtype"]])
        off = start + int(e["offset"])
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(shape)
        out[e["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
    return out, header.get("meta", {})


def atomic_write_bytes(path, data: bytes):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, arrays, meta=None):
    """Write arrays atomically; returns the file's blake2b hex digest."""
    data = encode_checkpoint(arrays, meta)
    atomic_write_bytes(path, data)
    return hashlib.blake2b(data, digest_size=16).hexdigest()


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def header_names(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    _, _, hlen = _PREFIX.unpack_from(buf)
    return [e["name"] for e in json.loads(buf[_PREFIX.size:_PREFIX.size + hlen])["entries"]]


def file_digest(path):
    with open(path, "rb") as fh:
        return hashlib.blake2b(fh.read(), digest_size=16).hexdigest()
