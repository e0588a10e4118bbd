"""Binary container and atomic-write helpers shared by all artifact formats.

Container layout::

    magic (8 bytes) | header length (u32 LE) | JSON header (sorted keys, UTF-8)
    | payload bytes | sha256 of everything before it (32 bytes)

The header lists named array sections with dtype, shape and byte offset into
the payload. The trailing digest makes truncation and bit rot detectable.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import ArtifactError

_DIGEST_LEN = 32


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def digest_arrays(arrays: Mapping[str, np.ndarray]) -> str:
    """Order-independent-of-insertion digest over named arrays (sorted by name)."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(arr.dtype.str).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write to a sibling temp file then rename, so readers never see partial output."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def pack_container(magic: bytes, header: dict[str, Any], arrays: Mapping[str, np.ndarray]) -> bytes:
    assert len(magic) == 8
    sections = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        sections.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    full_header = dict(header)
    full_header["sections"] = sections
    hbytes = json.dumps(full_header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = magic + struct.pack("<I", len(hbytes)) + hbytes + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def unpack_container(data: bytes, magic: bytes, what: str = "artifact") -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    if len(data) < len(magic) + 4 + _DIGEST_LEN:
        raise ArtifactError(f"{what}: file truncated ({len(data)} bytes)")
    if data[: len(magic)] != magic:
        raise ArtifactError(f"{what}: bad magic, not a {magic.decode(errors='replace')} file")
    body, trailer = data[:-_DIGEST_LEN], data[-_DIGEST_LEN:]
    if hashlib.sha256(body).digest() != trailer:
        raise ArtifactError(f"{what}: checksum mismatch (truncated or corrupt file)")
    (hlen,) = struct.unpack("<I", body[len(magic) : len(magic) + 4])
    start = len(magic) + 4
    try:
        header = json.loads(body[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"{what}: unreadable header") from exc
    payload = body[start + hlen :]
    arrays: dict[str, np.ndarray] = {}
    for sec in header.pop("sections"):
        raw = payload[sec["offset"] : sec["offset"] + sec["nbytes"]]
        if len(raw) != sec["nbytes"]:
            raise ArtifactError(f"{what}: section {sec['name']!r} truncated")
        arrays[sec["name"]] = np.frombuffer(raw, dtype=np.dtype(sec["dtype"])).reshape(sec["shape"]).copy()
    return header, arrays


def read_container(path: str | os.PathLike, magic: bytes, what: str) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise ArtifactError(f"{what} not found: {path}") from exc
    return unpack_container(data, magic, what)
