"""SLED tensor archive: named float64 arrays in one flat little-endian file.

Layout::

    b"SLED1"                      magic; the trailing digit is the format version
    uint32 (LE)                   byte length of the JSON header
    header (UTF-8 JSON)           {"entries": [{"name", "shape", "offset"}...], "meta": {...}}
    payload                       concatenated '<f8' arrays; offsets relative to payload start

The header is serialised with sorted keys so equal content yields equal bytes.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SLED1"
VERSION = 1


class ArchiveError(ValueError):
    pass


def encode_archive(tensors: dict, meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in tensors:
        if not isinstance(name, str) or not name:
            raise ArchiveError(f"bad tensor name {name!r}")
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f8")  # tobytes() is C-ordered; ascontiguousarray would promote 0-d
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"version": VERSION, "entries": entries, "meta": meta or {}},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(header)) + header + b"".join(chunks)


def decode_archive(buf: bytes) -> tuple:
    if len(buf) < len(MAGIC) + 4 or buf[:4] != MAGIC[:4]:
        raise ArchiveError("not a SLED archive (bad magic)")
    if buf[:5] != MAGIC:
        raise ArchiveError(f"unsupported SLED version {buf[4:5]!r}")
    (hlen,) = struct.unpack("<I", buf[5:9])
    if 9 + hlen > len(buf):
        raise ArchiveError("truncated header")
    try:
        header = json.loads(buf[9:9 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ArchiveError(f"corrupt header: {e}") from None
    if header.get("version") != VERSION:
        raise ArchiveError(f"unsupported version field {header.get('version')!r}")
    payload = memoryview(buf)[9 + hlen:]
    tensors, seen, spans = {}, set(), []
    for e in header["entries"]:
        name, shape, off = e["name"], tuple(e["shape"]), int(e["offset"])
        if name in seen:
            raise ArchiveError(f"duplicate entry {name!r}")
        seen.add(name)
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if off < 0 or off + nbytes > len(payload):
            raise ArchiveError(f"truncated payload for {name!r}")
        spans.append((off, off + nbytes))
        tensors[name] = np.frombuffer(payload[off:off + nbytes], dtype="<f8").reshape(shape).astype(np.float64)
    spans.sort()
    for (a0, a1), (b0, _) in zip(spans, spans[1:]):
        if b0 < a1:
            raise ArchiveError("overlapping entries")
    return tensors, header.get("meta", {})


def write_archive(path, tensors: dict, meta: dict | None = None, force: bool = True) -> None:
    """Write atomically (temp file + rename) so a failure leaves no partial file."""
    path = Path(path)
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists")
    data = encode_archive(tensors, meta)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def read_archive(path) -> tuple:
    return decode_archive(Path(path).read_bytes())
