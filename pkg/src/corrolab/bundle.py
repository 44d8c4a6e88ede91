"""Tagged bundles of ParamVectors plus a small string-keyed metadata block."""

from __future__ import annotations

import struct

from corrolab.numcore import ParamVector

MAGIC = b"CBND1"


def write_bundle(path, params, meta=None):
    """params: dict tag -> ParamVector; meta: dict str -> str. Deterministic bytes."""
    meta = meta or {}
    meta_text = "".join(f"{k} = {meta[k]}\n" for k in sorted(meta)).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(meta_text)), meta_text, struct.pack("<I", len(params))]
    for tag in sorted(params):
        tb = tag.encode("utf-8")
        blob = params[tag].to_bytes()
        parts.append(struct.pack("<I", len(tb)))
        parts.append(tb)
        parts.append(struct.pack("<Q", len(blob)))
        parts.append(blob)
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_bundle(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != MAGIC:
        raise ValueError(f"bad bundle magic {blob[:5]!r}")
    off = 5
    (meta_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    meta = {}
    for line in blob[off : off + meta_len].decode("utf-8").splitlines():
        key, _, value = line.partition(" = ")
        meta[key] = value
    off += meta_len
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    params = {}
    for _ in range(count):
        (tlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        tag = blob[off : off + tlen].decode("utf-8")
        off += tlen
        (blen,) = struct.unpack_from("<Q", blob, off)
        off += 8
        params[tag] = ParamVector.from_bytes(blob[off : off + blen])
        off += blen
    return params, meta
