"""Versioned little-endian binary container for parameter vectors.

Layout (all integers little-endian)::

    magic      4 bytes   b"LMCK" (checkpoint) or b"LMDR" (direction)
    version    u16
    spec_hash  u64
    epoch      u32
    seed       u64
    meta_len   u32, then meta_len bytes of UTF-8 JSON
    n_entries  u32, then per entry:
                 name_len u16, name, trainable u8, ndim u8, ndim x u32 dims
    payload    manifest-size x f64
    n_bn       u32, then per layer:
                 name_len u16, name, channels u32, channels x f64 mean, channels x f64 var
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .params import Entry, Manifest

VERSION = 1
MAGICS = (b"LMCK", b"LMDR")


def encode(magic: bytes, spec_hash: int, epoch: int, seed: int, meta: dict,
           manifest: Manifest, values: np.ndarray, bn_layers: dict) -> bytes:
    out = bytearray(magic)
    out += struct.pack("<HQIQ", VERSION, spec_hash, epoch, seed)
    blob = json.dumps(meta, sort_keys=True).encode()
    out += struct.pack("<I", len(blob)) + blob
    out += struct.pack("<I", len(manifest))
    for e in manifest:
        name = e.name.encode()
        out += struct.pack("<H", len(name)) + name
        out += struct.pack("<BB", int(e.trainable), len(e.shape))
        out += struct.pack(f"<{len(e.shape)}I", *e.shape)
    out += np.asarray(values, dtype="<f8").tobytes()
    out += struct.pack("<I", len(bn_layers))
    for name, (m, v) in bn_layers.items():
        nb = name.encode()
        out += struct.pack("<H", len(nb)) + nb + struct.pack("<I", len(m))
        out += np.asarray(m, dtype="<f8").tobytes() + np.asarray(v, dtype="<f8").tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, raw: bytes, name: str):
        self.raw, self.pos, self.name = raw, 0, name

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.name}: truncated at byte offset {self.pos} "
                              f"(needed {n} more bytes)")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def f64(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)


def decode(raw: bytes, name: str = "<bytes>", expect_magic: bytes | None = None) -> dict:
    r = _Reader(raw, name)
    magic = r.take(4)
    if magic not in MAGICS or (expect_magic and magic != expect_magic):
        raise FormatError(f"{name}: bad magic {magic!r}")
    version, spec_hash, epoch, seed = r.unpack("<HQIQ")
    if version != VERSION:
        raise FormatError(f"{name}: unsupported container version {version}")
    (meta_len,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{name}: corrupt metadata block") from exc
    (n_entries,) = r.unpack("<I")
    entries = []
    for _ in range(n_entries):
        (nl,) = r.unpack("<H")
        ename = r.take(nl).decode()
        trainable, ndim = r.unpack("<BB")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        entries.append(Entry(ename, tuple(shape), bool(trainable)))
    manifest = Manifest(entries)
    values = r.f64(manifest.size)
    (n_bn,) = r.unpack("<I")
    bn = {}
    for _ in range(n_bn):
        (nl,) = r.unpack("<H")
        lname = r.take(nl).decode()
        (c,) = r.unpack("<I")
        bn[lname] = (r.f64(c), r.f64(c))
    if r.pos != len(raw):
        raise FormatError(f"{name}: {len(raw) - r.pos} trailing bytes")
    return {"magic": magic, "spec_hash": spec_hash, "epoch": epoch, "seed": seed,
            "meta": meta, "manifest": manifest, "values": values, "bn": bn}


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
