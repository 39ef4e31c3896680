"""On-disk formats.

Images
    Binary PPM (P6) with maxval 65535, big-endian samples, or PGM (P5,
    8-bit) for single-channel inspection maps such as gate values.

Float arrays (depth maps, DSMs, heightfields)
    A two-line ASCII header followed by raw little-endian float64 data in
    C order::

        DNRF-F64
        <ndim> <dim0> <dim1> ...

Checkpoints
    ``b"DNRFCKPT"`` magic, a little-endian uint32 header length, a UTF-8
    JSON header, then the parameter blocks as raw little-endian float64
    back to back.  The header holds ``kind``, ``arch``, ``meta`` and a
    ``blocks`` list of ``{"name", "shape", "offset"}`` entries (offset in
    bytes from the start of the data section).  The same container stores
    base fields, controllers and students; ``meta`` carries ``j_old`` and,
    for controllers, the hash of the base it was trained against.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError

F64_MAGIC = "DNRF-F64"
CKPT_MAGIC = b"DNRFCKPT"


def write_ppm(path, rgb):
    rgb = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    h, w, _ = rgb.shape
    q = np.round(rgb * 65535.0).astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n65535\n".encode("ascii"))
        f.write(q.tobytes())


def read_ppm(path):
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(parts[4][: w * h * 3 * np.dtype(dtype).itemsize], dtype=dtype)
    return data.reshape(h, w, 3).astype(np.float64) / maxval


def write_pgm(path, gray):
    g = np.round(np.clip(np.asarray(gray, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = g.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(g.tobytes())


def write_f64(path, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    header = f"{F64_MAGIC}\n{arr.ndim} {' '.join(str(n) for n in arr.shape)}\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(arr.tobytes())


def read_f64(path):
    raw = Path(path).read_bytes()
    first = raw.index(b"\n")
    second = raw.index(b"\n", first + 1)
    if raw[:first].decode("ascii") != F64_MAGIC:
        raise ValueError(f"{path}: bad float array header")
    dims = [int(t) for t in raw[first + 1 : second].split()]
    shape = tuple(dims[1 : 1 + dims[0]])
    return np.frombuffer(raw[second + 1 :], dtype="<f8").reshape(shape).astype(np.float64)


def params_hash(params):
    """sha256 over names, shapes and float64 bytes, in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save_checkpoint(path, kind, arch, params, meta=None):
    blocks, chunks, offset = [], [], 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        blocks.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"kind": kind, "arch": arch, "meta": meta or {}, "blocks": blocks},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for c in chunks:
            f.write(c)


def load_checkpoint(path):
    """Return (kind, arch, params, meta)."""
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + n].decode("utf-8"))
    data = raw[12 + n :]
    params = {}
    for b in header["blocks"]:
        count = int(np.prod(b["shape"])) if b["shape"] else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=b["offset"])
        params[b["name"]] = arr.reshape(b["shape"]).astype(np.float64)
    return header["kind"], header["arch"], params, header["meta"]
