"""Binary array container used for checkpoints and datasets.

Layout (all integers little-endian):

    magic   4 bytes  b"VILS"
    version u32      currently 1
    count   u32      number of entries
    entry:  name length u16, name bytes (UTF-8),
            dtype code u8 (0=f32, 1=f64, 2=u8, 3=i64),
            rank u8, extents rank x u64,
            payload (row-major, little-endian)

Entries are written in sorted name order, so identical contents produce
byte-identical files, and load(save(x)) round-trips bitwise.
"""

import struct

import numpy as np

from .errors import CorruptionError, UsageError

MAGIC = b"VILS"
VERSION = 1

_CODE_FOR = {
    np.dtype("float32"): 0,
    np.dtype("float64"): 1,
    np.dtype("uint8"): 2,
    np.dtype("int64"): 3,
}
_DTYPE_FOR = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1"), 3: np.dtype("<i8")}


def save_container(path, entries):
    """Write a name->ndarray mapping; names must be unique (dict guarantees it)."""
    blobs = []
    for name in sorted(entries):
        arr = np.asarray(entries[name])
        code = _CODE_FOR.get(arr.dtype.newbyteorder("="))
        if code is None:
            raise UsageError(f"entry {name!r} has unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise UsageError(f"entry name too long: {name!r}")
        head = struct.pack("<H", len(nb)) + nb + struct.pack("<BB", code, arr.ndim)
        head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        payload = np.ascontiguousarray(arr, dtype=_DTYPE_FOR[code]).tobytes()
        blobs.append(head + payload)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blobs)))
        for blob in blobs:
            fh.write(blob)


def load_container(path):
    """Read a container back into an ordered name->ndarray dict."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CorruptionError(f"{path}: not a container file (bad magic)")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CorruptionError(f"{path}: unsupported container version {version}")
    entries = {}
    off = 12
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off : off + name_len].decode("utf-8")
            off += name_len
            code, rank = struct.unpack_from("<BB", raw, off)
            off += 2
            if code not in _DTYPE_FOR:
                raise CorruptionError(f"{path}: entry {name!r} has unknown dtype code {code}")
            shape = struct.unpack_from(f"<{rank}Q", raw, off)
            off += 8 * rank
            dtype = _DTYPE_FOR[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
            payload = raw[off : off + nbytes]
            if len(payload) != nbytes:
                raise CorruptionError(f"{path}: truncated payload for entry {name!r}")
            off += nbytes
            if name in entries:
                raise CorruptionError(f"{path}: duplicate entry name {name!r}")
            entries[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    except struct.error as exc:
        raise CorruptionError(f"{path}: truncated container ({exc})") from exc
    if off != len(raw):
        raise CorruptionError(f"{path}: {len(raw) - off} trailing bytes after last entry")
    return entries
