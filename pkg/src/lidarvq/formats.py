"""Binary file formats: ULPC point clouds, ULOG occupancy grids, ULCM code maps, ULCK checkpoints.

All integers and floats are little-endian; every format starts with a 4-byte
magic followed by a u16 version (currently 1).
"""

import struct

import numpy as np

VERSION = 1


class FormatError(ValueError):
    pass


def _header(magic):
    return magic + struct.pack("<H", VERSION)


def _check_header(buf, magic):
    if len(buf) < 6 or buf[:4] != magic:
        raise FormatError(f"not a {magic.decode()} file")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported {magic.decode()} version {version}")
    return 6


def _read(path):
    with open(path, "rb") as f:
        return f.read()


def _write(path, data):
    with open(path, "wb") as f:
        f.write(data)


# -- point clouds -------------------------------------------------------------

def encode_ulpc(points):
    pts = np.ascontiguousarray(np.asarray(points).reshape(-1, 3), dtype="<f4")
    return _header(b"ULPC") + struct.pack("<I", len(pts)) + pts.tobytes()


def decode_ulpc(buf):
    off = _check_header(buf, b"ULPC")
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    if len(buf) != off + 12 * count:
        raise FormatError("ULPC payload length does not match point count")
    return np.frombuffer(buf, dtype="<f4", count=3 * count, offset=off).reshape(count, 3).astype(np.float32)


def write_ulpc(path, points):
    _write(path, encode_ulpc(points))


def read_ulpc(path):
    return decode_ulpc(_read(path))


def write_csv(path, points):
    pts = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    with open(path, "w") as f:
        for x, y, z in pts.tolist():
            # shortest float32 repr, exact on the way back
            f.write(f"{np.float32(x)},{np.float32(y)},{np.float32(z)}\n")


def read_csv(path):
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append([float(v) for v in line.split(",")])
    return np.asarray(rows, dtype=np.float32).reshape(-1, 3)


# -- occupancy grids ----------------------------------------------------------

def encode_ulog(bits):
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.ndim != 3:
        raise FormatError("ULOG stores H x W x C grids")
    packed = np.packbits(bits.reshape(-1), bitorder="little")
    return _header(b"ULOG") + struct.pack("<III", *bits.shape) + packed.tobytes()


def decode_ulog(buf):
    off = _check_header(buf, b"ULOG")
    h, w, c = struct.unpack_from("<III", buf, off)
    off += 12
    n = h * w * c
    if len(buf) != off + (n + 7) // 8:
        raise FormatError("ULOG payload length does not match H*W*C")
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8, offset=off), count=n, bitorder="little")
    return bits.reshape(h, w, c)


def write_ulog(path, bits):
    _write(path, encode_ulog(bits))


def read_ulog(path):
    return decode_ulog(_read(path))


# -- code maps ----------------------------------------------------------------

def encode_ulcm(codemap):
    cm = np.asarray(codemap)
    if cm.ndim != 2:
        raise FormatError("ULCM stores h x w code maps")
    if cm.size and (cm.min() < 0 or cm.max() > 0xFFFF):
        raise FormatError("code indices must fit in u16")
    return _header(b"ULCM") + struct.pack("<II", *cm.shape) + cm.astype("<u2").tobytes()


def decode_ulcm(buf):
    off = _check_header(buf, b"ULCM")
    h, w = struct.unpack_from("<II", buf, off)
    off += 8
    if len(buf) != off + 2 * h * w:
        raise FormatError("ULCM payload length does not match h*w")
    return np.frombuffer(buf, dtype="<u2", count=h * w, offset=off).reshape(h, w).astype(np.int64)


def write_ulcm(path, codemap):
    _write(path, encode_ulcm(codemap))


def read_ulcm(path):
    return decode_ulcm(_read(path))


# -- checkpoints --------------------------------------------------------------

def encode_ulck(entries):
    """Serialize an ordered mapping of name -> float array (stored as float32)."""
    parts = [_header(b"ULCK"), struct.pack("<I", len(entries))]
    for name, value in entries.items():
        raw = name.encode("utf-8")
        arr = np.asarray(value, dtype="<f4")
        if arr.ndim > 255:
            raise FormatError("rank too large")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_ulck(buf):
    off = _check_header(buf, b"ULCK")
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    entries = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            arr = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims)
            off += 4 * size
            if name in entries:
                raise FormatError(f"duplicate checkpoint entry {name!r}")
            entries[name] = arr.astype(np.float32)
    except (struct.error, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"truncated ULCK file: {exc}") from exc
    if off != len(buf):
        raise FormatError("trailing bytes after ULCK entries")
    return entries


def write_ulck(path, entries):
    _write(path, encode_ulck(entries))


def read_ulck(path):
    return decode_ulck(_read(path))
