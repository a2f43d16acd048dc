"""
Binary container primitives.

Little-endian integers and ``float64`` arrays with a shape header, plus a
tagged-chunk container (4 byte magic, ``u32`` version, ``u32`` chunk count,
then ``tag[4] u64 length payload`` per chunk).
"""
import struct
from io import BytesIO
from typing import BinaryIO, Dict, List, Sequence, Tuple

import numpy as np

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


class WeightFileError(ValueError):
    """Weight or checkpoint file does not match the expected layout."""


class MagicMismatchError(WeightFileError):
    """Wrong magic bytes or unsupported format version."""


class ShapeMismatchError(WeightFileError):
    """Stored tensor shape differs from the configured one."""


class TruncatedFileError(WeightFileError):
    """File ends before all declared data was read."""


def read_exact(src: BinaryIO, n: int, what: str = "data") -> bytes:
    data = src.read(n)
    if len(data) != n:
        raise TruncatedFileError(f"Truncated file: expected {n} bytes of {what}, got {len(data)}")
    return data


def write_u32(dst: BinaryIO, v: int) -> None:
    dst.write(_U32.pack(v))


def read_u32(src: BinaryIO, what: str = "u32") -> int:
    return _U32.unpack(read_exact(src, _U32.size, what))[0]


def write_u64(dst: BinaryIO, v: int) -> None:
    dst.write(_U64.pack(v))


def read_u64(src: BinaryIO, what: str = "u64") -> int:
    return _U64.unpack(read_exact(src, _U64.size, what))[0]


def write_array(dst: BinaryIO, a: np.ndarray) -> None:
    """``u32 ndim, u32 dims..., float64 data`` (row-major, little-endian)."""
    write_u32(dst, a.ndim)
    for d in a.shape:
        write_u32(dst, d)
    dst.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_shape(src: BinaryIO, what: str = "array") -> Tuple[int, ...]:
    ndim = read_u32(src, f"{what} header")
    if ndim > 8:
        raise WeightFileError(f"Implausible rank {ndim} for {what}")
    return tuple(read_u32(src, f"{what} header") for _ in range(ndim))


def read_array_data(src: BinaryIO, shape: Sequence[int], what: str = "array") -> np.ndarray:
    n = int(np.prod(shape, dtype="int64"))
    data = read_exact(src, 8 * n, what)
    return np.frombuffer(data, dtype="<f8").astype("float64").reshape(tuple(shape))


def read_array(src: BinaryIO, what: str = "array") -> np.ndarray:
    return read_array_data(src, read_shape(src, what), what)


def check_magic(src: BinaryIO, magic: bytes, versions: Sequence[int]) -> int:
    """Consume magic and version, return version."""
    got = src.read(len(magic))
    if got != magic:
        if len(got) < len(magic) and magic.startswith(got):
            raise TruncatedFileError("Truncated file: missing magic bytes")
        raise MagicMismatchError(f"Bad magic: expected {magic!r}, got {got!r}")
    version = read_u32(src, "format version")
    if version not in versions:
        raise MagicMismatchError(f"Unsupported format version {version}")
    return version


def write_chunks(dst: BinaryIO, magic: bytes, version: int, chunks: Sequence[Tuple[bytes, bytes]]) -> None:
    dst.write(magic)
    write_u32(dst, version)
    write_u32(dst, len(chunks))
    for tag, payload in chunks:
        assert len(tag) == 4
        dst.write(tag)
        write_u64(dst, len(payload))
        dst.write(payload)


def read_chunks(src: BinaryIO, magic: bytes, versions: Sequence[int]) -> Dict[bytes, bytes]:
    check_magic(src, magic, versions)
    n = read_u32(src, "chunk count")
    out: Dict[bytes, bytes] = {}
    for _ in range(n):
        tag = read_exact(src, 4, "chunk tag")
        sz = read_u64(src, "chunk length")
        if tag in out:
            raise WeightFileError(f"Duplicate chunk {tag!r}")
        out[tag] = read_exact(src, sz, f"chunk {tag.decode('ascii', 'replace')}")
    return out


def pack_arrays(arrays: Sequence[np.ndarray]) -> bytes:
    buf = BytesIO()
    write_u32(buf, len(arrays))
    for a in arrays:
        write_array(buf, a)
    return buf.getvalue()


def unpack_arrays(payload: bytes, what: str = "array") -> List[np.ndarray]:
    src = BytesIO(payload)
    n = read_u32(src, f"{what} count")
    return [read_array(src, f"{what} {i}") for i in range(n)]
