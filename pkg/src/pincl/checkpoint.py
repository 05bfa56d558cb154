"""Binary checkpoint I/O.

Parameter blobs are little-endian: magic ``PNCL``, format version u32,
parameter count u64, then per parameter a u32 name length, the UTF-8 name,
rank u32, extents u64[], and the f64 payload in row-major order.

Model checkpoints prepend a length-prefixed JSON header (architecture sizes
plus the adapter manifest) to a standard parameter blob.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

MAGIC = b"PNCL"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Malformed checkpoint (bad magic, unknown version, truncation)."""


def _read_exact(stream, n: int) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(data)}")
    return data


def write_params(stream, params: dict[str, np.ndarray]) -> None:
    stream.write(MAGIC)
    stream.write(struct.pack("<I", FORMAT_VERSION))
    stream.write(struct.pack("<Q", len(params)))
    for name, array in params.items():
        # note: ascontiguousarray would promote rank-0 arrays to rank 1,
        # so shape metadata comes from the original array
        arr = np.asarray(array, dtype=np.float64)
        encoded = name.encode("utf-8")
        stream.write(struct.pack("<I", len(encoded)))
        stream.write(encoded)
        stream.write(struct.pack("<I", arr.ndim))
        stream.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        stream.write(np.ascontiguousarray(arr).astype("<f8").tobytes())


def read_params(stream) -> dict[str, np.ndarray]:
    magic = _read_exact(stream, 4)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    (version,) = struct.unpack("<I", _read_exact(stream, 4))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    (count,) = struct.unpack("<Q", _read_exact(stream, 8))
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", _read_exact(stream, 4))
        name = _read_exact(stream, name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", _read_exact(stream, 4))
        extents = struct.unpack(f"<{rank}Q", _read_exact(stream, 8 * rank))
        size = int(np.prod(extents)) if rank else 1
        payload = _read_exact(stream, 8 * size)
        params[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(extents)
    return params


def save_params(path, params: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        write_params(fh, params)


def load_params(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return read_params(fh)


def save_with_header(path, header: dict, params: dict[str, np.ndarray]) -> None:
    """Model checkpoint: u32 header length + JSON header + parameter blob."""
    blob = io.BytesIO()
    write_params(blob, params)
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(encoded)))
        fh.write(encoded)
        fh.write(blob.getvalue())


def load_with_header(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        (header_len,) = struct.unpack("<I", _read_exact(fh, 4))
        try:
            header = json.loads(_read_exact(fh, header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
        params = read_params(fh)
    return header, params
