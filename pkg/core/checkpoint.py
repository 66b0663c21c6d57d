"""Binary container for named arrays.

Layout (all integers little-endian)::

    b"SYNATTN1"
    u32 header length, header JSON (UTF-8, sorted keys)
    u32 entry count
    per entry: u32 name length, name (UTF-8), 1 byte dtype code
               (b"f" = f64, b"i" = int64), u32 rank, rank x u64 extents,
               row-major payload

The same container stores model checkpoints, resumable training state and
preprocessed batch files; the header's ``kind`` field tells them apart.
"""

import json
import logging
import struct
from pathlib import Path
from typing import Any, BinaryIO, Dict, Tuple, Union

import numpy as np

from core.errors import CheckpointFormatError

logger = logging.getLogger(__name__)

MAGIC = b"SYNATTN1"
_DTYPES = {b"f": np.dtype("<f8"), b"i": np.dtype("<i8")}


def _dtype_code(array: np.ndarray) -> bytes:
    if np.issubdtype(array.dtype, np.floating):
        return b"f"
    if np.issubdtype(array.dtype, np.integer) or array.dtype == np.bool_:
        return b"i"
    raise CheckpointFormatError(f"cannot store arrays of dtype {array.dtype}")


def encode_container(arrays: Dict[str, np.ndarray], metadata: Dict[str, Any]) -> bytes:
    header = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", len(header)), header, struct.pack("<I", len(arrays))]
    for name, array in arrays.items():
        array = np.asarray(array)
        code = _dtype_code(array)
        encoded_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded_name)))
        chunks.append(encoded_name)
        chunks.append(code)
        chunks.append(struct.pack("<I", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes())
    return b"".join(chunks)


def write_container(path: Union[str, Path], arrays: Dict[str, np.ndarray], metadata: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_container(arrays, metadata))
    logger.info(f"Wrote {len(arrays)} arrays to {path}")
    return path


def _read_exact(stream: BinaryIO, n: int, what: str) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise CheckpointFormatError(f"truncated container while reading {what}")
    return data


def decode_container(stream: BinaryIO, source: str = "<bytes>") -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    if stream.read(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError("missing SYNATTN1 magic string", source=source)
    try:
        (header_len,) = struct.unpack("<I", _read_exact(stream, 4, "header length"))
        metadata = json.loads(_read_exact(stream, header_len, "header").decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(stream, 4, "entry count"))
        arrays: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(stream, 4, "name length"))
            name = _read_exact(stream, name_len, "name").decode("utf-8")
            code = _read_exact(stream, 1, f"{name} dtype")
            if code not in _DTYPES:
                raise CheckpointFormatError(f"unknown dtype code {code!r} for {name}")
            (rank,) = struct.unpack("<I", _read_exact(stream, 4, f"{name} rank"))
            shape = struct.unpack(f"<{rank}Q", _read_exact(stream, 8 * rank, f"{name} shape"))
            dtype = _DTYPES[code]
            n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            payload = _read_exact(stream, n_bytes, f"{name} payload")
            arrays[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    except CheckpointFormatError as e:
        e.source = source
        raise
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"corrupt container: {e}", source=source) from None
    return arrays, metadata


def read_container(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    path = Path(path)
    with path.open("rb") as stream:
        return decode_container(stream, source=str(path))


def is_container(path: Union[str, Path]) -> bool:
    """True when the file starts with the container magic string."""
    with Path(path).open("rb") as stream:
        return stream.read(len(MAGIC)) == MAGIC
