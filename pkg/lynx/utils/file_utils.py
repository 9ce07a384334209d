"""
LYNX binary files

Header: b"LYNX", u16 format version, u8 dtype code, u8 rank, rank x u64 dims,
all little-endian. Dense tensors (dtype 0) follow with the float32 payload.
Packed N:M matrices (dtype 1, rank 2) follow with u8 n, u8 m, the float32
values and the metadata bytes.
"""

import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np
from pydantic import ValidationError

from ..exceptions import FormatError
from ..models.sparsity_models import NMPattern, PackedNM

logger = logging.getLogger(__name__)

MAGIC = b"LYNX"
FORMAT_VERSION = 1
DTYPE_F32 = 0
DTYPE_PACKED_NM = 1

_HEADER = struct.Struct("<4sHBB")
_PATTERN = struct.Struct("<BB")


class TensorFile:
    """Encoding and decoding of LYNX tensor files"""

    @staticmethod
    def encode_tensor(m: np.ndarray) -> bytes:
        arr = np.asarray(m)
        if arr.ndim not in (1, 2):
            raise FormatError(f"only rank 1 and 2 tensors are stored, got rank {arr.ndim}")
        header = _HEADER.pack(MAGIC, FORMAT_VERSION, DTYPE_F32, arr.ndim)
        dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
        return header + dims + np.ascontiguousarray(arr, dtype="<f4").tobytes()

    @staticmethod
    def encode_packed(p: PackedNM) -> bytes:
        header = _HEADER.pack(MAGIC, FORMAT_VERSION, DTYPE_PACKED_NM, 2)
        dims = struct.pack("<2Q", p.rows, p.cols)
        pattern = _PATTERN.pack(p.pattern.n, p.pattern.m)
        values = np.ascontiguousarray(p.values, dtype="<f4").tobytes()
        return header + dims + pattern + values + p.meta.tobytes()

    @staticmethod
    def decode_header(blob: bytes) -> Tuple[int, Tuple[int, ...], int]:
        """dtype code, dims and the payload offset"""
        if len(blob) < _HEADER.size:
            raise FormatError("file too short for a LYNX header")
        magic, version, dtype, rank = _HEADER.unpack_from(blob, 0)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported format version {version}")
        if dtype not in (DTYPE_F32, DTYPE_PACKED_NM):
            raise FormatError(f"unsupported dtype code {dtype}")
        if rank not in (1, 2) or (dtype == DTYPE_PACKED_NM and rank != 2):
            raise FormatError(f"unsupported rank {rank} for dtype code {dtype}")
        offset = _HEADER.size
        if len(blob) < offset + 8 * rank:
            raise FormatError("truncated dimensions")
        dims = struct.unpack_from(f"<{rank}Q", blob, offset)
        if any(d < 1 for d in dims):
            raise FormatError(f"empty dimension in {dims}")
        return dtype, dims, offset + 8 * rank

    @staticmethod
    def decode(blob: bytes) -> Union[np.ndarray, PackedNM]:
        dtype, dims, offset = TensorFile.decode_header(blob)
        if dtype == DTYPE_F32:
            count = int(np.prod(dims))
            TensorFile._expect_length(blob, offset + 4 * count)
            data = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
            return data.astype(np.float32).reshape(dims)

        rows, cols = dims
        if len(blob) < offset + _PATTERN.size:
            raise FormatError("truncated pattern")
        n, m = _PATTERN.unpack_from(blob, offset)
        offset += _PATTERN.size
        try:
            pattern = NMPattern(n=n, m=m)
        except ValidationError as e:
            raise FormatError(f"invalid pattern {n}:{m} in file") from e
        if cols % m != 0:
            raise FormatError(f"cols {cols} is not a multiple of m={m}")
        slots = pattern.groups(cols) * n
        row_bytes = pattern.meta_row_bytes(cols)
        TensorFile._expect_length(blob, offset + 4 * rows * slots + rows * row_bytes)
        values = np.frombuffer(blob, dtype="<f4", count=rows * slots, offset=offset)
        meta = np.frombuffer(blob, dtype=np.uint8, count=rows * row_bytes, offset=offset + 4 * rows * slots)
        return PackedNM(
            rows=rows,
            cols=cols,
            pattern=pattern,
            values=values.astype(np.float32).reshape(rows, slots),
            meta=meta.copy().reshape(rows, row_bytes),
        )

    @staticmethod
    def _expect_length(blob: bytes, expected: int) -> None:
        if len(blob) < expected:
            raise FormatError(f"truncated payload: {len(blob)} bytes, expected {expected}")
        if len(blob) > expected:
            raise FormatError(f"{len(blob) - expected} trailing bytes after payload")


def read_bytes(path: Union[str, Path]) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        logger.error(f"Error reading {path}: {str(e)}")
        raise FormatError(f"cannot read {path}: {e.strerror or e}") from e


def save_tensor(path: Union[str, Path], m: np.ndarray) -> Path:
    path = Path(path)
    path.write_bytes(TensorFile.encode_tensor(m))
    logger.debug(f"wrote tensor {np.shape(m)} to {path}")
    return path


def load_tensor(path: Union[str, Path]) -> np.ndarray:
    obj = read_any(path)
    if not isinstance(obj, np.ndarray):
        raise FormatError(f"{path} holds a packed matrix, expected a dense tensor")
    return obj


def save_packed(path: Union[str, Path], p: PackedNM) -> Path:
    path = Path(path)
    path.write_bytes(TensorFile.encode_packed(p))
    logger.debug(f"wrote packed {p.pattern} matrix {p.shape} to {path}")
    return path


def load_packed(path: Union[str, Path]) -> PackedNM:
    obj = read_any(path)
    if not isinstance(obj, PackedNM):
        raise FormatError(f"{path} holds a dense tensor, expected a packed matrix")
    return obj


def read_any(path: Union[str, Path]) -> Union[np.ndarray, PackedNM]:
    """Load a dense tensor or a packed matrix, whichever the dtype code says"""
    return TensorFile.decode(read_bytes(path))


def write_json(path: Union[str, Path], payload: Dict[str, Any]) -> Path:
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path


def read_json(path: Union[str, Path]) -> Dict[str, Any]:
    try:
        return json.loads(Path(path).read_text())
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e.strerror or e}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"{path} is not valid JSON: {e}") from e
