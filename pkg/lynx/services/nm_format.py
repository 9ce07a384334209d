"""
Packed N:M storage

Layout: per row, n kept values per group of m, plus index_bits bits per kept
index. Indices of a group are packed least-significant-first, groups follow
each other from low to high bits, and every row starts on a byte boundary.
"""

import logging
import re
from typing import List, Tuple

import numpy as np

from ..exceptions import ConfigurationError, DimensionError, FormatError, PatternViolationError
from ..models.sparsity_models import NMPattern, PackedNM, Violation, violations_summary
from ..models.tensor_models import DenseMatrix
from .tensor_ops import as_dense

logger = logging.getLogger(__name__)

_PATTERN_RE = re.compile(r"^\s*(\d+)\s*:\s*(\d+)\s*$")


def parse_pattern(text: str) -> NMPattern:
    """Parse "N:M" (for example "2:4")"""
    match = _PATTERN_RE.match(text or "")
    if not match:
        raise ConfigurationError(f"cannot parse pattern '{text}': expected N:M with integers, e.g. 2:4")
    return NMPattern.build(n=int(match.group(1)), m=int(match.group(2)))


def check_groupable(cols: int, pattern: NMPattern) -> None:
    if cols % pattern.m != 0:
        raise DimensionError(f"width {cols} is not a multiple of the group size m={pattern.m}")


def encode_indices(local: np.ndarray, pattern: NMPattern) -> np.ndarray:
    """Bit-pack (rows, groups*n) in-group indices into (rows, meta_row_bytes) uint8"""
    bits = pattern.index_bits
    shifts = np.arange(bits, dtype=np.int64)
    bit_planes = ((local.astype(np.int64)[..., None] >> shifts) & 1).astype(np.uint8)
    flat = bit_planes.reshape(local.shape[0], -1)
    return np.packbits(flat, axis=1, bitorder="little")


def decode_indices(p: PackedNM) -> np.ndarray:
    """In-group indices of every stored value, shape (rows, groups*n)"""
    bits = p.pattern.index_bits
    slots = p.groups_per_row * p.pattern.n
    planes = np.unpackbits(p.meta, axis=1, count=slots * bits, bitorder="little")
    planes = planes.reshape(p.rows, slots, bits).astype(np.int64)
    return (planes << np.arange(bits, dtype=np.int64)).sum(axis=-1)


def select_for_packing(groups: np.ndarray, n: int) -> np.ndarray:
    """Ascending positions of the nonzeros of each group, padded with the lowest-index zeros

    groups has shape (rows, G, m) and must hold at most n nonzeros per group.
    """
    m = groups.shape[-1]
    zero_rank = (groups == 0).astype(np.int64) * m + np.arange(m, dtype=np.int64)
    chosen = np.argsort(zero_rank, axis=-1, kind="stable")[..., :n]
    return np.sort(chosen, axis=-1)


def pack(masked, pattern: NMPattern) -> PackedNM:
    """Compress a matrix that already satisfies the pattern"""
    x = as_dense(masked, "masked")
    rows, cols = x.shape
    check_groupable(cols, pattern)
    groups = x.reshape(rows, pattern.groups(cols), pattern.m)

    counts = np.count_nonzero(groups, axis=-1)
    over = np.argwhere(counts > pattern.n)
    if over.size:
        row, group = (int(v) for v in over[0])
        logger.error(f"{len(over)} groups violate {pattern}; first at row {row}, group {group}")
        raise PatternViolationError(row, group, int(counts[row, group]), pattern.n)

    local = select_for_packing(groups, pattern.n)
    values = np.take_along_axis(groups, local, axis=-1).reshape(rows, -1)
    meta = encode_indices(local.reshape(rows, -1), pattern)
    return PackedNM(
        rows=rows,
        cols=cols,
        pattern=pattern,
        values=np.ascontiguousarray(values, dtype=np.float32),
        meta=meta,
    )


def validate(p: PackedNM) -> List[Violation]:
    """Every broken invariant of a packed matrix; never raises"""
    pattern = p.pattern
    violations: List[Violation] = []

    if p.cols % pattern.m != 0:
        return [Violation(rule="width not a multiple of m", detail=f"cols={p.cols}, m={pattern.m}")]
    expected_values = (p.rows, pattern.groups(p.cols) * pattern.n)
    if p.values.shape != expected_values:
        violations.append(Violation(rule="values shape", detail=f"{p.values.shape} != {expected_values}"))
    expected_meta = (p.rows, pattern.meta_row_bytes(p.cols))
    if p.meta.shape != expected_meta or p.meta.dtype != np.uint8:
        violations.append(Violation(rule="meta shape", detail=f"{p.meta.dtype} {p.meta.shape} != uint8 {expected_meta}"))
    if violations:
        return violations

    local = decode_indices(p).reshape(p.rows, pattern.groups(p.cols), pattern.n)
    out_of_range = np.any(local >= pattern.m, axis=-1)
    for row, group in np.argwhere(out_of_range):
        violations.append(
            Violation(rule="index out of range", row=int(row), group=int(group), detail=f"indices {local[row, group].tolist()}, m={pattern.m}")
        )
    if pattern.n > 1:
        descending = np.any(np.diff(local, axis=-1) <= 0, axis=-1)
        for row, group in np.argwhere(descending):
            violations.append(
                Violation(rule="non-ascending indices", row=int(row), group=int(group), detail=f"indices {local[row, group].tolist()}")
            )
    return violations


def ensure_valid(p: PackedNM) -> None:
    violations = validate(p)
    if violations:
        logger.error(f"packed matrix failed validation with {len(violations)} violations")
        raise FormatError(f"corrupted packed metadata: {violations_summary(violations)}")


def unpack(p: PackedNM) -> DenseMatrix:
    """Scatter the kept values back to their dense positions"""
    ensure_valid(p)
    pattern = p.pattern
    n_groups = p.groups_per_row
    local = decode_indices(p).reshape(p.rows, n_groups, pattern.n)
    dense = np.zeros((p.rows, n_groups, pattern.m), dtype=np.float32)
    np.put_along_axis(dense, local, p.values.reshape(p.rows, n_groups, pattern.n), axis=-1)
    return dense.reshape(p.rows, p.cols)


def storage_bytes(p: PackedNM) -> Tuple[int, int, int]:
    """(value bytes, metadata bytes, bytes of the dense float32 equivalent)"""
    return int(p.values.nbytes), int(p.meta.nbytes), int(p.rows * p.cols * 4)
