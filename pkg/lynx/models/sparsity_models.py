from enum import Enum
from typing import Any, List, Optional

import numpy as np
from pydantic import Field, field_serializer, model_validator

from .base import LynxModel


class NMPattern(LynxModel):
    """Keep n of every m consecutive values along the contraction dimension"""
    n: int = Field(2, ge=1)
    m: int = Field(4, ge=2, le=8)

    @model_validator(mode="after")
    def _check_n_below_m(self):
        if self.n >= self.m:
            raise ValueError(f"n must be smaller than m, got {self.n}:{self.m}")
        return self

    @property
    def index_bits(self) -> int:
        """Bits per stored index, ceil(log2 m)"""
        return (self.m - 1).bit_length()

    @property
    def density(self) -> float:
        return self.n / self.m

    def groups(self, cols: int) -> int:
        return cols // self.m

    def meta_row_bytes(self, cols: int) -> int:
        return (self.groups(cols) * self.n * self.index_bits + 7) // 8

    def __str__(self) -> str:
        return f"{self.n}:{self.m}"


class CompensationGranularity(str, Enum):
    NONE = "none"
    PER_TENSOR = "per-tensor"
    PER_ROW = "per-row"
    PER_GROUP = "per-group"


class ScoreMethod(str, Enum):
    MAGNITUDE = "magnitude"
    WANDA = "wanda"
    RIA = "ria"
    BAWA = "bawa"


class ScoreSpec(LynxModel):
    """Weight-pruning criterion; exponents default to the published settings"""
    method: ScoreMethod = ScoreMethod.MAGNITUDE
    a: float = Field(0.5, allow_inf_nan=False)  # RIA activation exponent
    theta1: float = Field(0.5, allow_inf_nan=False)
    theta2: float = Field(0.5, allow_inf_nan=False)
    theta3: float = Field(1.0, allow_inf_nan=False)

    @property
    def needs_activations(self) -> bool:
        return self.method != ScoreMethod.MAGNITUDE


class ScaleRecord(LynxModel):
    """Norm-compensation factors at the granularity they were computed

    scales has shape () for none/per-tensor, (rows,) for per-row and (rows, groups) for per-group.
    """
    granularity: CompensationGranularity
    eps: float
    scales: np.ndarray

    @field_serializer("scales")
    def _serialize_scales(self, scales: np.ndarray) -> Any:
        return scales.tolist()


class PackedNM(LynxModel):
    """Compressed N:M matrix: kept values plus bit-packed in-group indices

    values is (rows, groups * n) float32, meta is (rows, meta_row_bytes) uint8.
    """
    rows: int = Field(..., ge=1)
    cols: int = Field(..., ge=1)
    pattern: NMPattern
    values: np.ndarray
    meta: np.ndarray

    @model_validator(mode="after")
    def _check_storage_shapes(self):
        if self.cols % self.pattern.m != 0:
            raise ValueError(f"cols {self.cols} is not a multiple of m={self.pattern.m}")
        expected_values = (self.rows, self.pattern.groups(self.cols) * self.pattern.n)
        if self.values.shape != expected_values or self.values.dtype != np.float32:
            raise ValueError(f"values must be float32 {expected_values}, got {self.values.dtype} {self.values.shape}")
        expected_meta = (self.rows, self.pattern.meta_row_bytes(self.cols))
        if self.meta.shape != expected_meta or self.meta.dtype != np.uint8:
            raise ValueError(f"meta must be uint8 {expected_meta}, got {self.meta.dtype} {self.meta.shape}")
        return self

    @property
    def groups_per_row(self) -> int:
        return self.pattern.groups(self.cols)

    @property
    def shape(self) -> tuple:
        return (self.rows, self.cols)


class Violation(LynxModel):
    """One broken PackedNM invariant"""
    rule: str
    row: Optional[int] = None
    group: Optional[int] = None
    detail: str = ""

    def __str__(self) -> str:
        where = []
        if self.row is not None:
            where.append(f"row {self.row}")
        if self.group is not None:
            where.append(f"group {self.group}")
        location = ", ".join(where) or "matrix"
        return f"{location}: {self.rule}" + (f" ({self.detail})" if self.detail else "")


def violations_summary(violations: List[Violation], limit: int = 5) -> str:
    shown = "; ".join(str(v) for v in violations[:limit])
    more = len(violations) - limit
    return shown + (f"; and {more} more" if more > 0 else "")
