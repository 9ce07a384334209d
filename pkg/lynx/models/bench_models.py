from typing import Any, Dict, List

from pydantic import BaseModel, Field, model_validator

from ..config import settings
from .base import LynxModel
from .report_models import SCHEMA_VERSION
from .sparsity_models import CompensationGranularity, NMPattern


class BenchCase(LynxModel):
    """One M x K activation times N x K weight timing case"""
    m: int = Field(..., ge=1)
    n: int = Field(..., ge=1)
    k: int = Field(..., ge=1)
    repeats: int = Field(default_factory=lambda: settings.bench_repeats, ge=3)
    warmup: int = Field(default_factory=lambda: settings.bench_warmup, ge=0)
    pattern: NMPattern = Field(default_factory=NMPattern)
    granularity: CompensationGranularity = CompensationGranularity.PER_TENSOR
    lora_rank: int = Field(64, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)

    @model_validator(mode="after")
    def _check_k_divisible(self):
        if self.k % self.pattern.m != 0:
            raise ValueError(f"k={self.k} is not a multiple of m={self.pattern.m}")
        return self

    @property
    def label(self) -> str:
        return f"{self.m}x{self.n}x{self.k}"


class BenchRow(BaseModel):
    """Median durations for one case plus the quantities derived from them"""
    case: BenchCase
    dense_ns: int
    staged_sparse_ns: int
    fused_sparse_ns: int
    fused_lora_ns: int
    staged_sparse_cost_pct: float = Field(..., ge=0.0, le=100.0)
    sparse_cost_pct: float = Field(..., ge=0.0, le=100.0)
    speedup: float
    madd_ratio: float
    repeats_used: int
    checksum: str = ""

    def table_row(self) -> Dict[str, Any]:
        return {
            "shape": self.case.label,
            "dense_ms": self.dense_ns / 1e6,
            "staged_ms": self.staged_sparse_ns / 1e6,
            "fused_ms": self.fused_sparse_ns / 1e6,
            "fused_lora_ms": self.fused_lora_ns / 1e6,
            "speedup": self.speedup,
            "sparse_cost_pct": self.sparse_cost_pct,
            "staged_sparse_cost_pct": self.staged_sparse_cost_pct,
            "madd_ratio": self.madd_ratio,
        }


class BenchReport(BaseModel):
    schema_version: str = SCHEMA_VERSION
    header: str = (
        "CPU wall-clock at desk scale; speedup and sparse-cost are structurally comparable to GPU tables, "
        "absolute numbers are not"
    )
    mode: str = "single-threaded"
    environment: Dict[str, Any] = Field(default_factory=dict)
    rows: List[BenchRow] = Field(default_factory=list)
    soft_failures: List[str] = Field(default_factory=list)
