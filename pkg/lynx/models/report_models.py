from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field

from .kernel_models import FusedTiming

SCHEMA_VERSION = "1.0"


class Histogram(BaseModel):
    """Max-abs normalized value distribution over [-1, 1]"""
    bin_edges: List[float]
    counts: List[int]
    normalization: float = Field(..., gt=0.0)

    @property
    def total(self) -> int:
        return sum(self.counts)


class LayerReport(BaseModel):
    """Layer-local errors and distributions measured on the dense input"""
    name: str
    kind: str
    depth: int = Field(..., ge=0)
    rfe_weight: Optional[float] = Field(None, ge=0.0)
    rfe_activation: Optional[float] = Field(None, ge=0.0)
    rfe_by_policy: Dict[str, float] = Field(default_factory=dict)
    histogram: Histogram  # layer input activation
    weight_histogram: Histogram
    active_fraction: float = Field(..., ge=0.0, le=1.0)
    output_digest: str = ""
    timings: Optional[FusedTiming] = None


class SweepReport(BaseModel):
    schema_version: str = SCHEMA_VERSION
    preset: Optional[str] = None
    pattern: str = "2:4"
    active_threshold: float
    score_eps: float
    rng_algorithm: str
    layers: List[LayerReport] = Field(default_factory=list)


class MethodResult(BaseModel):
    name: str
    end_to_end_rfe: float = Field(..., ge=0.0)
    per_layer_rfe: Dict[str, float] = Field(default_factory=dict)
    output_digest: str = ""


class ComparisonReport(BaseModel):
    schema_version: str = SCHEMA_VERSION
    preset: Optional[str] = None
    reference: str = "dense"
    methods: List[MethodResult] = Field(default_factory=list)
    notes: Dict[str, Any] = Field(default_factory=dict)

    def result(self, name: str) -> MethodResult:
        for method in self.methods:
            if method.name == name:
                return method
        raise KeyError(name)
