from typing import Any, Optional

from pydantic import Field, model_validator

from ..config import settings
from ..exceptions import ConfigurationError
from .base import LynxModel
from .sparsity_models import NMPattern


class KernelConfig(LynxModel):
    """Cache tiling of the CPU kernels"""
    tile_m: int = Field(default_factory=lambda: settings.tile_m, ge=1)
    tile_n: int = Field(default_factory=lambda: settings.tile_n, ge=1)
    tile_k: int = Field(default_factory=lambda: settings.tile_k, ge=1)
    parallel_rows: bool = False

    @classmethod
    def for_pattern(cls, pattern: NMPattern, tile_k: Optional[int] = None, **kwargs: Any) -> "KernelConfig":
        """Tiling for one pattern; without an explicit tile_k the default is rounded down to a multiple of m"""
        if tile_k is None:
            tile_k = max(pattern.m, settings.tile_k // pattern.m * pattern.m)
        given = {key: value for key, value in kwargs.items() if value is not None}
        return cls.build(tile_k=tile_k, **given).check(pattern)

    def check(self, pattern: NMPattern) -> "KernelConfig":
        if self.tile_k % pattern.m != 0:
            raise ConfigurationError(f"tile_k={self.tile_k} is not a multiple of m={pattern.m}")
        return self

    def slots_per_tile(self, pattern: NMPattern) -> int:
        """Packed values covered by one k-tile"""
        return self.tile_k // pattern.m * pattern.n


class FusedTiming(LynxModel):
    """Per-phase wall-clock durations of one fused sparse linear call"""
    sparsify_ns: int = Field(0, ge=0)
    pack_ns: int = Field(0, ge=0)
    multiply_ns: int = Field(0, ge=0)
    total_ns: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check_total_covers_phases(self):
        if self.total_ns < max(self.sparsify_ns, self.pack_ns, self.multiply_ns):
            raise ValueError("total_ns must cover every phase")
        return self

    @property
    def sparse_cost_pct(self) -> float:
        """Share of the total spent selecting and packing"""
        if self.total_ns == 0:
            return 0.0
        return min(100.0, 100.0 * (self.sparsify_ns + self.pack_ns) / self.total_ns)
