from enum import Enum
from typing import Any, Dict, Optional

import numpy as np
from pydantic import Field, model_validator

from ..config import settings
from .base import LynxModel


class Solver(str, Enum):
    RRR = "rrr"
    GD = "gd"
    SLIM = "slim"


class FitInfo(LynxModel):
    """Provenance recorded next to a fitted pair"""
    solver: Solver
    seed: Optional[int] = None
    rank_deficient: bool = False
    numerical_rank: Optional[int] = None
    final_loss: Optional[float] = None
    config: Dict[str, Any] = Field(default_factory=dict)


class LoraPair(LynxModel):
    """Low-rank compensation branch, applied as X (lA lB)^T

    lA is D_out x R and lB is R x D_in, both float32.
    """
    la: np.ndarray
    lb: np.ndarray
    info: Optional[FitInfo] = None

    @model_validator(mode="after")
    def _check_factor_shapes(self):
        if self.la.ndim != 2 or self.lb.ndim != 2:
            raise ValueError("LoRA factors must be matrices")
        if self.la.shape[1] != self.lb.shape[0]:
            raise ValueError(f"rank mismatch: lA {self.la.shape} vs lB {self.lb.shape}")
        if self.la.shape[1] < 1:
            raise ValueError("rank must be at least 1")
        if self.la.dtype != np.float32 or self.lb.dtype != np.float32:
            raise ValueError("LoRA factors must be float32")
        return self

    @property
    def rank(self) -> int:
        return self.la.shape[1]

    @property
    def d_out(self) -> int:
        return self.la.shape[0]

    @property
    def d_in(self) -> int:
        return self.lb.shape[1]

    @classmethod
    def zeros(cls, d_out: int, d_in: int, rank: int) -> "LoraPair":
        return cls.build(
            la=np.zeros((d_out, rank), dtype=np.float32),
            lb=np.zeros((rank, d_in), dtype=np.float32),
        )


class TrainConfig(LynxModel):
    """Plain gradient descent on the layer-local compensation loss"""
    steps: int = Field(2000, ge=1)
    learning_rate: float = Field(default_factory=lambda: settings.learning_rate, gt=0.0)
    batch: int = Field(256, ge=1)  # rows per step when a single matrix is split
    seed: int = Field(0, ge=0, lt=2**64)
    init_scale: float = Field(default_factory=lambda: settings.init_scale, ge=0.0)
    log_every: int = Field(100, ge=1)
