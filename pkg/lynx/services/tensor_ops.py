import logging
from typing import Optional, Tuple

import numpy as np

from ..exceptions import ConfigurationError, DimensionError, NumericError
from ..models.kernel_models import KernelConfig
from ..models.tensor_models import DenseMatrix, DistributionKind, RandomSpec
from . import kernels

logger = logging.getLogger(__name__)


def as_dense(m, name: str = "matrix") -> DenseMatrix:
    """Coerce to a C-contiguous float32 matrix of rank 2 with no empty dimension"""
    arr = np.ascontiguousarray(m, dtype=np.float32)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be a matrix, got rank {arr.ndim}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"{name} has an empty dimension: {arr.shape}")
    return arr


def check_finite(m: np.ndarray, name: str = "matrix") -> None:
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{name} contains non-finite values")


def gemm_instrumented(x, w, cfg: Optional[KernelConfig] = None) -> Tuple[DenseMatrix, int]:
    """Y = X W^T with W stored D_out x D_in, plus the multiply-add count"""
    x = as_dense(x, "x")
    w = as_dense(w, "w")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"cannot contract x {x.shape} with w {w.shape}: inner dimensions differ")
    cfg = cfg or KernelConfig()
    return kernels.dense_matmul(x, w, cfg.tile_m, cfg.tile_n, cfg.tile_k, cfg.parallel_rows)


def gemm(x, w, cfg: Optional[KernelConfig] = None) -> DenseMatrix:
    return gemm_instrumented(x, w, cfg)[0]


def frobenius_norm(m) -> float:
    """sqrt of the sum of squares, accumulated in float64"""
    arr = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(arr * arr)))


def column_l2_norms(m) -> np.ndarray:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"expected a matrix, got rank {arr.ndim}")
    return np.sqrt(np.sum(arr * arr, axis=0))


def sample(spec: RandomSpec, rows: int, cols: int) -> DenseMatrix:
    """Draw a rows x cols matrix from the spec; the same seed always yields the same bits"""
    if not isinstance(spec, RandomSpec):
        raise ConfigurationError(f"expected a RandomSpec, got {type(spec).__name__}")
    if rows < 1 or cols < 1:
        raise DimensionError(f"cannot sample an empty {rows}x{cols} matrix")

    rng = np.random.Generator(np.random.PCG64(spec.seed))
    if spec.kind == DistributionKind.GAUSSIAN:
        out = rng.normal(spec.mean, spec.stddev, size=(rows, cols))
    else:
        active = rng.random((rows, cols)) < spec.active_fraction
        slab = rng.normal(0.0, spec.slab_stddev, size=(rows, cols))
        spike = rng.normal(0.0, spec.spike_stddev, size=(rows, cols))
        out = np.where(active, slab, spike)
    return np.ascontiguousarray(out, dtype=np.float32)
