"""
Sparse execution paths

spmm multiplies an already packed activation. The fused path selects, packs
and rescales the activation one k-tile at a time and hands the packed operand
straight to the same kernel, so staged and fused outputs agree bit-for-bit.
"""

import logging
import time
from typing import Optional, Tuple

import numpy as np

from ..config import settings
from ..exceptions import DimensionError
from ..models.kernel_models import FusedTiming, KernelConfig
from ..models.lowrank_models import LoraPair
from ..models.sparsity_models import CompensationGranularity, NMPattern, PackedNM
from ..models.tensor_models import DenseMatrix
from . import kernels
from .nm_format import check_groupable, encode_indices, ensure_valid
from .sparsifier import keep_top, check_eps, group_energies, scale_multiplier, scales_from_energies
from .tensor_ops import as_dense, check_finite, gemm

logger = logging.getLogger(__name__)


def _check_contraction(cols: int, w: np.ndarray) -> None:
    if cols != w.shape[1]:
        raise DimensionError(f"activation width {cols} does not match weight {w.shape} (D_out x D_in)")


def spmm_instrumented(
    p: PackedNM, w, cfg: Optional[KernelConfig] = None, check: bool = True
) -> Tuple[DenseMatrix, int]:
    """unpack(p) W^T through metadata gathers, plus the multiply-add count"""
    w = as_dense(w, "w")
    _check_contraction(p.cols, w)
    cfg = cfg.check(p.pattern) if cfg is not None else KernelConfig.for_pattern(p.pattern)
    if check:
        ensure_valid(p)
    return _run_sparse_kernel(p.values, p.meta, w, p.pattern, cfg)


def spmm(p: PackedNM, w, cfg: Optional[KernelConfig] = None, check: bool = True) -> DenseMatrix:
    return spmm_instrumented(p, w, cfg, check)[0]


def _run_sparse_kernel(values, meta, w, pattern: NMPattern, cfg: KernelConfig) -> Tuple[DenseMatrix, int]:
    return kernels.sparse_matmul(
        values,
        meta,
        w,
        pattern.n,
        pattern.m,
        pattern.index_bits,
        cfg.tile_m,
        cfg.tile_n,
        cfg.slots_per_tile(pattern),
        cfg.parallel_rows,
    )


def _select_and_pack(x: np.ndarray, pattern: NMPattern, cfg: KernelConfig, granularity: CompensationGranularity, eps: float):
    """Tile-wise Top-K selection and compression of x, followed by compensation

    Returns the scaled values, the metadata and the phase durations.
    """
    rows, cols = x.shape
    n, m = pattern.n, pattern.m
    n_groups = pattern.groups(cols)
    groups_per_tile = cfg.tile_k // m

    values = np.empty((rows, n_groups, n), dtype=np.float32)
    local = np.empty((rows, n_groups, n), dtype=np.int64)
    full_energy = np.empty((rows, n_groups), dtype=np.float64)
    kept_energy = np.empty((rows, n_groups), dtype=np.float64)
    sparsify_ns = 0
    pack_ns = 0

    for g0 in range(0, n_groups, groups_per_tile):
        g1 = min(g0 + groups_per_tile, n_groups)
        start = time.perf_counter_ns()
        tile = x[:, g0 * m:g1 * m].reshape(rows, g1 - g0, m)
        mask = keep_top(np.abs(tile), n)
        chosen = np.nonzero(mask)[-1].reshape(rows, g1 - g0, n)
        full_energy[:, g0:g1] = group_energies(tile)
        selected = time.perf_counter_ns()

        local[:, g0:g1] = chosen
        values[:, g0:g1] = np.take_along_axis(tile, chosen, axis=-1)
        kept_energy[:, g0:g1] = group_energies(values[:, g0:g1])
        packed = time.perf_counter_ns()
        sparsify_ns += selected - start
        pack_ns += packed - selected

    start = time.perf_counter_ns()
    meta = encode_indices(local.reshape(rows, -1), pattern)
    pack_ns += time.perf_counter_ns() - start

    start = time.perf_counter_ns()
    if granularity != CompensationGranularity.NONE:
        scales = scales_from_energies(full_energy, kept_energy, granularity, eps)
        values *= scale_multiplier(scales, granularity)
    sparsify_ns += time.perf_counter_ns() - start

    return values.reshape(rows, -1), meta, sparsify_ns, pack_ns


def fused_sparse_linear(
    x,
    w,
    pattern: NMPattern,
    granularity: CompensationGranularity = CompensationGranularity.PER_TENSOR,
    eps: Optional[float] = None,
    cfg: Optional[KernelConfig] = None,
) -> Tuple[DenseMatrix, FusedTiming]:
    """Y = S(X) W^T without materializing the masked dense activation"""
    begin = time.perf_counter_ns()
    x = as_dense(x, "x")
    w = as_dense(w, "w")
    _check_contraction(x.shape[1], w)
    check_groupable(x.shape[1], pattern)
    check_finite(x, "activation")
    cfg = cfg.check(pattern) if cfg is not None else KernelConfig.for_pattern(pattern)
    eps = check_eps(settings.eps if eps is None else eps)

    values, meta, sparsify_ns, pack_ns = _select_and_pack(x, pattern, cfg, granularity, eps)

    start = time.perf_counter_ns()
    y, _ = _run_sparse_kernel(values, meta, w, pattern, cfg)
    multiply_ns = time.perf_counter_ns() - start

    timing = FusedTiming(
        sparsify_ns=sparsify_ns,
        pack_ns=pack_ns,
        multiply_ns=multiply_ns,
        total_ns=time.perf_counter_ns() - begin,
    )
    return y, timing


def lora_residual(x, la, lb, cfg: Optional[KernelConfig] = None) -> DenseMatrix:
    """X (lA lB)^T evaluated as (X lB^T) lA^T"""
    x = as_dense(x, "x")
    la = as_dense(la, "lA")
    lb = as_dense(lb, "lB")
    if la.shape[1] != lb.shape[0]:
        raise DimensionError(f"rank mismatch: lA {la.shape} vs lB {lb.shape}")
    if lb.shape[1] != x.shape[1]:
        raise DimensionError(f"lB {lb.shape} does not accept inputs of width {x.shape[1]}")
    return gemm(gemm(x, lb, cfg), la, cfg)


def fused_sparse_lora_linear(
    x,
    w,
    la,
    lb,
    pattern: NMPattern,
    granularity: CompensationGranularity = CompensationGranularity.PER_TENSOR,
    eps: Optional[float] = None,
    cfg: Optional[KernelConfig] = None,
) -> DenseMatrix:
    """S(X) W^T + X (lA lB)^T; the low-rank branch sees the dense input"""
    w = as_dense(w, "w")
    la = as_dense(la, "lA")
    if la.shape[0] != w.shape[0]:
        raise DimensionError(f"lA {la.shape} does not produce the weight's {w.shape[0]} outputs")
    residual = lora_residual(x, la, lb, cfg)
    y, _ = fused_sparse_linear(x, w, pattern, granularity, eps, cfg)
    y += residual
    return y


def apply_lora(x, w, lora: LoraPair, pattern: NMPattern, granularity: CompensationGranularity, eps: Optional[float] = None, cfg: Optional[KernelConfig] = None) -> DenseMatrix:
    return fused_sparse_lora_linear(x, w, lora.la, lora.lb, pattern, granularity, eps, cfg)
