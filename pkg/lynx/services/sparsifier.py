import logging
from typing import Optional, Tuple

import numpy as np

from ..config import settings
from ..exceptions import ConfigurationError, DimensionError
from ..models.kernel_models import KernelConfig
from ..models.sparsity_models import CompensationGranularity, NMPattern, ScaleRecord, ScoreMethod, ScoreSpec
from ..models.tensor_models import DenseMatrix
from .nm_format import check_groupable
from .tensor_ops import as_dense, check_finite, column_l2_norms, gemm

logger = logging.getLogger(__name__)


def _grouped(x: np.ndarray, pattern: NMPattern) -> np.ndarray:
    check_groupable(x.shape[1], pattern)
    return x.reshape(x.shape[0], pattern.groups(x.shape[1]), pattern.m)


def keep_top(priority: np.ndarray, n: int) -> np.ndarray:
    """Boolean mask of the n highest-priority entries along the last axis, ties to the lowest index"""
    order = np.argsort(-priority, axis=-1, kind="stable")[..., :n]
    mask = np.zeros(priority.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def topk_mask(x, pattern: NMPattern) -> np.ndarray:
    """Keep the n largest magnitudes of each group of m"""
    x = as_dense(x, "x")
    groups = _grouped(x, pattern)
    return keep_top(np.abs(groups), pattern.n).reshape(x.shape)


def group_energies(groups: np.ndarray) -> np.ndarray:
    """Squared l2 norm of every (row, group), accumulated in float64"""
    g = groups.astype(np.float64)
    energy = np.zeros(g.shape[:-1], dtype=np.float64)
    for i in range(g.shape[-1]):
        energy += g[..., i] * g[..., i]
    return energy


def scales_from_energies(
    full: np.ndarray, kept: np.ndarray, granularity: CompensationGranularity, eps: float
) -> np.ndarray:
    """s = sqrt(|x|^2 / (|x~|^2 + eps)) reduced to the requested granularity

    full and kept are (rows, groups) energies. Tensor totals are summed per row
    first so every caller reduces in the same order.
    """
    if granularity == CompensationGranularity.NONE:
        return np.array(1.0)
    if granularity == CompensationGranularity.PER_GROUP:
        return np.sqrt(full / (kept + eps))
    row_full = full.sum(axis=1)
    row_kept = kept.sum(axis=1)
    if granularity == CompensationGranularity.PER_ROW:
        return np.sqrt(row_full / (row_kept + eps))
    return np.array(np.sqrt(row_full.sum() / (row_kept.sum() + eps)))


def scale_multiplier(scales: np.ndarray, granularity: CompensationGranularity) -> np.ndarray:
    """float32 factor broadcastable against (rows, groups, k) grouped data"""
    s32 = np.asarray(scales, dtype=np.float32)
    if granularity == CompensationGranularity.PER_ROW:
        return s32[:, None, None]
    if granularity == CompensationGranularity.PER_GROUP:
        return s32[:, :, None]
    return s32


def check_eps(eps: float) -> float:
    if not eps > 0 or not np.isfinite(eps):
        raise ConfigurationError(f"eps must be a positive finite number, got {eps}")
    return float(eps)


def sparsify_activation(
    x,
    pattern: NMPattern,
    granularity: CompensationGranularity = CompensationGranularity.PER_TENSOR,
    eps: Optional[float] = None,
) -> Tuple[ScaleRecord, DenseMatrix]:
    """Top-K mask the activation and rescale it to restore the pruned energy"""
    x = as_dense(x, "x")
    check_finite(x, "activation")
    eps = check_eps(settings.eps if eps is None else eps)
    groups = _grouped(x, pattern)

    mask = keep_top(np.abs(groups), pattern.n)
    kept = np.where(mask, groups, np.float32(0.0))
    scales = scales_from_energies(group_energies(groups), group_energies(kept), granularity, eps)
    if granularity == CompensationGranularity.NONE:
        sx = kept
    else:
        sx = kept * scale_multiplier(scales, granularity)

    record = ScaleRecord(granularity=granularity, eps=eps, scales=scales)
    return record, np.ascontiguousarray(sx.reshape(x.shape), dtype=np.float32)


def activation_norms(x) -> np.ndarray:
    """Per-input-channel l2 norms of the current batch"""
    return column_l2_norms(as_dense(x, "x"))


def score_weights(w, norms: Optional[np.ndarray], spec: ScoreSpec, eps: Optional[float] = None) -> np.ndarray:
    """Pruning importance of every weight, in float64"""
    w = as_dense(w, "w")
    eps = settings.score_eps if eps is None else eps
    magnitude = np.abs(w.astype(np.float64))

    if spec.method == ScoreMethod.MAGNITUDE:
        return magnitude

    if norms is None:
        raise ConfigurationError(f"{spec.method.value} scoring needs input-channel activation norms")
    norms = np.asarray(norms, dtype=np.float64).reshape(-1)
    if norms.shape[0] != w.shape[1]:
        raise DimensionError(f"{norms.shape[0]} activation norms for a weight with {w.shape[1]} input channels")

    if spec.method == ScoreMethod.WANDA:
        return magnitude * norms[None, :]

    if spec.method == ScoreMethod.RIA:
        col_sum = magnitude.sum(axis=0)
        row_sum = magnitude.sum(axis=1)
        relative = magnitude / (col_sum[None, :] + eps) + magnitude / (row_sum[:, None] + eps)
        return relative * norms[None, :] ** spec.a

    col_norm = np.sqrt(np.sum(magnitude * magnitude, axis=0))
    row_norm = np.sqrt(np.sum(magnitude * magnitude, axis=1))
    balanced = (
        magnitude / (col_norm[None, :] + eps) ** spec.theta1
        + magnitude / (row_norm[:, None] + eps) ** spec.theta2
    )
    return balanced * norms[None, :] ** spec.theta3


def prune_weights(w, scores, pattern: NMPattern) -> DenseMatrix:
    """Keep the n best-scored weights of every group along the input dimension"""
    w = as_dense(w, "w")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != w.shape:
        raise DimensionError(f"scores {scores.shape} do not match weight {w.shape}")
    mask = keep_top(_grouped(scores, pattern), pattern.n)
    return np.ascontiguousarray(np.where(mask.reshape(w.shape), w, np.float32(0.0)), dtype=np.float32)


def prune_for_batch(w, x, spec: ScoreSpec, pattern: NMPattern) -> DenseMatrix:
    """Score with statistics of the supplied batch, then prune"""
    norms = activation_norms(x) if spec.needs_activations else None
    return prune_weights(w, score_weights(w, norms, spec), pattern)


def weight_sparse_linear(x, w, scores, pattern: NMPattern, cfg: Optional[KernelConfig] = None) -> DenseMatrix:
    """Dense multiply with the pruned weight, Y = X W_s^T"""
    return gemm(x, prune_weights(w, scores, pattern), cfg)
