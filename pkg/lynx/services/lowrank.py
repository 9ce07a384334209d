import logging
from pathlib import Path
from typing import Iterable, List, Optional, Tuple, Union

import numpy as np
import scipy.linalg
from pydantic import ValidationError

from ..config import settings
from ..exceptions import ConfigurationError, DimensionError, FormatError, TrainingError
from ..models.lowrank_models import FitInfo, LoraPair, Solver, TrainConfig
from ..models.sparsity_models import CompensationGranularity, NMPattern
from ..utils.file_utils import load_tensor, read_json, save_tensor, write_json
from .sparsifier import sparsify_activation
from .tensor_ops import as_dense

logger = logging.getLogger(__name__)

LORA_A_FILE = "lA.lynx"
LORA_B_FILE = "lB.lynx"
LORA_META_FILE = "lora.json"


def _check_rank(rank: int, d_out: int, d_in: int) -> int:
    if not 1 <= rank <= min(d_out, d_in):
        raise ConfigurationError(f"rank {rank} outside [1, {min(d_out, d_in)}] for a {d_out}x{d_in} layer")
    return int(rank)


def compensation_target(
    x,
    w,
    pattern: NMPattern,
    granularity: CompensationGranularity,
    eps: Optional[float] = None,
    reference=None,
) -> Tuple[np.ndarray, np.ndarray]:
    """(X in float64, E = Y_ref - S(X) W^T in float64), the regression the low-rank branch solves

    Y_ref defaults to X W^T, the layer's dense output on the same input. Passing
    the output of a dense reference pass instead lets the branch also absorb
    the drift of an input that reached the layer through sparse layers.
    """
    x = as_dense(x, "x")
    w = as_dense(w, "w")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"cannot contract x {x.shape} with w {w.shape}")
    _, sx = sparsify_activation(x, pattern, granularity, eps)
    x64 = x.astype(np.float64)
    if reference is None:
        return x64, (x64 - sx.astype(np.float64)) @ w.astype(np.float64).T

    reference = np.asarray(reference, dtype=np.float64)
    if reference.shape != (x.shape[0], w.shape[0]):
        raise DimensionError(f"reference output {reference.shape} does not match {(x.shape[0], w.shape[0])}")
    return x64, reference - sx.astype(np.float64) @ w.astype(np.float64).T


def loss_and_gradients(x, target, la, lb) -> Tuple[float, np.ndarray, np.ndarray]:
    """Loss |E - X lB^T lA^T|^2 and its gradients with respect to lA and lB"""
    x = np.asarray(x, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    la = np.asarray(la, dtype=np.float64)
    lb = np.asarray(lb, dtype=np.float64)
    hidden = x @ lb.T
    residual = target - hidden @ la.T
    loss = float(np.sum(residual * residual))
    grad_a = -2.0 * residual.T @ hidden
    grad_b = -2.0 * (la.T @ residual.T) @ x
    return loss, grad_a, grad_b


def compensation_loss(
    x,
    w,
    lora: Optional[LoraPair],
    pattern: NMPattern,
    granularity: CompensationGranularity = CompensationGranularity.PER_TENSOR,
    eps: Optional[float] = None,
    reference=None,
) -> float:
    """|Y_ref - (S(X) W^T + X (lA lB)^T)|_F^2 with Y_ref = X W^T unless given"""
    x64, target = compensation_target(x, w, pattern, granularity, eps, reference)
    if lora is None:
        return float(np.sum(target * target))
    if lora.d_in != x64.shape[1] or lora.d_out != target.shape[1]:
        raise DimensionError(
            f"LoRA pair {lora.d_out}x{lora.rank}x{lora.d_in} does not fit a {target.shape[1]}x{x64.shape[1]} layer"
        )
    return loss_and_gradients(x64, target, lora.la, lora.lb)[0]


def rrr_fit(
    x_batch,
    w,
    pattern: NMPattern,
    granularity: CompensationGranularity = CompensationGranularity.PER_TENSOR,
    eps: Optional[float] = None,
    rank: Optional[int] = None,
    cutoff: Optional[float] = None,
    reference=None,
) -> LoraPair:
    """Closed-form rank-R minimizer of the compensation loss (reduced-rank regression)"""
    x64, target = compensation_target(x_batch, w, pattern, granularity, eps, reference)
    d_in = x64.shape[1]
    d_out = target.shape[1]
    rank = _check_rank(settings.lora_rank if rank is None else rank, d_out, d_in)
    cutoff = settings.sv_cutoff if cutoff is None else cutoff

    q, t = scipy.linalg.qr(x64, mode="economic")
    coef, _, numerical_rank, _ = scipy.linalg.lstsq(t, q.T @ target, cond=cutoff)
    fitted = t @ coef
    _, _, vt = scipy.linalg.svd(fitted, full_matrices=False)

    keep = min(rank, vt.shape[0])
    v = np.zeros((d_out, rank))
    v[:, :keep] = vt[:keep].T
    la = v
    lb = (coef @ v).T

    rank_deficient = int(numerical_rank) < d_in
    if rank_deficient:
        logger.warning(f"activation batch has numerical rank {numerical_rank} < {d_in}; using the minimum-norm fit")

    la = la.astype(np.float32)
    lb = lb.astype(np.float32)
    final_loss = loss_and_gradients(x64, target, la, lb)[0]
    info = FitInfo(
        solver=Solver.RRR,
        rank_deficient=rank_deficient,
        numerical_rank=int(numerical_rank),
        final_loss=final_loss,
        config={
            "rank": rank,
            "pattern": str(pattern),
            "granularity": granularity.value,
            "eps": settings.eps if eps is None else eps,
            "sv_cutoff": cutoff,
        },
    )
    logger.info(f"rrr fit rank {rank}: loss {final_loss:.6g} (zero-branch {float(np.sum(target * target)):.6g})")
    return LoraPair(la=la, lb=lb, info=info)


def _as_batches(x_batches: Union[np.ndarray, Iterable[np.ndarray]], batch: int) -> List[np.ndarray]:
    if isinstance(x_batches, np.ndarray):
        x = as_dense(x_batches, "x")
        return [x[i:i + batch] for i in range(0, x.shape[0], batch)]
    batches = [as_dense(b, "x batch") for b in x_batches]
    if not batches:
        raise ConfigurationError("gd_fit needs at least one activation batch")
    return batches


def _reference_batches(reference, x_batches, batch: int, count: int) -> List[Optional[np.ndarray]]:
    if reference is None:
        return [None] * count
    if not isinstance(x_batches, np.ndarray):
        raise ConfigurationError("a reference output needs a single activation matrix, not pre-split batches")
    reference = np.asarray(reference, dtype=np.float64)
    if reference.ndim != 2 or reference.shape[0] != x_batches.shape[0]:
        raise DimensionError(f"reference output {reference.shape} does not cover {x_batches.shape[0]} rows")
    return [reference[i:i + batch] for i in range(0, reference.shape[0], batch)]


def gd_fit(
    x_batches: Union[np.ndarray, Iterable[np.ndarray]],
    w,
    pattern: NMPattern,
    granularity: CompensationGranularity = CompensationGranularity.PER_TENSOR,
    eps: Optional[float] = None,
    rank: Optional[int] = None,
    cfg: Optional[TrainConfig] = None,
    reference=None,
) -> Tuple[LoraPair, List[float]]:
    """Plain gradient descent on the compensation loss with W frozen

    The sparsification operator is applied to the data once; no gradient flows
    through it. Batches are cycled; each trace entry is the loss of the batch
    used at that step, before the update.
    """
    cfg = cfg or TrainConfig()
    w = as_dense(w, "w")
    batches = _as_batches(x_batches, cfg.batch)
    problems = [
        compensation_target(b, w, pattern, granularity, eps, ref)
        for b, ref in zip(batches, _reference_batches(reference, x_batches, cfg.batch, len(batches)))
    ]
    d_out, d_in = w.shape
    rank = _check_rank(settings.lora_rank if rank is None else rank, d_out, d_in)

    rng = np.random.default_rng(cfg.seed)
    la = rng.uniform(-cfg.init_scale, cfg.init_scale, size=(d_out, rank))
    lb = rng.uniform(-cfg.init_scale, cfg.init_scale, size=(rank, d_in))
    if cfg.init_scale == 0.0:
        logger.warning("init_scale is 0: both gradients vanish at the zero pair and the loss trace stays flat")

    trace: List[float] = []
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(cfg.steps):
            xb, target = problems[step % len(problems)]
            loss, grad_a, grad_b = loss_and_gradients(xb, target, la, lb)
            if not np.isfinite(loss):
                logger.error(f"gradient descent diverged at step {step}")
                raise TrainingError("loss became non-finite", step=step)
            trace.append(loss)
            la -= cfg.learning_rate * grad_a / xb.shape[0]
            lb -= cfg.learning_rate * grad_b / xb.shape[0]
            if step % cfg.log_every == 0:
                logger.debug(f"gd step {step}: loss {loss:.6g}")

    if not (np.all(np.isfinite(la)) and np.all(np.isfinite(lb))):
        raise TrainingError("parameters became non-finite", step=cfg.steps)

    info = FitInfo(
        solver=Solver.GD,
        seed=cfg.seed,
        final_loss=trace[-1],
        config={
            "rank": rank,
            "pattern": str(pattern),
            "granularity": granularity.value,
            **cfg.model_dump(),
        },
    )
    logger.info(f"gd fit rank {rank}: {cfg.steps} steps, loss {trace[0]:.6g} -> {trace[-1]:.6g}")
    return LoraPair(la=la.astype(np.float32), lb=lb.astype(np.float32), info=info), trace


def slim_rank(d_out: int, d_in: int, ratio: Optional[float] = None) -> int:
    ratio = settings.slim_rank_ratio if ratio is None else ratio
    return max(1, int(round(ratio * min(d_out, d_in))))


def slim_init(w, w_pruned, rank: int) -> LoraPair:
    """Truncated SVD of the pruning delta: lA = U_R S_R, lB = V_R^T"""
    w = as_dense(w, "w")
    w_pruned = as_dense(w_pruned, "w_pruned")
    if w.shape != w_pruned.shape:
        raise DimensionError(f"pruned weight {w_pruned.shape} does not match weight {w.shape}")
    rank = _check_rank(rank, *w.shape)

    delta = w.astype(np.float64) - w_pruned.astype(np.float64)
    u, s, vt = scipy.linalg.svd(delta, full_matrices=False)
    la = u[:, :rank] * s[:rank]
    lb = vt[:rank]
    info = FitInfo(solver=Solver.SLIM, config={"rank": rank})
    return LoraPair(la=la.astype(np.float32), lb=lb.astype(np.float32), info=info)


def slim_residual(w, w_pruned, lora: LoraPair) -> float:
    """|W - W_pruned - lA lB|_F"""
    delta = np.asarray(w, dtype=np.float64) - np.asarray(w_pruned, dtype=np.float64)
    approx = lora.la.astype(np.float64) @ lora.lb.astype(np.float64)
    return float(np.linalg.norm(delta - approx))


def rank_sweep(
    x,
    w,
    pattern: NMPattern,
    granularity: CompensationGranularity = CompensationGranularity.PER_TENSOR,
    eps: Optional[float] = None,
    ranks: Iterable[int] = (1, 2, 4, 8, 16, 32, 64),
) -> List[Tuple[int, float]]:
    """Closed-form compensation loss at each rank"""
    results = []
    for rank in ranks:
        pair = rrr_fit(x, w, pattern, granularity, eps, rank)
        results.append((int(rank), compensation_loss(x, w, pair, pattern, granularity, eps)))
    return results


def save_lora(directory: Union[str, Path], lora: LoraPair) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_tensor(directory / LORA_A_FILE, lora.la)
    save_tensor(directory / LORA_B_FILE, lora.lb)
    info = lora.info.model_dump(mode="json") if lora.info else None
    write_json(directory / LORA_META_FILE, {"rank": lora.rank, "d_out": lora.d_out, "d_in": lora.d_in, "info": info})
    logger.info(f"saved rank-{lora.rank} LoRA pair to {directory}")
    return directory


def load_lora(directory: Union[str, Path]) -> LoraPair:
    directory = Path(directory)
    meta = read_json(directory / LORA_META_FILE)
    la = load_tensor(directory / LORA_A_FILE)
    lb = load_tensor(directory / LORA_B_FILE)
    try:
        info = FitInfo(**meta["info"]) if meta.get("info") else None
        pair = LoraPair(la=la, lb=lb, info=info)
    except (ValidationError, KeyError, TypeError) as e:
        raise FormatError(f"invalid LoRA directory {directory}: {e}") from e
    if pair.rank != meta.get("rank"):
        raise FormatError(f"{LORA_META_FILE} records rank {meta.get('rank')}, factors have rank {pair.rank}")
    return pair
