import base64
import csv
import hashlib
import io
import logging
from collections import defaultdict
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from ..config import settings
from ..exceptions import DimensionError, UndefinedReferenceError
from ..models.kernel_models import KernelConfig
from ..models.lowrank_models import Solver, TrainConfig
from ..models.report_models import ComparisonReport, Histogram, LayerReport, MethodResult, SweepReport
from ..models.sparsity_models import CompensationGranularity, NMPattern, ScoreMethod, ScoreSpec
from ..models.stack_models import ExecMode, ExecPolicy, Layer, Stack
from ..models.tensor_models import RNG_ALGORITHM
from .dit_stack import default_policy, dense_inputs, fit_stack_lora, fit_stack_slim, forward, preset_skip_list, run_layer
from .sparsifier import prune_for_batch
from .spmm import fused_sparse_linear
from .tensor_ops import as_dense, frobenius_norm, gemm

logger = logging.getLogger(__name__)

SA_NATIVE = "SA-Native"
SA_NC = "SA-NC"
SA_NC_LORA = "SA-NC-LoRA"
SA_NC_LORA_SL = "SA-NC-LoRA-SL"
WEIGHT_BASELINES = {
    "SW-Magnitude": ScoreMethod.MAGNITUDE,
    "SW-Wanda": ScoreMethod.WANDA,
    "SW-RIA": ScoreMethod.RIA,
    "SW-BaWA": ScoreMethod.BAWA,
}
SW_SLIM = "SW-SLiM"

SWEEP_CSV_COLUMNS = ("layer", "kind", "depth", "method", "rfe", "active_fraction")
COMPARISON_CSV_COLUMNS = ("layer", "method", "rfe")


def tensor_digest(m: np.ndarray) -> str:
    """base64 sha256 of the float32 payload"""
    payload = np.ascontiguousarray(m, dtype="<f4").tobytes()
    return base64.b64encode(hashlib.sha256(payload).digest()).decode("ascii")


def rfe(y_full, y_sparse) -> float:
    """|Y_full - Y_sparse|_F / |Y_full|_F"""
    full = np.asarray(y_full, dtype=np.float64)
    sparse = np.asarray(y_sparse, dtype=np.float64)
    if full.shape != sparse.shape:
        raise DimensionError(f"cannot compare outputs of shape {full.shape} and {sparse.shape}")
    reference = frobenius_norm(full)
    if reference == 0.0:
        raise UndefinedReferenceError("relative error is undefined against an all-zero reference")
    return frobenius_norm(full - sparse) / reference


def histogram(m, bins: Optional[int] = None) -> Histogram:
    """Values divided by max |v|, binned uniformly over [-1, 1]"""
    arr = np.asarray(m, dtype=np.float64)
    peak = float(np.max(np.abs(arr))) if arr.size else 0.0
    if peak == 0.0:
        raise UndefinedReferenceError("cannot normalize an all-zero matrix")
    counts, edges = np.histogram(arr / peak, bins=bins or settings.histogram_bins, range=(-1.0, 1.0))
    return Histogram(bin_edges=edges.tolist(), counts=counts.tolist(), normalization=peak)


def active_fraction(m, threshold: Optional[float] = None) -> float:
    """Share of entries whose max-abs normalized magnitude exceeds the threshold"""
    arr = np.abs(np.asarray(m, dtype=np.float64))
    peak = float(arr.max()) if arr.size else 0.0
    if peak == 0.0:
        return 0.0
    threshold = settings.active_threshold if threshold is None else threshold
    return float(np.mean(arr / peak > threshold))


def sweep_layer(
    layer: Layer,
    x,
    depth: int = 0,
    pattern: Optional[NMPattern] = None,
    score: Optional[ScoreSpec] = None,
    granularity: CompensationGranularity = CompensationGranularity.PER_TENSOR,
    eps: Optional[float] = None,
    kernel: Optional[KernelConfig] = None,
    policies: Sequence[ExecPolicy] = (),
) -> LayerReport:
    """Layer-local errors: every variant sees the same dense input"""
    pattern = pattern or NMPattern()
    score = score or ScoreSpec()
    x = as_dense(x, layer.name)
    y_full = gemm(x, layer.weight, kernel)

    y_weight = gemm(x, prune_for_batch(layer.weight, x, score, pattern), kernel)
    y_act, timing = fused_sparse_linear(x, layer.weight, pattern, granularity, eps, kernel)
    by_policy = {policy.name: rfe(y_full, run_layer(layer, x, policy)) for policy in policies}

    return LayerReport(
        name=layer.name,
        kind=layer.spec.kind.value,
        depth=depth,
        rfe_weight=rfe(y_full, y_weight),
        rfe_activation=rfe(y_full, y_act),
        rfe_by_policy=by_policy,
        histogram=histogram(x),
        weight_histogram=histogram(layer.weight),
        active_fraction=active_fraction(x),
        output_digest=tensor_digest(y_full),
        timings=timing,
    )


def layer_sweep(
    stack: Stack,
    x0,
    policies: Sequence[ExecPolicy] = (),
    pattern: Optional[NMPattern] = None,
    score: Optional[ScoreSpec] = None,
    granularity: CompensationGranularity = CompensationGranularity.PER_TENSOR,
    eps: Optional[float] = None,
) -> List[LayerReport]:
    """Weight- and activation-sparsity error of every layer on its dense-pass input"""
    for policy in policies:
        policy.check_layers(stack.names)
    inputs = dense_inputs(stack, x0)
    reports = [
        sweep_layer(layer, inputs[layer.name], layer.spec.block, pattern, score, granularity, eps, policies=policies)
        for layer in stack.layers
    ]
    logger.info(f"swept {len(reports)} layers")
    return reports


def sweep_report(stack: Stack, x0, reports: Optional[List[LayerReport]] = None, **kwargs) -> SweepReport:
    reports = layer_sweep(stack, x0, **kwargs) if reports is None else reports
    return SweepReport(
        preset=stack.config.preset.value,
        pattern=str(kwargs.get("pattern") or NMPattern()),
        active_threshold=settings.active_threshold,
        score_eps=settings.score_eps,
        rng_algorithm=RNG_ALGORITHM,
        layers=reports,
    )


def compare_methods(stack: Stack, x0, methods: Sequence[ExecPolicy]) -> ComparisonReport:
    """End-to-end and per-layer (propagated) error of each named policy against the dense stack"""
    for policy in methods:
        policy.check_layers(stack.names)
    y_ref, ref_records = forward(stack, x0, default_policy(stack, name="dense"))

    results = []
    for policy in methods:
        y, records = forward(stack, x0, policy)
        per_layer = {name: rfe(ref_records[name].output, io_.output) for name, io_ in records.items()}
        results.append(
            MethodResult(name=policy.name, end_to_end_rfe=rfe(y_ref, y), per_layer_rfe=per_layer, output_digest=tensor_digest(y))
        )
        logger.info(f"{policy.name}: end-to-end RFE {results[-1].end_to_end_rfe:.4g}")

    return ComparisonReport(
        preset=stack.config.preset.value,
        methods=results,
        notes={
            "eps": settings.eps,
            "score_eps": settings.score_eps,
            "rng_algorithm": RNG_ALGORITHM,
            "reference_digest": tensor_digest(y_ref),
        },
    )


def method_ladder(
    stack: Stack,
    x0,
    rank: Optional[int] = None,
    solver: Solver = Solver.RRR,
    pattern: Optional[NMPattern] = None,
    train: Optional[TrainConfig] = None,
    weight_baselines: bool = True,
) -> List[ExecPolicy]:
    """Activation-sparse ablation steps followed by the weight-sparse baselines"""
    pattern = pattern or NMPattern()
    act = ExecMode.ACTIVATION_SPARSE
    nc = CompensationGranularity.PER_TENSOR
    loras = fit_stack_lora(stack, x0, pattern, nc, rank=rank, solver=solver, train=train)
    skip_loras = loras
    if preset_skip_list(stack):
        # fitted along the pass that keeps the skip list dense
        skip_loras = fit_stack_lora(stack, x0, pattern, nc, rank=rank, solver=solver, train=train, skip=True)

    ladder = [
        default_policy(stack, act, CompensationGranularity.NONE, pattern=pattern, name=SA_NATIVE),
        default_policy(stack, act, nc, pattern=pattern, name=SA_NC),
        default_policy(stack, act, nc, loras=loras, pattern=pattern, name=SA_NC_LORA),
        default_policy(stack, act, nc, loras=skip_loras, skip=True, pattern=pattern, name=SA_NC_LORA_SL),
    ]
    if weight_baselines:
        for name, method in WEIGHT_BASELINES.items():
            ladder.append(default_policy(stack, ExecMode.WEIGHT_SPARSE, score=ScoreSpec(method=method), pattern=pattern, name=name))
        wanda = ScoreSpec(method=ScoreMethod.WANDA)
        slim = fit_stack_slim(stack, x0, wanda, pattern)
        ladder.append(default_policy(stack, ExecMode.WEIGHT_SPARSE, score=wanda, loras=slim, pattern=pattern, name=SW_SLIM))
    return ladder


def _mean_by(reports: Iterable[LayerReport], key) -> Dict:
    grouped = defaultdict(list)
    for report in reports:
        grouped[key(report)].append(report)
    summary = {}
    for group, members in grouped.items():
        summary[group] = {
            "rfe_weight": float(np.mean([r.rfe_weight for r in members if r.rfe_weight is not None] or [np.nan])),
            "rfe_activation": float(np.mean([r.rfe_activation for r in members if r.rfe_activation is not None] or [np.nan])),
            "count": len(members),
        }
    return summary


def aggregate_by_kind(reports: Iterable[LayerReport]) -> Dict[str, Dict[str, float]]:
    return _mean_by(reports, lambda r: r.kind)


def aggregate_by_depth(reports: Iterable[LayerReport]) -> Dict[int, Dict[str, float]]:
    return dict(sorted(_mean_by(reports, lambda r: r.depth).items()))


def skip_candidates(reports: Iterable[LayerReport], top_k: int = 2) -> List[str]:
    """Layer kinds ranked by mean activation-sparsity error, most sensitive first"""
    by_kind = aggregate_by_kind(reports)
    ranked = sorted(by_kind, key=lambda kind: by_kind[kind]["rfe_activation"], reverse=True)
    return ranked[:top_k]


def _to_csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


def reports_to_csv(reports: Iterable[LayerReport]) -> str:
    """One row per (layer, method)"""
    rows = []
    for r in reports:
        methods = {"weight-sparse": r.rfe_weight, "activation-sparse": r.rfe_activation, **r.rfe_by_policy}
        for method, value in methods.items():
            rows.append([r.name, r.kind, r.depth, method, value, r.active_fraction])
    return _to_csv(SWEEP_CSV_COLUMNS, rows)


def comparison_to_csv(report: ComparisonReport) -> str:
    """One row per (layer, method); the end-to-end error is listed under layer "<output>" """
    rows = []
    for method in report.methods:
        rows.append(["<output>", method.name, method.end_to_end_rfe])
        rows.extend([layer, method.name, value] for layer, value in method.per_layer_rfe.items())
    return _to_csv(COMPARISON_CSV_COLUMNS, rows)
