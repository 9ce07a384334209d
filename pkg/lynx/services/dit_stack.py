"""
Toy DiT layer stacks

Scaled-down linear layers named and shaped after the image branch of
double-stream models, the double/single hybrid, and single-stream models.
Attention is not simulated: Q, K and V are combined elementwise as
v * sigmoid(q * k) so every projection stays on the data path.
"""

import logging
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.special
from pydantic import ValidationError

from ..config import settings
from ..exceptions import ConfigurationError, DimensionError, FormatError
from ..models.kernel_models import KernelConfig
from ..models.lowrank_models import LoraPair, Solver, TrainConfig
from ..models.sparsity_models import CompensationGranularity, NMPattern, ScoreSpec
from ..models.stack_models import (
    ExecMode,
    ExecPolicy,
    Layer,
    LayerKind,
    LayerPolicy,
    LayerSpec,
    Preset,
    Stack,
    StackConfig,
    Stream,
)
from ..models.tensor_models import RNG_ALGORITHM, DenseMatrix, RandomSpec
from ..utils.file_utils import load_tensor, read_json, save_tensor, write_json
from .lowrank import gd_fit, rrr_fit, slim_init, slim_rank
from .sparsifier import prune_for_batch
from .spmm import fused_sparse_linear, fused_sparse_lora_linear, lora_residual
from .tensor_ops import as_dense, gemm, sample

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"

# (name suffix, kind, d_in, d_out) at full size; D = model width, F = feed-forward width
_QWEN_D, _QWEN_F = 3072, 12288
_QWEN_BLOCK = (
    ("attn.to_q", LayerKind.Q, _QWEN_D, _QWEN_D),
    ("attn.to_k", LayerKind.K, _QWEN_D, _QWEN_D),
    ("attn.to_v", LayerKind.V, _QWEN_D, _QWEN_D),
    ("attn.to_out.0", LayerKind.OUT, _QWEN_D, _QWEN_D),
    ("img_mlp.net.0.proj", LayerKind.UP, _QWEN_D, _QWEN_F),
    ("img_mlp.net.2", LayerKind.DOWN, _QWEN_F, _QWEN_D),
)

_FLUX_D, _FLUX_F = 3072, 12288
_FLUX_DOUBLE_BLOCK = (
    ("attn.a_to_qkv", LayerKind.QKV, _FLUX_D, 3 * _FLUX_D),
    ("attn.a_to_out", LayerKind.OUT, _FLUX_D, _FLUX_D),
    ("ff_a.0", LayerKind.UP, _FLUX_D, _FLUX_F),
    ("ff_a.2", LayerKind.DOWN, _FLUX_F, _FLUX_D),
)
_FLUX_SINGLE_BLOCK = (
    ("to_qkv_mlp", LayerKind.QKV_UP, _FLUX_D, 3 * _FLUX_D + _FLUX_F),
    ("proj_out", LayerKind.OUT_DOWN, _FLUX_D + _FLUX_F, _FLUX_D),
)

_ZIMAGE_D, _ZIMAGE_F = 3840, 10240
_ZIMAGE_BLOCK = (
    ("attention.to_q", LayerKind.Q, _ZIMAGE_D, _ZIMAGE_D),
    ("attention.to_k", LayerKind.K, _ZIMAGE_D, _ZIMAGE_D),
    ("attention.to_v", LayerKind.V, _ZIMAGE_D, _ZIMAGE_D),
    ("attention.to_out.0", LayerKind.OUT, _ZIMAGE_D, _ZIMAGE_D),
    ("feed_forward.w1", LayerKind.UP, _ZIMAGE_D, _ZIMAGE_F),
    ("feed_forward.w3", LayerKind.GATE, _ZIMAGE_D, _ZIMAGE_F),
    ("feed_forward.w2", LayerKind.DOWN, _ZIMAGE_F, _ZIMAGE_D),
)

_SKIP_KINDS = {
    Preset.QWEN_LIKE: (),
    Preset.FLUX_LIKE: (LayerKind.OUT_DOWN,),
    Preset.ZIMAGE_LIKE: (LayerKind.OUT, LayerKind.UP),
}


class LayerIO(NamedTuple):
    input: DenseMatrix
    output: DenseMatrix


def _scaled(dim: int, scale: int, what: str) -> int:
    if dim % scale != 0 or (dim // scale) % 4 != 0:
        raise ConfigurationError(f"scale {scale} turns {what} dimension {dim} into {dim / scale:g}, not a multiple of 4")
    return dim // scale


def _layer_specs(cfg: StackConfig) -> List[LayerSpec]:
    plan: List[Tuple[str, Sequence, Stream, bool]] = []
    if cfg.preset == Preset.QWEN_LIKE:
        plan += [(f"transformer_blocks.{b}", _QWEN_BLOCK, Stream.IMAGE, False) for b in range(cfg.depth)]
    elif cfg.preset == Preset.FLUX_LIKE:
        plan += [(f"transformer_blocks.{b}", _FLUX_DOUBLE_BLOCK, Stream.IMAGE, False) for b in range(cfg.depth)]
        plan += [(f"single_transformer_blocks.{b}", _FLUX_SINGLE_BLOCK, Stream.MIXED, True) for b in range(cfg.single_blocks)]
    else:
        plan += [(f"layers.{b}", _ZIMAGE_BLOCK, Stream.MIXED, True) for b in range(cfg.depth)]

    specs = []
    for position, (prefix, block, stream, single) in enumerate(plan):
        for suffix, kind, d_in, d_out in block:
            specs.append(
                LayerSpec(
                    name=f"{prefix}.{suffix}",
                    kind=kind,
                    d_in=_scaled(d_in, cfg.scale, f"{suffix} input"),
                    d_out=_scaled(d_out, cfg.scale, f"{suffix} output"),
                    stream=stream,
                    block=position,
                    single_stream=single,
                )
            )
    return specs


def layer_seed(seed: int, index: int) -> int:
    """Independent 64-bit stream per layer, derived from the stack seed"""
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])


def build_stack(cfg: StackConfig) -> Stack:
    """Deterministic gaussian(0, 1/sqrt(d_in)) weights for every layer of the preset"""
    layers = []
    for index, spec in enumerate(_layer_specs(cfg)):
        weight = sample(RandomSpec.gaussian(0.0, 1.0 / np.sqrt(spec.d_in), layer_seed(cfg.seed, index)), spec.d_out, spec.d_in)
        layers.append(Layer(spec=spec, weight=weight))
    stack = Stack(config=cfg, layers=tuple(layers))
    logger.info(f"built {cfg.preset.value} stack: {len(layers)} layers, width {stack.d_model}, seed {cfg.seed}")
    return stack


def gelu(x: np.ndarray) -> np.ndarray:
    """tanh approximation"""
    x = x.astype(np.float32)
    c = np.float32(np.sqrt(2.0 / np.pi))
    return (np.float32(0.5) * x * (np.float32(1.0) + np.tanh(c * (x + np.float32(0.044715) * x * x * x)))).astype(np.float32)


def _mix(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    return (v * scipy.special.expit(q * k)).astype(np.float32)


def run_layer(layer: Layer, x, policy: ExecPolicy) -> DenseMatrix:
    """Apply one layer under the mode its policy assigns"""
    x = as_dense(x, layer.name)
    if x.shape[1] != layer.spec.d_in:
        raise DimensionError(f"{layer.name} expects width {layer.spec.d_in}, got {x.shape[1]}")
    lp = policy.for_layer(layer.name)

    if lp.mode in (ExecMode.DENSE, ExecMode.SKIP):
        return gemm(x, layer.weight, policy.kernel)

    if lp.mode == ExecMode.WEIGHT_SPARSE:
        pruned = prune_for_batch(layer.weight, x, lp.score, policy.pattern)
        y = gemm(x, pruned, policy.kernel)
        if lp.lora is not None:
            y += lora_residual(x, lp.lora.la, lp.lora.lb, policy.kernel)
        return y

    if lp.lora is not None:
        return fused_sparse_lora_linear(
            x, layer.weight, lp.lora.la, lp.lora.lb, policy.pattern, lp.granularity, policy.eps, policy.kernel
        )
    y, _ = fused_sparse_linear(x, layer.weight, policy.pattern, lp.granularity, policy.eps, policy.kernel)
    return y


def _blocks(stack: Stack) -> List[Dict[LayerKind, str]]:
    """Layer names of every block keyed by kind, in execution order"""
    blocks: Dict[int, Dict[LayerKind, str]] = {}
    for layer in stack.layers:
        blocks.setdefault(layer.spec.block, {})[layer.spec.kind] = layer.name
    return [blocks[b] for b in sorted(blocks)]


def _run_block(names: Dict[LayerKind, str], h: np.ndarray, call: Callable[[str, np.ndarray], np.ndarray]) -> np.ndarray:
    width = h.shape[1]
    if LayerKind.QKV_UP in names:
        z = call(names[LayerKind.QKV_UP], h)
        q, k, v, mlp = z[:, :width], z[:, width:2 * width], z[:, 2 * width:3 * width], z[:, 3 * width:]
        joined = np.concatenate([_mix(q, k, v), gelu(mlp)], axis=1)
        return h + call(names[LayerKind.OUT_DOWN], joined)

    if LayerKind.QKV in names:
        q, k, v = np.split(call(names[LayerKind.QKV], h), 3, axis=1)
    else:
        q = call(names[LayerKind.Q], h)
        k = call(names[LayerKind.K], h)
        v = call(names[LayerKind.V], h)
    h = h + call(names[LayerKind.OUT], _mix(q, k, v))

    up = gelu(call(names[LayerKind.UP], h))
    if LayerKind.GATE in names:
        up = up * call(names[LayerKind.GATE], h)
    return h + call(names[LayerKind.DOWN], up)


def forward(stack: Stack, x, policy: ExecPolicy) -> Tuple[DenseMatrix, Dict[str, LayerIO]]:
    """Run the stack; every layer's input and output are kept for analysis"""
    policy.check_layers(stack.names)
    h = as_dense(x, "x")
    if h.shape[1] != stack.d_model:
        raise DimensionError(f"stack expects width {stack.d_model}, got {h.shape[1]}")

    by_name = {layer.name: layer for layer in stack.layers}
    records: Dict[str, LayerIO] = {}

    def call(name: str, inp: np.ndarray) -> np.ndarray:
        inp = as_dense(inp, name)
        out = run_layer(by_name[name], inp, policy)
        records[name] = LayerIO(inp, out)
        return out

    for names in _blocks(stack):
        h = _run_block(names, h, call)
    return h, records


def preset_skip_list(stack: Stack) -> List[str]:
    """Layers the preset keeps dense: single-stream Out-Down (flux-like), Out and Up (zimage-like)"""
    kinds = _SKIP_KINDS[stack.config.preset]
    return [layer.name for layer in stack.layers if layer.spec.single_stream and layer.spec.kind in kinds]


def default_policy(
    stack: Stack,
    mode: ExecMode = ExecMode.DENSE,
    granularity: CompensationGranularity = CompensationGranularity.PER_TENSOR,
    score: Optional[ScoreSpec] = None,
    loras: Optional[Dict[str, LoraPair]] = None,
    skip: bool = False,
    pattern: Optional[NMPattern] = None,
    eps: Optional[float] = None,
    kernel: Optional[KernelConfig] = None,
    name: Optional[str] = None,
) -> ExecPolicy:
    """One mode for every layer, optional per-layer LoRA branches, optional preset skip list"""
    if mode == ExecMode.WEIGHT_SPARSE and score is None:
        score = ScoreSpec()
    try:
        layer_score = score if mode == ExecMode.WEIGHT_SPARSE else None
        default = LayerPolicy(mode=mode, granularity=granularity, score=layer_score)
        overrides: Dict[str, LayerPolicy] = {
            layer_name: LayerPolicy(mode=mode, granularity=granularity, score=layer_score, lora=lora)
            for layer_name, lora in (loras or {}).items()
        }
        if skip:
            for layer_name in preset_skip_list(stack):
                overrides[layer_name] = LayerPolicy(mode=ExecMode.SKIP)
    except ValidationError as e:
        raise ConfigurationError(f"invalid policy: {e.errors()[0]['msg']}") from e

    return ExecPolicy.build(
        name=name or mode.value + ("+skip" if skip else ""),
        default=default,
        overrides=overrides,
        pattern=pattern or NMPattern(),
        eps=settings.eps if eps is None else eps,
        kernel=kernel,
    )


def dense_inputs(stack: Stack, x0) -> Dict[str, DenseMatrix]:
    """Input of every layer along the dense reference pass"""
    _, records = forward(stack, x0, default_policy(stack))
    return {name: io.input for name, io in records.items()}


def _fit_pair(
    layer: Layer,
    x: np.ndarray,
    reference: np.ndarray,
    pattern: NMPattern,
    granularity: CompensationGranularity,
    eps: float,
    rank: int,
    solver: Solver,
    train: Optional[TrainConfig],
) -> LoraPair:
    r = min(rank, layer.spec.d_in, layer.spec.d_out)
    if solver == Solver.RRR:
        return rrr_fit(x, layer.weight, pattern, granularity, eps, r, reference=reference)
    pair, _ = gd_fit(x, layer.weight, pattern, granularity, eps, r, train, reference=reference)
    return pair


def fit_stack_lora(
    stack: Stack,
    x0,
    pattern: Optional[NMPattern] = None,
    granularity: CompensationGranularity = CompensationGranularity.PER_TENSOR,
    eps: Optional[float] = None,
    rank: Optional[int] = None,
    solver: Solver = Solver.RRR,
    train: Optional[TrainConfig] = None,
    layers: Optional[Sequence[str]] = None,
    skip: bool = False,
    kernel: Optional[KernelConfig] = None,
) -> Dict[str, LoraPair]:
    """Per-layer compensation fitted in execution order along the compensated sparse pass

    Each pair regresses onto its layer's output in the dense reference pass,
    from the input the layer receives once every earlier layer runs
    activation-sparse with its own pair (and the preset's skip list when
    `skip` is set). Running the returned pairs under the same policy on x0
    reproduces those inputs exactly. Layers outside `layers` run sparse
    without a branch. The rank is clipped to the layer's smaller dimension.
    """
    if solver not in (Solver.RRR, Solver.GD):
        raise ConfigurationError("slim pairs are fitted on weights; use fit_stack_slim")
    pattern = pattern or NMPattern()
    rank = settings.lora_rank if rank is None else rank
    wanted = set(stack.names if layers is None else [stack.resolve(n).name for n in layers])
    _, ref_records = forward(stack, x0, default_policy(stack, name="dense"))

    rows = np.shape(x0)[0]
    narrow = [layer.name for layer in stack.layers if layer.name in wanted and rows < layer.spec.d_in]
    if narrow:
        logger.warning(
            f"{rows} rows is fewer than the input width of {len(narrow)} layers; "
            "their pairs interpolate this batch and will not transfer to other inputs"
        )

    loras: Dict[str, LoraPair] = {}

    def policy() -> ExecPolicy:
        return default_policy(
            stack, ExecMode.ACTIVATION_SPARSE, granularity, loras=loras, skip=skip, pattern=pattern, eps=eps, kernel=kernel
        )

    def call(name: str, inp: np.ndarray) -> np.ndarray:
        inp = as_dense(inp, name)
        layer = stack.layer(name)
        current = policy()
        if name in wanted and current.for_layer(name).mode != ExecMode.SKIP:
            loras[name] = _fit_pair(
                layer, inp, ref_records[name].output, pattern, granularity, current.eps, rank, solver, train
            )
            current = policy()
        return run_layer(layer, inp, current)

    h = as_dense(x0, "x")
    for names in _blocks(stack):
        h = _run_block(names, h, call)
    logger.info(f"fitted {len(loras)} {solver.value} LoRA pairs at rank {rank}")
    return loras


def fit_stack_slim(
    stack: Stack,
    x0,
    score: ScoreSpec,
    pattern: Optional[NMPattern] = None,
    ratio: Optional[float] = None,
) -> Dict[str, LoraPair]:
    """Weight-side low-rank branches from the SVD of each layer's pruning delta"""
    pattern = pattern or NMPattern()
    inputs = dense_inputs(stack, x0)
    loras = {}
    for layer in stack.layers:
        pruned = prune_for_batch(layer.weight, inputs[layer.name], score, pattern)
        loras[layer.name] = slim_init(layer.weight, pruned, slim_rank(layer.spec.d_out, layer.spec.d_in, ratio))
    return loras


def _layer_file(name: str) -> str:
    return f"{name}.lynx"


def save_stack(directory: Union[str, Path], stack: Stack) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for layer in stack.layers:
        save_tensor(directory / _layer_file(layer.name), layer.weight)
    write_json(
        directory / MANIFEST_FILE,
        {
            "config": stack.config.model_dump(mode="json"),
            "rng_algorithm": RNG_ALGORITHM,
            "layers": [layer.spec.model_dump(mode="json") for layer in stack.layers],
        },
    )
    logger.info(f"saved {len(stack.layers)} layers to {directory}")
    return directory


def load_stack(directory: Union[str, Path]) -> Stack:
    directory = Path(directory)
    manifest = read_json(directory / MANIFEST_FILE)
    try:
        config = StackConfig(**manifest["config"])
        specs = [LayerSpec(**entry) for entry in manifest["layers"]]
    except (ValidationError, KeyError, TypeError) as e:
        raise FormatError(f"invalid stack manifest in {directory}: {e}") from e

    layers = []
    for spec in specs:
        weight = load_tensor(directory / _layer_file(spec.name))
        if weight.shape != (spec.d_out, spec.d_in):
            raise FormatError(f"{spec.name}: stored weight {weight.shape} does not match manifest ({spec.d_out}, {spec.d_in})")
        layers.append(Layer(spec=spec, weight=weight))
    if not layers:
        raise FormatError(f"stack manifest in {directory} lists no layers")
    return Stack(config=config, layers=tuple(layers))
